#include "cbswr/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>

#include "CLI11.hpp"
#include "json.hpp"

#include "cbswr/checkpoint.hpp"
#include "cbswr/config.hpp"
#include "cbswr/errors.hpp"
#include "cbswr/evaluation.hpp"
#include "cbswr/trainer.hpp"

namespace fs = std::filesystem;

namespace cbswr {

namespace {

struct CommonFlags {
  std::string config_path;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, CommonFlags& flags) {
  cmd->add_option("--config", flags.config_path, "Config file (flat key = value)");
  cmd->add_option("--set", flags.sets, "Override a config key: key=value (repeatable)");
  cmd->add_option("--seed", flags.seed, "Master seed (overrides run.seed)");
  cmd->add_option("--out", flags.out, "Output directory");
}

RunConfig resolve_config(const CommonFlags& flags, RunConfig base = {}) {
  RunConfig cfg = flags.config_path.empty() ? std::move(base) : load_run_config(flags.config_path, std::move(base));
  for (const auto& s : flags.sets) apply_override(cfg, s);
  if (flags.seed) cfg.seed = *flags.seed;
  if (!flags.out.empty()) cfg.out_dir = flags.out;
  cfg.finalize();
  return cfg;
}

fs::path output_dir(const RunConfig& cfg) {
  if (!cfg.out_dir.empty()) return cfg.out_dir;
  const char* root = std::getenv("CBSWR_OUT_ROOT");
  return fs::path(root && *root ? root : "runs") / cfg.run_name;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << text;
}

std::string checkpoint_name(std::uint64_t epoch) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "epoch_%04llu.ckpt", static_cast<unsigned long long>(epoch));
  return buf;
}

struct TrainOutcome {
  FitResult fit;
  EvalReport report;
};

TrainOutcome run_training(const RunConfig& cfg, const fs::path& dir, std::optional<TrainState> resume,
                          std::ostream& out) {
  fs::create_directories(dir / "checkpoints");
  const std::string resolved = cfg.to_text();
  write_text(dir / "resolved.cfg", resolved);
  const DatasetSplit split = make_split(cfg.data, cfg.data_seed());

  std::ofstream log(dir / "metrics.jsonl", resume ? std::ios::app : std::ios::trunc);
  if (!log) throw ConfigError("cannot write " + (dir / "metrics.jsonl").string());
  FitOptions options;
  options.resume_from = std::move(resume);
  options.metrics_log = &log;
  options.on_checkpoint = [&](const TrainState& state) {
    save_checkpoint(dir / "checkpoints" / checkpoint_name(state.epoch), state.to_checkpoint(resolved));
  };
  TrainOutcome outcome{fit(split.train, cfg.model, cfg.train, options), {}};
  save_checkpoint(dir / "final.ckpt", outcome.fit.state.to_checkpoint(resolved));

  outcome.report = evaluate(outcome.fit.state.model, split.test, cfg.data.crop_fraction, cfg.eval_ks);
  log << nlohmann::json{{"eval", outcome.report.to_json()}, {"epoch", outcome.fit.state.epoch}}.dump() << '\n';
  write_text(dir / "eval.json", outcome.report.to_json().dump(2) + "\n");
  out << "[" << cfg.run_name << "] epochs=" << outcome.fit.state.epoch << " steps=" << outcome.fit.state.step
      << " eval=" << outcome.report.to_json().dump() << "\n";
  return outcome;
}

int cmd_train(const CommonFlags& flags, const std::string& resume_path, std::ostream& out) {
  const RunConfig cfg = resolve_config(flags);
  std::optional<TrainState> resume;
  if (!resume_path.empty()) resume = TrainState::from_checkpoint(load_checkpoint(resume_path, cfg.model));
  const fs::path dir = output_dir(cfg);
  run_training(cfg, dir, std::move(resume), out);
  out << "wrote " << dir.string() << "\n";
  return kExitOk;
}

std::string fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

int cmd_ablate(const CommonFlags& flags, std::ostream& out) {
  RunConfig base = resolve_config(flags);
  const fs::path dir = output_dir(base);
  const std::vector<AblationMode> modes{AblationMode::kOnlyRim, AblationMode::kCbs, AblationMode::kCbswr};
  const std::vector<std::size_t> ks{1, 2, 4, 8};
  nlohmann::json rows = nlohmann::json::array();
  std::ostringstream table, csv;
  table << std::left << std::setw(10) << "mode" << std::setw(9) << "NMI";
  csv << "mode,NMI";
  for (auto k : ks) {
    table << std::setw(9) << ("R@" + std::to_string(k));
    csv << ",R@" << k;
  }
  table << "\n";
  csv << "\n";
  for (AblationMode mode : modes) {
    RunConfig cfg = base;
    cfg.train.mode = mode;
    cfg.eval_ks = ks;
    cfg.run_name = base.run_name + "_" + to_string(mode);
    cfg.out_dir = (dir / to_string(mode)).string();
    const TrainOutcome o = run_training(cfg, cfg.out_dir, std::nullopt, out);
    table << std::setw(10) << to_string(mode) << std::setw(9) << fixed(o.report.nmi, 4);
    csv << to_string(mode) << "," << fixed(o.report.nmi, 6);
    nlohmann::json row{{"mode", to_string(mode)}, {"nmi", o.report.nmi}};
    for (auto k : ks) {
      table << std::setw(9) << fixed(o.report.recall_at.at(k), 4);
      csv << "," << fixed(o.report.recall_at.at(k), 6);
      row["R@" + std::to_string(k)] = o.report.recall_at.at(k);
    }
    table << "\n";
    csv << "\n";
    rows.push_back(row);
  }
  write_text(dir / "ablation.txt", table.str());
  write_text(dir / "ablation.csv", csv.str());
  write_text(dir / "ablation.json", nlohmann::json{{"rows", rows}}.dump(2) + "\n");
  out << table.str();
  return kExitOk;
}

struct LoadedModel {
  RunConfig cfg;
  ModelBundle model;
};

LoadedModel load_for_inference(const CommonFlags& flags, const std::string& checkpoint_path) {
  if (checkpoint_path.empty()) throw ConfigError("--checkpoint is required");
  const Checkpoint ckpt = load_checkpoint(checkpoint_path);
  RunConfig stored = ckpt.run_config.empty() ? RunConfig{} : parse_run_config(ckpt.run_config);
  CommonFlags no_out = flags;
  no_out.out.clear();
  RunConfig cfg = resolve_config(no_out, std::move(stored));
  // Enforces that any --config / --set overrides leave the architecture intact.
  Checkpoint checked = load_checkpoint(checkpoint_path, cfg.model);
  return {std::move(cfg), std::move(checked.model)};
}

Dataset select_dataset(const RunConfig& cfg, const std::string& dataset_dir, const std::string& split_name) {
  if (!dataset_dir.empty()) return dataset_from_container(read_container(dataset_dir));
  DatasetSplit split = make_split(cfg.data, cfg.data_seed());
  if (split_name == "test") return split.test;
  if (split_name == "train") return split.train;
  if (split_name == "all") return generate_dataset(cfg.data, cfg.data_seed());
  throw ConfigError("--split must be train, test or all");
}

int cmd_eval(const CommonFlags& flags, const std::string& ckpt_path, const std::string& dataset_dir,
             const std::vector<std::size_t>& ks, std::ostream& out) {
  const LoadedModel lm = load_for_inference(flags, ckpt_path);
  const Dataset ds = select_dataset(lm.cfg, dataset_dir, "test");
  const EvalReport report = evaluate(lm.model, ds, lm.cfg.data.crop_fraction, ks.empty() ? lm.cfg.eval_ks : ks);
  const std::string text = report.to_json().dump(2) + "\n";
  out << text;
  if (!flags.out.empty()) {
    fs::create_directories(flags.out);
    write_text(fs::path(flags.out) / "eval.json", text);
  }
  return kExitOk;
}

int cmd_embed(const CommonFlags& flags, const std::string& ckpt_path, const std::string& dataset_dir,
              const std::string& split, std::ostream& out) {
  if (flags.out.empty()) throw ConfigError("embed requires --out DIR");
  const LoadedModel lm = load_for_inference(flags, ckpt_path);
  const Dataset ds = select_dataset(lm.cfg, dataset_dir, split);
  const EmbeddingIndex index = extract_embeddings(lm.model, ds, lm.cfg.data.crop_fraction);
  write_container(flags.out, to_container(index, {{"checkpoint", ckpt_path}, {"crop_fraction", lm.cfg.data.crop_fraction}}));
  out << "wrote " << index.size() << " embeddings of dim " << lm.model.config.embed_dim << " to " << flags.out << "\n";
  return kExitOk;
}

int cmd_gradcheck(const CommonFlags& flags, std::ostream& out) {
  const RunConfig cfg = resolve_config(flags);
  const ModelBundle model = ModelBundle::initialize(cfg.model);
  const DatasetSplit split = make_split(cfg.data, cfg.data_seed());
  std::vector<Batch> batches;
  for (std::uint64_t e = 0; batches.size() < cfg.gradcheck_batches; ++e) {
    auto more = make_batches(split.train, cfg.train.batch_size, derive_seed(cfg.train.seed, 0x9c00 + e),
                             cfg.data.crop_fraction);
    for (auto& b : more)
      if (batches.size() < cfg.gradcheck_batches) batches.push_back(std::move(b));
  }
  bool ok = true;
  nlohmann::json all = nlohmann::json::array();
  for (std::size_t b = 0; b < batches.size(); ++b) {
    for (LossSelector sel : {LossSelector::kRim, LossSelector::kRec, LossSelector::kMetric, LossSelector::kTotal}) {
      GradCheckOptions opts;
      opts.seed = derive_seed(cfg.seed, b);
      const GradCheckReport r = grad_check(sel, model, batches[b], cfg.train.weights, cfg.train.rim, opts);
      nlohmann::json j = r.to_json();
      j["batch"] = b;
      out << (r.passed ? "PASS " : "FAIL ") << "batch=" << b << " loss=" << to_string(sel)
          << " max_rel_error=" << r.max_rel_error() << "\n";
      ok = ok && r.passed;
      all.push_back(std::move(j));
    }
  }
  if (!flags.out.empty()) {
    fs::create_directories(flags.out);
    write_text(fs::path(flags.out) / "gradcheck.json", all.dump(2) + "\n");
  }
  return ok ? kExitOk : kExitCheckFailed;
}

int cmd_dataset(const CommonFlags& flags, std::ostream& out) {
  if (flags.out.empty()) throw ConfigError("dataset requires --out DIR");
  const RunConfig cfg = resolve_config(flags);
  const DatasetSplit split = make_split(cfg.data, cfg.data_seed());
  const nlohmann::json meta{{"data_seed", cfg.data_seed()}, {"config", cfg.to_text()}};
  auto with_classes = [&](const std::vector<std::int64_t>& classes) {
    nlohmann::json m = meta;
    m["classes"] = classes;
    return m;
  };
  write_container(fs::path(flags.out) / "train", to_container(split.train, with_classes(split.train_classes)));
  write_container(fs::path(flags.out) / "test", to_container(split.test, with_classes(split.test_classes)));
  out << "wrote " << split.train.size() << " train and " << split.test.size() << " test images to " << flags.out
      << "\n";
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"cbswr: unsupervised metric learning with clustering, center-based softmax and reconstruction"};
  app.require_subcommand(1);
  CommonFlags flags;
  std::string checkpoint, dataset_dir, split = "test";
  std::vector<std::size_t> ks;

  auto* train = app.add_subcommand("train", "Train a model and evaluate it on the held-out classes");
  add_common(train, flags);
  train->add_option("--checkpoint", checkpoint, "Resume from this checkpoint");
  auto* ablate = app.add_subcommand("ablate", "Train only_rim, cbs and cbswr with shared seeds and compare");
  add_common(ablate, flags);
  auto* eval = app.add_subcommand("eval", "Recall@K and NMI of a checkpoint");
  add_common(eval, flags);
  eval->add_option("--checkpoint", checkpoint, "Checkpoint to evaluate")->required();
  eval->add_option("--dataset", dataset_dir, "Dataset container (default: regenerate the test split)");
  eval->add_option("--k", ks, "Recall cut-offs, e.g. 1,2,4,8")->delimiter(',');
  auto* emb = app.add_subcommand("embed", "Write test-set embeddings to a container");
  add_common(emb, flags);
  emb->add_option("--checkpoint", checkpoint, "Checkpoint")->required();
  emb->add_option("--dataset", dataset_dir, "Dataset container (default: regenerate from config)");
  emb->add_option("--split", split, "train, test or all (when regenerating)");
  auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of every loss gradient");
  add_common(grad, flags);
  auto* data = app.add_subcommand("dataset", "Export the synthetic train/test split");
  add_common(data, flags);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*train) return cmd_train(flags, checkpoint, out);
    if (*ablate) return cmd_ablate(flags, out);
    if (*eval) return cmd_eval(flags, checkpoint, dataset_dir, ks, out);
    if (*emb) return cmd_embed(flags, checkpoint, dataset_dir, split, out);
    if (*grad) return cmd_gradcheck(flags, out);
    if (*data) return cmd_dataset(flags, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const CheckpointError& e) {
    err << "checkpoint error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const NumericalError& e) {
    err << "numerical failure in " << e.component() << ": " << e.what() << "\n";
    return kExitNumerical;
  } catch (const DegenerateEmbeddingError& e) {
    err << "numerical failure in embedding: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitInternal;
  }
  return kExitInternal;
}

}  // namespace cbswr
