#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "cbswr/checkpoint.hpp"
#include "cbswr/cli.hpp"
#include "cbswr/config.hpp"
#include "cbswr/data.hpp"
#include "cbswr/errors.hpp"

namespace cbswr {
namespace {

namespace fs = std::filesystem;

TrainState state_of(const fs::path& ckpt) { return TrainState::from_checkpoint(load_checkpoint(ckpt)); }

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    root_ = fs::temp_directory_path() /
            ("cbswr_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(root_);
    fs::create_directories(root_);
    config_ = root_ / "tiny.cfg";
    std::ofstream(config_) << "# small and fast\n"
                              "run.name = tiny\n"
                              "data.num_classes = 4\n"
                              "data.train_classes = 2\n"
                              "data.samples_per_class = 12\n"
                              "model.num_clusters = 4\n"
                              "train.epochs = 2\n"
                              "train.batch_size = 8\n"
                              "gradcheck.batches = 1\n";
  }
  void TearDown() override { fs::remove_all(root_); }

  int run(std::vector<std::string> args) {
    out_.str("");
    err_.str("");
    return run_cli(args, out_, err_);
  }

  fs::path root_, config_;
  std::ostringstream out_, err_;
};

TEST(RunConfig, DefaultHyperparameters) {
  const RunConfig cfg;
  EXPECT_EQ(cfg.train.weights.alpha, 0.9);
  EXPECT_EQ(cfg.train.weights.beta, 0.3);
  EXPECT_EQ(cfg.train.weights.gamma, 0.01);
  EXPECT_EQ(cfg.train.weights.tau, 0.1);
  EXPECT_EQ(cfg.train.momentum, 0.9);
  EXPECT_EQ(cfg.model.num_clusters, 32u);
}

TEST(RunConfig, TextRoundTrip) {
  RunConfig cfg;
  apply_override(cfg, "loss.tau=0.25");
  apply_override(cfg, "train.mode=cbs");
  apply_override(cfg, "eval.ks=1,3");
  apply_override(cfg, "data.split_rule=seeded");
  cfg.finalize();
  const RunConfig back = parse_run_config(cfg.to_text());
  EXPECT_EQ(back.to_text(), cfg.to_text());
  EXPECT_EQ(back.train.weights.tau, 0.25);
  EXPECT_EQ(back.train.mode, AblationMode::kCbs);
  EXPECT_EQ(back.eval_ks, (std::vector<std::size_t>{1, 3}));
  for (const auto& key : config_keys()) EXPECT_NE(cfg.to_text().find(key + " = "), std::string::npos) << key;
}

TEST(RunConfig, UnknownKeyIsNamed) {
  try {
    parse_run_config("train.epochs = 3\nloss.delta = 1\n");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("loss.delta"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
}

TEST(RunConfig, MalformedValuesRejected) {
  EXPECT_THROW(parse_run_config("train.epochs = many\n"), ConfigError);
  EXPECT_THROW(parse_run_config("train.epochs\n"), ConfigError);
  EXPECT_THROW(parse_run_config("train.mode = everything\n"), ConfigError);
  EXPECT_THROW(parse_run_config("model.embed_bias = maybe\n"), ConfigError);
}

TEST(RunConfig, FinalizeValidatesClusterCount) {
  RunConfig cfg;
  apply_override(cfg, "model.num_clusters=64");
  EXPECT_THROW(cfg.finalize(), ConfigError);  // K must not exceed m = 32
}

TEST(RunConfig, FinalizeDerivesSeeds) {
  RunConfig a, b;
  apply_override(b, "run.seed=1");
  a.finalize();
  b.finalize();
  EXPECT_NE(a.model.init_seed, b.model.init_seed);
  EXPECT_NE(a.train.seed, b.train.seed);
  EXPECT_NE(a.data_seed(), b.data_seed());
  EXPECT_EQ(a.train.rim.num_clusters, a.model.num_clusters);
}

TEST_F(CliTest, UnknownConfigKeyExitsWithConfigError) {
  std::ofstream(config_, std::ios::app) << "train.warmup = 3\n";
  EXPECT_EQ(run({"train", "--config", config_.string(), "--out", (root_ / "o").string()}), kExitConfig);
  EXPECT_NE(err_.str().find("train.warmup"), std::string::npos);
}

TEST_F(CliTest, UnknownOverrideExitsWithConfigError) {
  EXPECT_EQ(run({"train", "--config", config_.string(), "--set", "nope=1"}), kExitConfig);
  EXPECT_NE(err_.str().find("nope"), std::string::npos);
}

TEST_F(CliTest, BadUsageExitsWithConfigError) {
  EXPECT_EQ(run({}), kExitConfig);
  EXPECT_EQ(run({"frobnicate"}), kExitConfig);
  EXPECT_EQ(run({"eval"}), kExitConfig);
}

TEST_F(CliTest, TrainWritesRunDirectory) {
  const fs::path out = root_ / "run";
  ASSERT_EQ(run({"train", "--config", config_.string(), "--set", "train.checkpoint_interval=1", "--set",
                 "loss.tau=0.2", "--out", out.string()}),
            kExitOk)
      << err_.str();
  EXPECT_TRUE(fs::exists(out / "resolved.cfg"));
  EXPECT_TRUE(fs::exists(out / "final.ckpt"));
  EXPECT_TRUE(fs::exists(out / "checkpoints" / "epoch_0001.ckpt"));
  EXPECT_TRUE(fs::exists(out / "checkpoints" / "epoch_0002.ckpt"));
  EXPECT_TRUE(fs::exists(out / "eval.json"));
  const RunConfig resolved = load_run_config(out / "resolved.cfg");
  EXPECT_EQ(resolved.train.weights.tau, 0.2);
  EXPECT_EQ(resolved.run_name, "tiny");

  std::istringstream log(read_file(out / "metrics.jsonl"));
  std::string line, last;
  std::size_t steps = 0;
  while (std::getline(log, line)) {
    last = line;
    if (nlohmann::json::parse(line).contains("step")) ++steps;
  }
  EXPECT_EQ(steps, 2u * 3u);
  EXPECT_TRUE(nlohmann::json::parse(last).contains("eval"));
}

TEST_F(CliTest, TrainTwiceIsBitIdentical) {
  const fs::path a = root_ / "a", b = root_ / "b";
  ASSERT_EQ(run({"train", "--config", config_.string(), "--out", a.string()}), kExitOk);
  ASSERT_EQ(run({"train", "--config", config_.string(), "--out", b.string()}), kExitOk);
  EXPECT_EQ(state_of(a / "final.ckpt"), state_of(b / "final.ckpt"));
  EXPECT_EQ(read_file(a / "metrics.jsonl"), read_file(b / "metrics.jsonl"));
  EXPECT_EQ(read_file(a / "eval.json"), read_file(b / "eval.json"));
}

TEST_F(CliTest, ResumeMatchesUninterruptedRun) {
  const fs::path full = root_ / "full", part = root_ / "part";
  ASSERT_EQ(run({"train", "--config", config_.string(), "--set", "train.epochs=3", "--out", full.string()}), kExitOk);
  ASSERT_EQ(run({"train", "--config", config_.string(), "--set", "train.epochs=1", "--out", part.string()}), kExitOk);
  ASSERT_EQ(run({"train", "--config", config_.string(), "--set", "train.epochs=3", "--checkpoint",
                 (part / "final.ckpt").string(), "--out", part.string()}),
            kExitOk)
      << err_.str();
  EXPECT_EQ(state_of(full / "final.ckpt"), state_of(part / "final.ckpt"));
  EXPECT_EQ(read_file(full / "eval.json"), read_file(part / "eval.json"));
}

TEST_F(CliTest, EvalIsDeterministic) {
  const fs::path out = root_ / "run";
  ASSERT_EQ(run({"train", "--config", config_.string(), "--out", out.string()}), kExitOk);
  const std::string ckpt = (out / "final.ckpt").string();
  ASSERT_EQ(run({"eval", "--checkpoint", ckpt}), kExitOk) << err_.str();
  const std::string first = out_.str();
  ASSERT_EQ(run({"eval", "--checkpoint", ckpt}), kExitOk);
  EXPECT_EQ(out_.str(), first);
  const auto j = nlohmann::json::parse(first);
  EXPECT_EQ(j.at("num_queries"), 24);
  EXPECT_EQ(j, nlohmann::json::parse(read_file(out / "eval.json")));

  ASSERT_EQ(run({"eval", "--checkpoint", ckpt, "--k", "1,3"}), kExitOk);
  EXPECT_TRUE(nlohmann::json::parse(out_.str()).at("recall_at").contains("3"));
}

TEST_F(CliTest, EvalRefusesArchitectureOverride) {
  const fs::path out = root_ / "run";
  ASSERT_EQ(run({"train", "--config", config_.string(), "--out", out.string()}), kExitOk);
  EXPECT_EQ(run({"eval", "--checkpoint", (out / "final.ckpt").string(), "--set", "model.embed_dim=8"}), kExitConfig);
  EXPECT_EQ(run({"eval", "--checkpoint", (root_ / "missing.ckpt").string()}), kExitConfig);
}

TEST_F(CliTest, EmbedWritesOneRowPerImage) {
  const fs::path out = root_ / "run";
  ASSERT_EQ(run({"train", "--config", config_.string(), "--out", out.string()}), kExitOk);
  const fs::path emb = root_ / "emb";
  ASSERT_EQ(run({"embed", "--checkpoint", (out / "final.ckpt").string(), "--split", "all", "--out", emb.string()}),
            kExitOk)
      << err_.str();
  const ArrayContainer c = read_container(emb);
  EXPECT_EQ(c.kind, "embeddings");
  EXPECT_EQ(c.array.shape, (Shape{48, 16}));
  EXPECT_EQ(c.labels.size(), 48u);
}

TEST_F(CliTest, EmbedAndEvalReadExportedDataset) {
  const fs::path out = root_ / "run", data = root_ / "data";
  ASSERT_EQ(run({"train", "--config", config_.string(), "--out", out.string()}), kExitOk);
  ASSERT_EQ(run({"dataset", "--config", config_.string(), "--out", data.string()}), kExitOk) << err_.str();
  const std::string ckpt = (out / "final.ckpt").string();
  ASSERT_EQ(run({"eval", "--checkpoint", ckpt, "--dataset", (data / "test").string()}), kExitOk) << err_.str();
  EXPECT_EQ(nlohmann::json::parse(out_.str()), nlohmann::json::parse(read_file(out / "eval.json")));
  ASSERT_EQ(run({"embed", "--checkpoint", ckpt, "--dataset", (data / "train").string(), "--out",
                 (root_ / "emb").string()}),
            kExitOk);
  EXPECT_EQ(read_container(root_ / "emb").array.dim(0), 24u);
}

TEST_F(CliTest, GradcheckPasses) {
  EXPECT_EQ(run({"gradcheck", "--config", config_.string(), "--set", "train.batch_size=4"}), kExitOk) << out_.str();
  EXPECT_NE(out_.str().find("PASS batch=0 loss=total"), std::string::npos);
  EXPECT_EQ(out_.str().find("FAIL"), std::string::npos);
}

TEST_F(CliTest, AblateWritesComparisonTable) {
  const fs::path out = root_ / "abl";
  ASSERT_EQ(run({"ablate", "--config", config_.string(), "--set", "train.epochs=1", "--out", out.string()}), kExitOk)
      << err_.str();
  const auto j = nlohmann::json::parse(read_file(out / "ablation.json"));
  ASSERT_EQ(j.at("rows").size(), 3u);
  const std::vector<std::string> modes{"only_rim", "cbs", "cbswr"};
  for (std::size_t i = 0; i < 3; ++i) {
    const auto& row = j.at("rows")[i];
    EXPECT_EQ(row.at("mode"), modes[i]);
    for (const char* key : {"nmi", "R@1", "R@2", "R@4", "R@8"}) EXPECT_TRUE(row.contains(key)) << key;
    EXPECT_TRUE(fs::exists(out / modes[i] / "final.ckpt"));
  }
  std::istringstream csv(read_file(out / "ablation.csv"));
  std::string header;
  std::getline(csv, header);
  EXPECT_EQ(header, "mode,NMI,R@1,R@2,R@4,R@8");
}

TEST_F(CliTest, OutputRootFromEnvironment) {
  ::setenv("CBSWR_OUT_ROOT", (root_ / "envroot").c_str(), 1);
  const int code = run({"train", "--config", config_.string(), "--set", "train.epochs=1"});
  ::unsetenv("CBSWR_OUT_ROOT");
  ASSERT_EQ(code, kExitOk) << err_.str();
  EXPECT_TRUE(fs::exists(root_ / "envroot" / "tiny" / "final.ckpt"));
}

}  // namespace
}  // namespace cbswr
