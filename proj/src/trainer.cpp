#include "cbswr/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "cbswr/errors.hpp"
#include "cbswr/layers.hpp"

namespace cbswr {

std::string to_string(AblationMode mode) {
  switch (mode) {
    case AblationMode::kOnlyRim:
      return "only_rim";
    case AblationMode::kCbs:
      return "cbs";
    case AblationMode::kCbswr:
      return "cbswr";
  }
  return "?";
}

AblationMode parse_ablation_mode(const std::string& name) {
  if (name == "only_rim") return AblationMode::kOnlyRim;
  if (name == "cbs") return AblationMode::kCbs;
  if (name == "cbswr") return AblationMode::kCbswr;
  throw ConfigError("unknown ablation mode '" + name + "' (expected only_rim, cbs or cbswr)");
}

std::string to_string(LossSelector s) {
  switch (s) {
    case LossSelector::kRim:
      return "l_rim";
    case LossSelector::kRec:
      return "l_rec";
    case LossSelector::kMetric:
      return "l_m";
    case LossSelector::kTotal:
      return "total";
  }
  return "?";
}

LossWeights TrainConfig::effective_weights() const {
  LossWeights w = weights;
  if (mode == AblationMode::kOnlyRim) w.alpha = 0.0;
  if (mode != AblationMode::kCbswr) w.gamma = 0.0;
  return w;
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (!(learning_rate >= 0.0)) throw ConfigError("train.learning_rate must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train.momentum must lie in [0, 1)");
  if (!(crop_fraction > 0.0 && crop_fraction <= 1.0)) throw ConfigError("data.crop_fraction must lie in (0, 1]");
  weights.validate();
  rim.validate(batch_m());
}

TrainState TrainState::fresh(const ModelConfig& config) {
  TrainState s;
  s.model = ModelBundle::initialize(config);
  s.momentum = s.model.zeros_like();
  return s;
}

Checkpoint TrainState::to_checkpoint(std::string run_config) const {
  return Checkpoint{model, std::move(run_config), OptimizerState{momentum, epoch, step}};
}

TrainState TrainState::from_checkpoint(const Checkpoint& ckpt) {
  TrainState s;
  s.model = ckpt.model;
  if (ckpt.optimizer) {
    s.momentum = ckpt.optimizer->momentum;
    s.epoch = ckpt.optimizer->epoch;
    s.step = ckpt.optimizer->step;
  } else {
    s.momentum = s.model.zeros_like();
  }
  return s;
}

namespace {

void scale(Tensor& t, double s) {
  for (double& v : t.data) v *= s;
}

void add_into(Tensor& dst, const Tensor& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst.data[i] += src.data[i];
}

}  // namespace

BatchEvaluation evaluate_batch(const ModelBundle& model, const Tensor& images, std::span<const std::size_t> positive_of,
                               const LossWeights& coefficients, const RimConfig& rim, bool with_gradient,
                               const std::vector<std::size_t>* fixed_assignments) {
  const std::size_t m = images.dim(0);
  const std::size_t K = model.config.num_clusters;
  if (rim.num_clusters != K) throw ConfigError("rim.num_clusters does not match the model's cluster head");
  rim.validate(m);

  EncoderCache enc;
  const Tensor reps = encode(model, images, &enc);
  EmbeddingCache emb;
  const Tensor f = embed(model, reps, &emb);
  ClusterHeadCache head;
  const Tensor logits = cluster_logits(model, f, &head);
  const auto& head_w = model.cluster_head.at("weight").value;
  RimTerms rim_terms = rim_loss_from_logits(logits, head_w, rim);

  BatchEvaluation out;
  out.assignments = fixed_assignments ? *fixed_assignments : assign(layers::softmax_rows(logits));
  const auto centroids = compute_centroids(reps, out.assignments, K);
  out.active_clusters = centroids.size();
  out.cluster_sizes.assign(K, 0);
  std::vector<std::size_t> centroid_ids;
  for (const auto& c : centroids) {
    out.cluster_sizes[c.cluster_index] = c.member_count;
    centroid_ids.push_back(c.cluster_index);
  }

  const Tensor centroid_reps = centroid_matrix(centroids);
  EmbeddingCache cemb;
  const Tensor centroid_emb = embed(model, centroid_reps, &cemb);
  DecoderCache dec;
  const Tensor decoded = decode(model, centroid_reps, &dec);
  Tensor d_decoded;
  const double l_rec = reconstruction_loss(images, out.assignments, centroids, decoded,
                                           with_gradient && coefficients.gamma != 0.0 ? &d_decoded : nullptr);
  MetricLossResult ml = metric_loss(f, positive_of, centroid_emb, centroid_ids, out.assignments, coefficients.tau,
                                    with_gradient && coefficients.alpha != 0.0);
  out.skipped_samples = ml.skipped;
  out.breakdown = combined_loss(ml.value, rim_terms.value, l_rec, coefficients);
  if (!with_gradient) return out;

  ModelBundle grads = model.zeros_like();
  Tensor d_f(f.shape);
  Tensor d_centroid_reps(centroid_reps.shape);
  if (coefficients.alpha != 0.0) {
    scale(ml.d_embeddings, coefficients.alpha);
    add_into(d_f, ml.d_embeddings);
    scale(ml.d_centroids, coefficients.alpha);
    add_into(d_centroid_reps, embed_backward(model, cemb, ml.d_centroids, grads));
  }
  if (coefficients.beta != 0.0) {
    scale(rim_terms.d_logits, coefficients.beta);
    add_into(d_f, cluster_logits_backward(model, head, rim_terms.d_logits, grads));
    auto& dw = grads.cluster_head.at("weight").value;
    for (std::size_t i = 0; i < dw.size(); ++i) dw[i] += coefficients.beta * rim_terms.d_head_weight[i];
  }
  if (coefficients.gamma != 0.0) {
    scale(d_decoded, coefficients.gamma);
    add_into(d_centroid_reps, decode_backward(model, dec, d_decoded, grads));
  }
  Tensor d_reps = embed_backward(model, emb, d_f, grads);
  centroid_backward(centroids, d_centroid_reps, d_reps);
  encode_backward(model, enc, d_reps, grads);
  out.gradients = std::move(grads);
  return out;
}

StepResult train_step(TrainState& state, const Batch& batch, const TrainConfig& cfg) {
  const Tensor images = stack_images(batch.samples);
  const auto positives = twin_indices(images.dim(0));
  BatchEvaluation ev = evaluate_batch(state.model, images, positives, cfg.effective_weights(), cfg.rim, true);

  auto params = state.model.groups();
  auto velocity = state.momentum.groups();
  auto grads = ev.gradients->groups();
  for (std::size_t g = 0; g < params.size(); ++g) {
    for (std::size_t p = 0; p < params[g]->params.size(); ++p) {
      auto& value = params[g]->params[p].value;
      auto& vel = velocity[g]->params[p].value;
      const auto& grad = grads[g]->params[p].value;
      for (std::size_t i = 0; i < value.size(); ++i) {
        if (!std::isfinite(grad[i])) {
          throw NumericalError(params[g]->name, "non-finite gradient in " + params[g]->name + "." +
                                                    params[g]->params[p].name);
        }
        vel[i] = cfg.momentum * vel[i] - cfg.learning_rate * grad[i];
        value[i] += vel[i];
      }
    }
  }
  ++state.step;
  return {ev.breakdown, ev.active_clusters, ev.skipped_samples, std::move(ev.cluster_sizes)};
}

nlohmann::json MetricsRecord::to_json() const {
  return {{"epoch", epoch},
          {"step", step},
          {"l_m", loss.l_m},
          {"l_rim", loss.l_rim},
          {"l_rec", loss.l_rec},
          {"total", loss.total},
          {"active_clusters", active_clusters},
          {"skipped_samples", skipped_samples},
          {"wall_ms", wall_ms}};
}

FitResult fit(const Dataset& train, const ModelConfig& model_config, const TrainConfig& cfg,
              const FitOptions& options) {
  cfg.validate();
  FitResult result;
  if (options.resume_from) {
    if (options.resume_from->model.config.hash() != model_config.hash()) {
      throw CheckpointError("resume state was produced by a different model config");
    }
    result.state = *options.resume_from;
  } else {
    result.state = TrainState::fresh(model_config);
  }
  TrainState& state = result.state;
  while (state.epoch < cfg.epochs) {
    const auto batches = make_batches(train, cfg.batch_size, derive_seed(cfg.seed, state.epoch), cfg.crop_fraction);
    for (const Batch& batch : batches) {
      const auto t0 = std::chrono::steady_clock::now();
      StepResult step = train_step(state, batch, cfg);
      MetricsRecord rec{state.epoch, state.step - 1, step.loss, step.active_clusters, step.skipped_samples, 0.0};
      if (cfg.record_wall_time) {
        rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      }
      if (options.metrics_log) *options.metrics_log << rec.to_json().dump() << '\n' << std::flush;
      result.history.push_back(rec);
    }
    ++state.epoch;
    const bool interval_hit = cfg.checkpoint_interval > 0 && state.epoch % cfg.checkpoint_interval == 0;
    if (options.on_checkpoint && (interval_hit || state.epoch == cfg.epochs)) options.on_checkpoint(state);
  }
  return result;
}

// ---- gradient check ----------------------------------------------------------------

double GradCheckReport::max_rel_error() const {
  double e = 0.0;
  for (const auto& g : groups) e = std::max(e, g.max_rel_error);
  return e;
}

nlohmann::json GradCheckReport::to_json() const {
  nlohmann::json j;
  j["loss"] = to_string(selector);
  j["loss_value"] = loss_value;
  j["passed"] = passed;
  for (const auto& g : groups) {
    j["groups"].push_back({{"group", g.group},
                           {"max_rel_error", g.max_rel_error},
                           {"coords_checked", g.coords_checked},
                           {"worst_param", g.worst_param},
                           {"passed", g.passed}});
  }
  return j;
}

CoordinateCheck finite_difference_check(const std::function<double(std::span<const double>)>& f,
                                        std::span<const double> x, std::span<const double> analytic,
                                        std::span<const std::size_t> coords, double step, double scale_floor) {
  std::vector<double> probe(x.begin(), x.end());
  CoordinateCheck out;
  for (std::size_t i : coords) {
    const double orig = probe[i];
    probe[i] = orig + step;
    const double up = f(probe);
    probe[i] = orig - step;
    const double down = f(probe);
    probe[i] = orig;
    const double numeric = (up - down) / (2.0 * step);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), scale_floor});
    const double rel = std::abs(analytic[i] - numeric) / denom;
    if (rel > out.max_rel_error || !std::isfinite(rel)) {
      out.max_rel_error = std::isfinite(rel) ? rel : INFINITY;
      out.worst_index = i;
    }
  }
  return out;
}

namespace {

LossWeights selector_coefficients(LossSelector s, const LossWeights& w) {
  switch (s) {
    case LossSelector::kRim:
      return {0.0, 1.0, 0.0, w.tau};
    case LossSelector::kRec:
      return {0.0, 0.0, 1.0, w.tau};
    case LossSelector::kMetric:
      return {1.0, 0.0, 0.0, w.tau};
    case LossSelector::kTotal:
      return w;
  }
  return w;
}

std::vector<std::size_t> sample_coords(std::size_t n, std::size_t max_coords, Rng& rng) {
  std::vector<std::size_t> all(n);
  for (std::size_t i = 0; i < n; ++i) all[i] = i;
  if (n <= max_coords) return all;
  shuffle(all, rng);
  all.resize(max_coords);
  std::sort(all.begin(), all.end());
  return all;
}

}  // namespace

GradCheckReport grad_check(LossSelector selector, const ModelBundle& model, const Batch& batch,
                           const LossWeights& weights, const RimConfig& rim, const GradCheckOptions& options) {
  const Tensor images = stack_images(batch.samples);
  const auto positives = twin_indices(images.dim(0));
  const LossWeights coeffs = selector_coefficients(selector, weights);
  BatchEvaluation base = evaluate_batch(model, images, positives, coeffs, rim, true);
  ModelBundle analytic = std::move(*base.gradients);
  if (options.corrupt_analytic) options.corrupt_analytic(analytic);

  GradCheckReport report;
  report.selector = selector;
  report.loss_value = base.breakdown.total;
  Rng rng(derive_seed(options.seed, 0x6c0c));

  ModelBundle probe = model;
  auto probe_groups = probe.groups();
  auto analytic_groups = analytic.groups();
  for (std::size_t g = 0; g < probe_groups.size(); ++g) {
    GroupCheck gc;
    gc.group = probe_groups[g]->name;
    for (std::size_t p = 0; p < probe_groups[g]->params.size(); ++p) {
      Parameter& param = probe_groups[g]->params[p];
      const std::vector<double> original = param.value;
      auto loss_at = [&](std::span<const double> values) {
        std::copy(values.begin(), values.end(), param.value.begin());
        return evaluate_batch(probe, images, positives, coeffs, rim, false, &base.assignments).breakdown.total;
      };
      const auto coords = sample_coords(original.size(), options.max_coords_per_tensor, rng);
      const CoordinateCheck cc = finite_difference_check(loss_at, original, analytic_groups[g]->params[p].value, coords,
                                                         options.step, options.scale_floor);
      param.value = original;
      gc.coords_checked += coords.size();
      if (cc.max_rel_error > gc.max_rel_error || !std::isfinite(cc.max_rel_error)) {
        gc.max_rel_error = cc.max_rel_error;
        gc.worst_param = param.name + "[" + std::to_string(cc.worst_index) + "]";
      }
    }
    gc.passed = gc.max_rel_error <= options.tolerance;
    report.passed = report.passed && gc.passed;
    report.groups.push_back(std::move(gc));
  }
  return report;
}

}  // namespace cbswr
