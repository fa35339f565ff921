#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "cbswr/checkpoint.hpp"
#include "cbswr/clustering.hpp"
#include "cbswr/data.hpp"
#include "cbswr/losses.hpp"
#include "cbswr/model.hpp"

namespace cbswr {

/// Which loss terms drive the update: only_rim -> beta term; cbs -> alpha + beta; cbswr -> all three.
enum class AblationMode { kOnlyRim, kCbs, kCbswr };

std::string to_string(AblationMode mode);
AblationMode parse_ablation_mode(const std::string& name);

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 16;  // b originals; m = 2b after augmentation
  double learning_rate = 0.01;
  double momentum = 0.9;
  LossWeights weights;
  RimConfig rim;
  std::uint64_t seed = 0;  // drives batch order and augmentation
  std::size_t checkpoint_interval = 0;  // epochs between checkpoints; 0 = final only
  AblationMode mode = AblationMode::kCbswr;
  double crop_fraction = 0.8;
  bool record_wall_time = false;  // false keeps metrics logs bit-reproducible (wall_ms = 0)

  std::size_t batch_m() const { return 2 * batch_size; }
  /// Mode-projected loss weights (inactive terms zeroed).
  LossWeights effective_weights() const;
  void validate() const;
};

struct TrainState {
  ModelBundle model;
  ModelBundle momentum;  // same shapes as model
  std::uint64_t epoch = 0;
  std::uint64_t step = 0;

  static TrainState fresh(const ModelConfig& config);
  Checkpoint to_checkpoint(std::string run_config = {}) const;
  static TrainState from_checkpoint(const Checkpoint& ckpt);

  bool operator==(const TrainState&) const = default;
};

/// Full forward pass of one batch through G, F, the head, centroids, D and the three losses.
struct BatchEvaluation {
  LossBreakdown breakdown;  // total uses the coefficients passed in
  std::optional<ModelBundle> gradients;
  std::vector<std::size_t> assignments;
  std::vector<std::size_t> cluster_sizes;  // members per cluster, length K
  std::size_t active_clusters = 0;
  std::size_t skipped_samples = 0;
};

/// `coefficients` weight the terms of the total (and of its gradient); tau is read from it.
/// With `fixed_assignments` the argmax step is replaced by the given pseudo labels.
BatchEvaluation evaluate_batch(const ModelBundle& model, const Tensor& images, std::span<const std::size_t> positive_of,
                               const LossWeights& coefficients, const RimConfig& rim, bool with_gradient,
                               const std::vector<std::size_t>* fixed_assignments = nullptr);

struct StepResult {
  LossBreakdown loss;  // before the update
  std::size_t active_clusters = 0;
  std::size_t skipped_samples = 0;
  std::vector<std::size_t> cluster_sizes;
};

/// Forward, backward and one SGD-momentum update of every parameter group:
/// v <- momentum*v - lr*g; p <- p + v.
/// Throws NumericalError (naming the component) on a non-finite loss or gradient.
StepResult train_step(TrainState& state, const Batch& batch, const TrainConfig& cfg);

struct MetricsRecord {
  std::uint64_t epoch = 0;
  std::uint64_t step = 0;
  LossBreakdown loss;
  std::size_t active_clusters = 0;
  std::size_t skipped_samples = 0;
  double wall_ms = 0.0;

  nlohmann::json to_json() const;
  bool operator==(const MetricsRecord&) const = default;
};

struct FitOptions {
  std::optional<TrainState> resume_from;
  std::ostream* metrics_log = nullptr;  // JSON lines, one per step
  /// Called after every checkpoint_interval-th epoch and after the final epoch.
  std::function<void(const TrainState&)> on_checkpoint;
};

struct FitResult {
  TrainState state;
  std::vector<MetricsRecord> history;
};

/// Runs epochs [state.epoch, cfg.epochs). Epoch e draws its batches from
/// derive_seed(cfg.seed, e), so a resumed run replays the same batches.
FitResult fit(const Dataset& train, const ModelConfig& model_config, const TrainConfig& cfg,
              const FitOptions& options = {});

// ---- finite-difference gradient oracle ------------------------------------------

enum class LossSelector { kRim, kRec, kMetric, kTotal };
std::string to_string(LossSelector s);

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  /// Denominator floor of the relative error |a - n| / max(|a|, |n|, floor).
  double scale_floor = 1e-4;
  /// Coordinates probed per parameter tensor; tensors at or below this size are checked fully.
  std::size_t max_coords_per_tensor = 24;
  std::uint64_t seed = 0;
  /// Test hook: mutate the analytic gradient before comparison.
  std::function<void(ModelBundle&)> corrupt_analytic;
};

struct GroupCheck {
  std::string group;
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
  std::string worst_param;
  bool passed = true;
};

struct GradCheckReport {
  LossSelector selector = LossSelector::kTotal;
  double loss_value = 0.0;
  std::vector<GroupCheck> groups;
  bool passed = true;
  double max_rel_error() const;
  nlohmann::json to_json() const;
};

/// Central differences vs analytic gradients for one loss on one batch. Pseudo labels are
/// frozen at their unperturbed values.
GradCheckReport grad_check(LossSelector selector, const ModelBundle& model, const Batch& batch,
                           const LossWeights& weights, const RimConfig& rim, const GradCheckOptions& options = {});

struct CoordinateCheck {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
};

/// Generic check of `analytic` against central differences of `f` at `x` over `coords`.
CoordinateCheck finite_difference_check(const std::function<double(std::span<const double>)>& f,
                                        std::span<const double> x, std::span<const double> analytic,
                                        std::span<const std::size_t> coords, double step, double scale_floor);

}  // namespace cbswr
