#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "cbswr/tensor.hpp"

namespace cbswr {

/// RIM clustering objective settings.
struct RimConfig {
  std::size_t num_clusters = 32;  // K
  double lambda = 1.0;
  double weight_decay = 1e-3;  // R(theta) = weight_decay * ||W||^2 over head weights only

  /// Requires 1 <= K <= batch_size, lambda > 0, weight_decay >= 0.
  void validate(std::size_t batch_size) const;
};

/// h(p) = -sum p log p, with 0 log 0 = 0.
double entropy(std::span<const double> p);

/// H(Y) = h(mean_i y_i). `probs` is (m, K), one distribution per row.
double marginal_entropy(const Tensor& probs);

/// H(Y|X) = mean_i h(y_i).
double conditional_entropy(const Tensor& probs);

/// L_rim = weight_decay * ||W||^2 - lambda * (H(Y) - H(Y|X)).
double rim_loss(const Tensor& probs, std::span<const double> head_weight, const RimConfig& cfg);

struct RimTerms {
  double value = 0.0;
  double marginal = 0.0;
  double conditional = 0.0;
  double regularizer = 0.0;
  Tensor d_logits;                   // (m, K)
  std::vector<double> d_head_weight;  // same size as head_weight
};

/// L_rim evaluated from logits (softmax applied internally, in log space), with gradients.
RimTerms rim_loss_from_logits(const Tensor& logits, std::span<const double> head_weight, const RimConfig& cfg);

/// Per-row argmax; ties resolve to the lowest index.
std::vector<std::size_t> assign(const Tensor& probs);

struct CentroidRepresentation {
  std::size_t cluster_index = 0;
  std::size_t member_count = 0;
  std::vector<std::size_t> members;  // batch rows, ascending
  std::vector<double> values;         // mean of member representations
};

/// One centroid per non-empty cluster, ordered by cluster index.
std::vector<CentroidRepresentation> compute_centroids(const Tensor& reps, std::span<const std::size_t> assignments,
                                                      std::size_t num_clusters);

/// Centroid values stacked into an (A, d_r) matrix, A = number of centroids.
Tensor centroid_matrix(const std::vector<CentroidRepresentation>& centroids);

/// Scatters centroid gradients (A, d_r) back to the member rows of an (m, d_r) gradient,
/// accumulating into `d_reps`.
void centroid_backward(const std::vector<CentroidRepresentation>& centroids, const Tensor& d_centroids, Tensor& d_reps);

}  // namespace cbswr
