#pragma once

#include <optional>
#include <span>
#include <vector>

#include "cbswr/clustering.hpp"
#include "cbswr/model.hpp"
#include "cbswr/tensor.hpp"

namespace cbswr {

struct LossWeights {
  double alpha = 0.9;   // metric loss
  double beta = 0.3;    // clustering loss
  double gamma = 0.01;  // reconstruction loss
  double tau = 0.1;     // softmax temperature

  /// All four strictly positive.
  void validate() const;
};

struct LossBreakdown {
  double l_m = 0.0;
  double l_rim = 0.0;
  double l_rec = 0.0;
  double total = 0.0;

  bool operator==(const LossBreakdown&) const = default;
};

/// total = alpha*l_m + beta*l_rim + gamma*l_rec (tau unused). Weights may be zero here;
/// a non-finite component throws NumericalError naming it.
LossBreakdown combined_loss(double l_m, double l_rim, double l_rec, const LossWeights& weights);

// ---- reconstruction --------------------------------------------------------

/// (1/m) * sum_i ||I_i - D(r_{q_i})||^2, squared error summed over pixels.
/// `decoded` holds D(r_j) for each centroid, same order as `centroids`.
/// When `d_decoded` is given it receives the gradient w.r.t. `decoded`.
double reconstruction_loss(const Tensor& images, std::span<const std::size_t> assignments,
                           const std::vector<CentroidRepresentation>& centroids, const Tensor& decoded,
                           Tensor* d_decoded = nullptr);

/// Convenience form that runs the decoder on the centroids itself.
double reconstruction_loss(const Tensor& images, std::span<const std::size_t> assignments,
                           const std::vector<CentroidRepresentation>& centroids, const ModelBundle& model);

// ---- center-based softmax metric loss ---------------------------------------

/// exp(f.f_hat/tau) / sum_{k != q} exp(f.c_k/tau). `centroids` is (A, d_e) and `q`
/// a row of it. Throws DegenerateDenominatorError when A < 2.
double positive_term(std::span<const double> f, std::span<const double> f_hat, const Tensor& centroids, std::size_t q,
                     double tau);

/// 1 - exp(f.c_j/tau) / sum_k exp(f.c_k/tau); the sum runs over all A rows.
/// Throws UsageError when j == q.
double negative_term(std::span<const double> f, const Tensor& centroids, std::size_t j, std::size_t q, double tau);

struct MetricLossResult {
  double value = 0.0;
  std::size_t anchors = 0;  // samples that contributed
  std::size_t skipped = 0;  // samples dropped for an empty positive-term denominator
  std::vector<std::optional<double>> per_sample;  // -log l(i); nullopt when skipped
  Tensor d_embeddings;  // (m, d_e), only with gradients requested
  Tensor d_centroids;   // (A, d_e)
};

/// L_m = -sum_i log l(I_i, I^_i) - sum_i sum_{j != q_i} log l(I_i, c_j).
/// `embeddings` (m, d_e); `positive_of[i]` is the row of sample i's augmented twin;
/// `centroids` (A, d_e) are the active centroid embeddings in cluster order, with
/// `centroid_cluster[a]` their cluster ids; `assignments[i]` is the cluster id q_i.
/// Every sample acts as an anchor once.
MetricLossResult metric_loss(const Tensor& embeddings, std::span<const std::size_t> positive_of,
                             const Tensor& centroids, std::span<const std::size_t> centroid_cluster,
                             std::span<const std::size_t> assignments, double tau, bool with_gradient = false);

}  // namespace cbswr
