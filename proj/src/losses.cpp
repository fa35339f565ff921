#include "cbswr/losses.hpp"

#include <algorithm>
#include <cmath>

#include "cbswr/errors.hpp"

namespace cbswr {

void LossWeights::validate() const {
  if (!(alpha > 0.0)) throw ConfigError("loss.alpha must be > 0");
  if (!(beta > 0.0)) throw ConfigError("loss.beta must be > 0");
  if (!(gamma > 0.0)) throw ConfigError("loss.gamma must be > 0");
  if (!(tau > 0.0)) throw ConfigError("loss.tau must be > 0");
}

LossBreakdown combined_loss(double l_m, double l_rim, double l_rec, const LossWeights& w) {
  if (!std::isfinite(l_m)) throw NumericalError("l_m", "metric loss is not finite");
  if (!std::isfinite(l_rim)) throw NumericalError("l_rim", "clustering loss is not finite");
  if (!std::isfinite(l_rec)) throw NumericalError("l_rec", "reconstruction loss is not finite");
  const double total = w.alpha * l_m + w.beta * l_rim + w.gamma * l_rec;
  if (!std::isfinite(total)) throw NumericalError("total", "combined loss is not finite");
  return {l_m, l_rim, l_rec, total};
}

namespace {

// cluster id -> centroid row; npos when the cluster has no centroid.
constexpr std::size_t kNoCentroid = static_cast<std::size_t>(-1);

std::vector<std::size_t> centroid_lookup(std::span<const std::size_t> centroid_cluster,
                                         std::span<const std::size_t> assignments) {
  std::size_t max_id = 0;
  for (auto c : centroid_cluster) max_id = std::max(max_id, c);
  for (auto q : assignments) max_id = std::max(max_id, q);
  std::vector<std::size_t> row(max_id + 1, kNoCentroid);
  for (std::size_t a = 0; a < centroid_cluster.size(); ++a) row[centroid_cluster[a]] = a;
  return row;
}

}  // namespace

double reconstruction_loss(const Tensor& images, std::span<const std::size_t> assignments,
                           const std::vector<CentroidRepresentation>& centroids, const Tensor& decoded,
                           Tensor* d_decoded) {
  const std::size_t m = images.dim(0);
  if (m == 0) throw EmptyBatchError("reconstruction_loss: empty batch");
  if (assignments.size() != m) throw UsageError("reconstruction_loss: assignments not aligned with batch");
  if (decoded.dim(0) != centroids.size() || decoded.stride0() != images.stride0()) {
    throw ConsistencyError("reconstruction_loss: decoded centroids do not match image shape");
  }
  std::vector<std::size_t> ids;
  for (const auto& c : centroids) ids.push_back(c.cluster_index);
  const auto lookup = centroid_lookup(ids, assignments);
  if (d_decoded) *d_decoded = Tensor(decoded.shape);

  const double inv_m = 1.0 / static_cast<double>(m);
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t a = lookup[assignments[i]];
    if (a == kNoCentroid) {
      throw ConsistencyError("reconstruction_loss: sample " + std::to_string(i) + " assigned to cluster " +
                             std::to_string(assignments[i]) + " which has no centroid");
    }
    const auto img = images.row(i);
    const auto rec = decoded.row(a);
    double s = 0.0;
    for (std::size_t p = 0; p < img.size(); ++p) {
      const double diff = img[p] - rec[p];
      s += diff * diff;
    }
    total += s;
    if (d_decoded) {
      auto g = d_decoded->row(a);
      for (std::size_t p = 0; p < img.size(); ++p) g[p] += 2.0 * inv_m * (rec[p] - img[p]);
    }
  }
  return total * inv_m;
}

double reconstruction_loss(const Tensor& images, std::span<const std::size_t> assignments,
                           const std::vector<CentroidRepresentation>& centroids, const ModelBundle& model) {
  const Tensor decoded = decode(model, centroid_matrix(centroids));
  return reconstruction_loss(images, assignments, centroids, decoded);
}

double positive_term(std::span<const double> f, std::span<const double> f_hat, const Tensor& centroids, std::size_t q,
                     double tau) {
  const std::size_t A = centroids.dim(0);
  if (A < 2) throw DegenerateDenominatorError("positive_term: needs at least two active centroids");
  if (q >= A) throw UsageError("positive_term: q out of range");
  double denom = 0.0;
  for (std::size_t k = 0; k < A; ++k)
    if (k != q) denom += std::exp(dot(f, centroids.row(k)) / tau);
  return std::exp(dot(f, f_hat) / tau) / denom;
}

double negative_term(std::span<const double> f, const Tensor& centroids, std::size_t j, std::size_t q, double tau) {
  const std::size_t A = centroids.dim(0);
  if (j == q) throw UsageError("negative_term: j must differ from the sample's own cluster q");
  if (j >= A || q >= A) throw UsageError("negative_term: centroid index out of range");
  double denom = 0.0;
  for (std::size_t k = 0; k < A; ++k) denom += std::exp(dot(f, centroids.row(k)) / tau);
  return 1.0 - std::exp(dot(f, centroids.row(j)) / tau) / denom;
}

MetricLossResult metric_loss(const Tensor& embeddings, std::span<const std::size_t> positive_of,
                             const Tensor& centroids, std::span<const std::size_t> centroid_cluster,
                             std::span<const std::size_t> assignments, double tau, bool with_gradient) {
  const std::size_t m = embeddings.dim(0);
  const std::size_t A = centroids.rank() == 2 ? centroids.dim(0) : 0;
  if (positive_of.size() != m || assignments.size() != m) throw UsageError("metric_loss: inputs not aligned");
  if (centroid_cluster.size() != A) throw UsageError("metric_loss: centroid ids not aligned");
  const auto lookup = centroid_lookup(centroid_cluster, assignments);

  MetricLossResult out;
  out.per_sample.assign(m, std::nullopt);
  if (with_gradient) {
    out.d_embeddings = Tensor(embeddings.shape);
    out.d_centroids = Tensor(A == 0 ? Shape{0, embeddings.dim(1)} : centroids.shape);
  }
  if (A < 2) {
    out.skipped = m;
    return out;
  }

  const double inv_tau = 1.0 / tau;
  std::vector<double> a(A), p(A), log_one_minus_p(A), da(A);
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t q = lookup[assignments[i]];
    if (q == kNoCentroid) throw ConsistencyError("metric_loss: sample assigned to a cluster without centroid");
    const auto f = embeddings.row(i);
    const auto f_hat = embeddings.row(positive_of[i]);

    double a_max = -INFINITY, a_max_excl = -INFINITY;
    for (std::size_t k = 0; k < A; ++k) {
      a[k] = dot(f, centroids.row(k)) * inv_tau;
      a_max = std::max(a_max, a[k]);
      if (k != q) a_max_excl = std::max(a_max_excl, a[k]);
    }
    double s_all = 0.0, s_excl = 0.0;
    for (std::size_t k = 0; k < A; ++k) {
      s_all += std::exp(a[k] - a_max);
      if (k != q) s_excl += std::exp(a[k] - a_max_excl);
    }
    const double a_pos = dot(f, f_hat) * inv_tau;
    const double lse_excl = a_max_excl + std::log(s_excl);
    double loss = lse_excl - a_pos;

    const double lse_all = a_max + std::log(s_all);
    for (std::size_t k = 0; k < A; ++k) p[k] = std::exp(a[k] - lse_all);
    // log(1 - p_j) without cancellation. At most one p_j can exceed 1/2; for it the
    // complement is taken as a log-sum-exp over the other logits.
    std::size_t big = kNoCentroid;
    for (std::size_t k = 0; k < A; ++k) {
      if (p[k] <= 0.5) {
        log_one_minus_p[k] = std::log1p(-p[k]);
        continue;
      }
      big = k;
      double b_max = -INFINITY;
      for (std::size_t l = 0; l < A; ++l)
        if (l != k) b_max = std::max(b_max, a[l]);
      double b_sum = 0.0;
      for (std::size_t l = 0; l < A; ++l)
        if (l != k) b_sum += std::exp(a[l] - b_max);
      log_one_minus_p[k] = b_max + std::log(b_sum) - lse_all;
    }
    double small_inv_sum = 0.0;  // sum over negatives j with p_j <= 1/2 of 1 / (1 - p_j)
    for (std::size_t j = 0; j < A; ++j) {
      if (j == q) continue;
      loss -= log_one_minus_p[j];
      if (j != big) small_inv_sum += 1.0 / (1.0 - p[j]);
    }
    out.value += loss;
    out.per_sample[i] = loss;
    ++out.anchors;

    if (!with_gradient) continue;
    const double negatives = static_cast<double>(A - 1);
    for (std::size_t k = 0; k < A; ++k) {
      const double u = (k == q) ? 0.0 : std::exp(a[k] - a_max_excl) / s_excl;
      // p_k * sum_{j != q, j != k} 1 / (1 - p_j), with the large-p_j ratio kept in log space.
      double excl = small_inv_sum;
      if (k != q && k != big) excl -= 1.0 / (1.0 - p[k]);
      double p_excl = p[k] * excl;
      if (big != kNoCentroid && big != q && big != k) p_excl += std::exp(a[k] - lse_all - log_one_minus_p[big]);
      da[k] = u + negatives * p[k] - p_excl;
    }
    auto df = out.d_embeddings.row(i);
    for (std::size_t k = 0; k < A; ++k) {
      const double ds = da[k] * inv_tau;
      const auto c = centroids.row(k);
      auto dc = out.d_centroids.row(k);
      for (std::size_t d = 0; d < f.size(); ++d) {
        df[d] += ds * c[d];
        dc[d] += ds * f[d];
      }
    }
    auto df_hat = out.d_embeddings.row(positive_of[i]);
    for (std::size_t d = 0; d < f.size(); ++d) {
      df[d] -= inv_tau * f_hat[d];
      df_hat[d] -= inv_tau * f[d];
    }
  }
  return out;
}

}  // namespace cbswr
