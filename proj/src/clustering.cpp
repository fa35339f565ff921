#include "cbswr/clustering.hpp"

#include <cmath>

#include "cbswr/errors.hpp"
#include "cbswr/layers.hpp"

namespace cbswr {

namespace {

void check_distributions(const Tensor& probs, const char* op) {
  if (probs.rank() != 2 || probs.dim(0) == 0) throw EmptyBatchError(std::string(op) + ": empty batch");
  for (std::size_t i = 0; i < probs.dim(0); ++i) {
    double s = 0.0;
    for (double v : probs.row(i)) {
      if (!(v >= 0.0)) throw UsageError(std::string(op) + ": negative or non-finite probability");
      s += v;
    }
    if (std::abs(s - 1.0) > 1e-6) throw UsageError(std::string(op) + ": row does not sum to 1");
  }
}

double xlogx(double p) { return p > 0.0 ? p * std::log(p) : 0.0; }

}  // namespace

void RimConfig::validate(std::size_t batch_size) const {
  if (num_clusters < 1 || num_clusters > batch_size) {
    throw ConfigError("rim: number of clusters K=" + std::to_string(num_clusters) + " must lie in [1, m=" +
                      std::to_string(batch_size) + "]");
  }
  if (!(lambda > 0.0)) throw ConfigError("rim: lambda must be > 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("rim: weight_decay must be >= 0");
}

double entropy(std::span<const double> p) {
  double h = 0.0;
  for (double v : p) h -= xlogx(v);
  return h;
}

double marginal_entropy(const Tensor& probs) {
  check_distributions(probs, "marginal_entropy");
  const std::size_t m = probs.dim(0);
  std::vector<double> mean(probs.dim(1), 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const auto r = probs.row(i);
    for (std::size_t k = 0; k < mean.size(); ++k) mean[k] += r[k];
  }
  for (double& v : mean) v /= static_cast<double>(m);
  return entropy(mean);
}

double conditional_entropy(const Tensor& probs) {
  check_distributions(probs, "conditional_entropy");
  double h = 0.0;
  for (std::size_t i = 0; i < probs.dim(0); ++i) h += entropy(probs.row(i));
  return h / static_cast<double>(probs.dim(0));
}

double rim_loss(const Tensor& probs, std::span<const double> head_weight, const RimConfig& cfg) {
  const double reg = cfg.weight_decay * squared_norm(head_weight);
  return reg - cfg.lambda * (marginal_entropy(probs) - conditional_entropy(probs));
}

RimTerms rim_loss_from_logits(const Tensor& logits, std::span<const double> head_weight, const RimConfig& cfg) {
  if (logits.rank() != 2 || logits.dim(0) == 0) throw EmptyBatchError("rim_loss: empty batch");
  const std::size_t m = logits.dim(0);
  const std::size_t K = logits.dim(1);
  const double inv_m = 1.0 / static_cast<double>(m);
  const Tensor log_p = layers::log_softmax_rows(logits);
  Tensor p = log_p;
  for (double& v : p.data) v = std::exp(v);

  std::vector<double> mean(K, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t k = 0; k < K; ++k) mean[k] += p.data[i * K + k];
  for (double& v : mean) v *= inv_m;

  RimTerms out;
  out.marginal = entropy(mean);
  double cond = 0.0;
  for (std::size_t i = 0; i < m * K; ++i) cond -= p.data[i] * log_p.data[i];
  out.conditional = cond * inv_m;
  out.regularizer = cfg.weight_decay * squared_norm(head_weight);
  out.value = out.regularizer - cfg.lambda * (out.marginal - out.conditional);

  // dL/dy_ik = (lambda/m) (log ybar_k - log y_ik), then through softmax.
  std::vector<double> log_mean(K);
  for (std::size_t k = 0; k < K; ++k) log_mean[k] = mean[k] > 0.0 ? std::log(mean[k]) : 0.0;
  out.d_logits = Tensor({m, K});
  std::vector<double> g(K);
  for (std::size_t i = 0; i < m; ++i) {
    double inner = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      g[k] = cfg.lambda * inv_m * (log_mean[k] - log_p.data[i * K + k]);
      inner += p.data[i * K + k] * g[k];
    }
    for (std::size_t k = 0; k < K; ++k) out.d_logits.data[i * K + k] = p.data[i * K + k] * (g[k] - inner);
  }
  out.d_head_weight.resize(head_weight.size());
  for (std::size_t i = 0; i < head_weight.size(); ++i) out.d_head_weight[i] = 2.0 * cfg.weight_decay * head_weight[i];
  return out;
}

std::vector<std::size_t> assign(const Tensor& probs) {
  std::vector<std::size_t> q(probs.rank() == 2 ? probs.dim(0) : 0);
  for (std::size_t i = 0; i < q.size(); ++i) {
    const auto r = probs.row(i);
    std::size_t best = 0;
    for (std::size_t k = 1; k < r.size(); ++k)
      if (r[k] > r[best]) best = k;
    q[i] = best;
  }
  return q;
}

std::vector<CentroidRepresentation> compute_centroids(const Tensor& reps, std::span<const std::size_t> assignments,
                                                      std::size_t num_clusters) {
  if (reps.rank() != 2 || reps.dim(0) != assignments.size()) {
    throw UsageError("compute_centroids: representations and assignments are not aligned");
  }
  if (assignments.empty()) throw EmptyBatchError("compute_centroids: empty batch");
  const std::size_t d = reps.dim(1);
  std::vector<std::vector<std::size_t>> members(num_clusters);
  for (std::size_t i = 0; i < assignments.size(); ++i) {
    if (assignments[i] >= num_clusters) throw UsageError("compute_centroids: cluster index out of range");
    members[assignments[i]].push_back(i);
  }
  std::vector<CentroidRepresentation> out;
  for (std::size_t j = 0; j < num_clusters; ++j) {
    if (members[j].empty()) continue;
    CentroidRepresentation c{j, members[j].size(), std::move(members[j]), std::vector<double>(d, 0.0)};
    for (std::size_t i : c.members) {
      const auto r = reps.row(i);
      for (std::size_t k = 0; k < d; ++k) c.values[k] += r[k];
    }
    const double inv = 1.0 / static_cast<double>(c.member_count);
    for (double& v : c.values) v *= inv;
    out.push_back(std::move(c));
  }
  return out;
}

Tensor centroid_matrix(const std::vector<CentroidRepresentation>& centroids) {
  std::vector<std::span<const double>> rows;
  rows.reserve(centroids.size());
  for (const auto& c : centroids) rows.emplace_back(c.values);
  return stack_rows(rows, {centroids.empty() ? 0 : centroids.front().values.size()});
}

void centroid_backward(const std::vector<CentroidRepresentation>& centroids, const Tensor& d_centroids, Tensor& d_reps) {
  for (std::size_t a = 0; a < centroids.size(); ++a) {
    const auto g = d_centroids.row(a);
    const double inv = 1.0 / static_cast<double>(centroids[a].member_count);
    for (std::size_t i : centroids[a].members) {
      auto dr = d_reps.row(i);
      for (std::size_t k = 0; k < g.size(); ++k) dr[k] += g[k] * inv;
    }
  }
}

}  // namespace cbswr
