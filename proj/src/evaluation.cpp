#include "cbswr/evaluation.hpp"

#include <algorithm>
#include <cmath>

#include "cbswr/errors.hpp"
#include "cbswr/clustering.hpp"
#include "cbswr/layers.hpp"

namespace cbswr {

namespace {

constexpr std::size_t kChunk = 64;

struct Neighbour {
  double dist;
  std::size_t row;
  bool operator<(const Neighbour& o) const { return dist < o.dist || (dist == o.dist && row < o.row); }
};

double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

}  // namespace

EmbeddingIndex extract_embeddings(const ModelBundle& model, const Dataset& test, double crop_fraction) {
  EmbeddingIndex index;
  std::vector<double> rows;
  for (std::size_t start = 0; start < test.size(); start += kChunk) {
    std::vector<ImageSample> chunk;
    for (std::size_t i = start; i < std::min(test.size(), start + kChunk); ++i) {
      chunk.push_back(center_crop(test.samples[i], crop_fraction));
      index.labels.push_back(test.samples[i].label);
      index.ids.push_back(test.samples[i].sample_id);
    }
    const Tensor f = embed(model, encode(model, stack_images(chunk)));
    rows.insert(rows.end(), f.data.begin(), f.data.end());
  }
  index.embeddings = Tensor({test.size(), model.config.embed_dim}, std::move(rows));
  return index;
}

std::vector<std::size_t> predict_clusters(const ModelBundle& model, const EmbeddingIndex& index) {
  if (index.size() == 0) return {};
  return assign(layers::softmax_rows(cluster_logits(model, index.embeddings)));
}

std::map<std::size_t, double> recall_at_ks(const EmbeddingIndex& index, const std::vector<std::size_t>& ks) {
  const std::size_t n = index.size();
  std::size_t k_max = 0;
  for (std::size_t k : ks) {
    if (k < 1 || k >= n) {
      throw UsageError("recall_at_k: k=" + std::to_string(k) + " must lie in [1, " + std::to_string(n) + ")");
    }
    k_max = std::max(k_max, k);
  }
  std::map<std::size_t, std::size_t> hits;
  for (std::size_t k : ks) hits[k] = 0;
  std::vector<Neighbour> cand;
  cand.reserve(n);
  for (std::size_t q = 0; q < n; ++q) {
    cand.clear();
    const auto fq = index.embeddings.row(q);
    for (std::size_t r = 0; r < n; ++r)
      if (r != q) cand.push_back({squared_distance(fq, index.embeddings.row(r)), r});
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k_max), cand.end());
    // first_hit = rank (1-based) of the nearest same-label neighbour within k_max
    std::size_t first_hit = 0;
    for (std::size_t i = 0; i < k_max; ++i)
      if (index.labels[cand[i].row] == index.labels[q]) {
        first_hit = i + 1;
        break;
      }
    if (first_hit == 0) continue;
    for (auto& [k, h] : hits)
      if (first_hit <= k) ++h;
  }
  std::map<std::size_t, double> out;
  for (const auto& [k, h] : hits) out[k] = static_cast<double>(h) / static_cast<double>(n);
  return out;
}

double recall_at_k(const EmbeddingIndex& index, std::size_t k) { return recall_at_ks(index, {k}).at(k); }

double nmi(const std::vector<std::int64_t>& predicted, const std::vector<std::int64_t>& truth) {
  if (predicted.size() != truth.size()) throw UsageError("nmi: partitions are not aligned");
  if (predicted.empty()) throw EmptyBatchError("nmi: empty partitions");
  const double n = static_cast<double>(predicted.size());
  std::map<std::int64_t, double> pc, tc;
  std::map<std::pair<std::int64_t, std::int64_t>, double> joint;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    pc[predicted[i]] += 1.0;
    tc[truth[i]] += 1.0;
    joint[{predicted[i], truth[i]}] += 1.0;
  }
  if (pc.size() == 1 && tc.size() == 1) return 1.0;
  if (pc.size() == 1 || tc.size() == 1) return 0.0;
  auto h = [n](const std::map<std::int64_t, double>& counts) {
    double s = 0.0;
    for (const auto& [_, c] : counts) s -= (c / n) * std::log(c / n);
    return s;
  };
  double mi = 0.0;
  for (const auto& [key, c] : joint) {
    const double pij = c / n;
    mi += pij * std::log(pij / ((pc[key.first] / n) * (tc[key.second] / n)));
  }
  return std::clamp(mi / std::sqrt(h(pc) * h(tc)), 0.0, 1.0);
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j;
  for (const auto& [k, v] : recall_at) j["recall_at"][std::to_string(k)] = v;
  j["nmi"] = nmi;
  j["num_queries"] = num_queries;
  return j;
}

EvalReport evaluate(const EmbeddingIndex& index, const std::vector<std::size_t>& predicted,
                    const std::vector<std::size_t>& ks) {
  EvalReport r;
  r.recall_at = recall_at_ks(index, ks);
  std::vector<std::int64_t> pred(predicted.begin(), predicted.end());
  r.nmi = nmi(pred, index.labels);
  r.num_queries = index.size();
  return r;
}

EvalReport evaluate(const ModelBundle& model, const Dataset& test, double crop_fraction,
                    const std::vector<std::size_t>& ks) {
  const EmbeddingIndex index = extract_embeddings(model, test, crop_fraction);
  return evaluate(index, predict_clusters(model, index), ks);
}

ArrayContainer to_container(const EmbeddingIndex& index, nlohmann::json meta) {
  ArrayContainer c;
  c.kind = "embeddings";
  c.array = index.embeddings;
  c.labels = index.labels;
  c.ids = index.ids;
  c.augmented.assign(index.size(), false);
  c.meta = std::move(meta);
  return c;
}

}  // namespace cbswr
