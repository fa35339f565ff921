#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "json.hpp"

#include "cbswr/data.hpp"
#include "cbswr/model.hpp"
#include "cbswr/tensor.hpp"

namespace cbswr {

struct EmbeddingIndex {
  Tensor embeddings;  // (n, d_e), unit-norm rows
  std::vector<std::int64_t> labels;
  std::vector<std::uint64_t> ids;

  std::size_t size() const { return labels.size(); }
};

/// Embeds every sample after a deterministic center crop of `crop_fraction`.
EmbeddingIndex extract_embeddings(const ModelBundle& model, const Dataset& test, double crop_fraction);

/// Clustering-head argmax for every row of the index.
std::vector<std::size_t> predict_clusters(const ModelBundle& model, const EmbeddingIndex& index);

/// Fraction of queries whose k nearest neighbours (Euclidean, self excluded, distance
/// ties to the lower row) contain a same-label item. Throws UsageError unless 1 <= k < n.
double recall_at_k(const EmbeddingIndex& index, std::size_t k);

/// Recall for several k at once, sharing the neighbour search.
std::map<std::size_t, double> recall_at_ks(const EmbeddingIndex& index, const std::vector<std::size_t>& ks);

/// I(P;T) / sqrt(H(P) H(T)). Identical single-block partitions score 1; a single block
/// against a non-trivial partition scores 0.
double nmi(const std::vector<std::int64_t>& predicted, const std::vector<std::int64_t>& truth);

struct EvalReport {
  std::map<std::size_t, double> recall_at;
  double nmi = 0.0;
  std::size_t num_queries = 0;

  nlohmann::json to_json() const;
  bool operator==(const EvalReport&) const = default;
};

inline const std::vector<std::size_t> kDefaultRecallKs{1, 2, 4, 8};

/// Assembles recall and NMI; NMI uses the clustering head's argmax on the test embeddings.
EvalReport evaluate(const ModelBundle& model, const Dataset& test, double crop_fraction,
                    const std::vector<std::size_t>& ks = kDefaultRecallKs);

/// Same, from a precomputed index and predicted clusters.
EvalReport evaluate(const EmbeddingIndex& index, const std::vector<std::size_t>& predicted,
                    const std::vector<std::size_t>& ks = kDefaultRecallKs);

ArrayContainer to_container(const EmbeddingIndex& index, nlohmann::json meta = nlohmann::json::object());

}  // namespace cbswr
