#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cbswr/tensor.hpp"

namespace cbswr {

/// Architecture hyperparameters. Everything that fixes parameter shapes lives here.
struct ModelConfig {
  std::size_t channels = 1;
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t conv1_channels = 8;
  std::size_t conv2_channels = 16;
  std::size_t rep_dim = 64;    // d_r
  std::size_t embed_dim = 16;  // d_e
  bool embed_bias = true;
  std::size_t num_clusters = 32;  // K
  std::uint64_t init_seed = 0;
  // Multiplier on the fan-in bound of the cluster head. A wide head starts with
  // confident, varied assignments, which keeps early clusters from merging.
  double head_init_scale = 16.0;

  Shape image_shape() const { return {channels, height, width}; }
  /// Spatial extent after the two stride-2 encoder blocks.
  std::size_t bottleneck_height() const { return height / 4; }
  std::size_t bottleneck_width() const { return width / 4; }
  void validate() const;
  /// Canonical `key=value` text of the shape-defining fields (init_seed and head_init_scale excluded).
  std::string canonical() const;
  /// FNV-1a 64 of canonical().
  std::uint64_t hash() const;
};

struct Parameter {
  std::string name;
  Shape shape;
  std::vector<double> value;

  std::size_t size() const { return value.size(); }
};

struct ParamGroup {
  std::string name;
  std::vector<Parameter> params;

  std::size_t size() const;
  Parameter& at(std::string_view param_name);
  const Parameter& at(std::string_view param_name) const;
};

/// The four learnable components. Group order (encoder, embedding, decoder,
/// cluster_head) and parameter order within each group are fixed.
struct ModelBundle {
  ModelConfig config;
  ParamGroup encoder{"encoder", {}};
  ParamGroup embedding{"embedding", {}};
  ParamGroup decoder{"decoder", {}};
  ParamGroup cluster_head{"cluster_head", {}};

  /// Uniform fan-in initialization from config.init_seed.
  static ModelBundle initialize(const ModelConfig& config);

  /// Same shapes, all values zero. Used as a gradient accumulator.
  ModelBundle zeros_like() const;

  std::vector<ParamGroup*> groups() { return {&encoder, &embedding, &decoder, &cluster_head}; }
  std::vector<const ParamGroup*> groups() const { return {&encoder, &embedding, &decoder, &cluster_head}; }

  std::size_t num_parameters() const;
  std::vector<double> flatten() const;
  void assign_flat(const std::vector<double>& flat);

  bool operator==(const ModelBundle& other) const;
};

// ---- per-component forward passes ------------------------------------------

struct EncoderCache {
  Tensor input;  // centered images
  Tensor conv1_pre, conv1_out, conv2_pre, conv2_out, flat;
};
struct EmbeddingCache {
  Tensor input, pre_norm, output;
  std::vector<double> norms;
};
struct DecoderCache {
  Tensor input, fc_pre, fc_out, deconv1_pre, deconv1_out, output;
};
struct ClusterHeadCache {
  Tensor input;
};

/// G: images (n, C, H, W) -> representations (n, d_r).
Tensor encode(const ModelBundle& model, const Tensor& images, EncoderCache* cache = nullptr);
/// Accumulates parameter gradients into `grads.encoder`; returns d images.
Tensor encode_backward(const ModelBundle& model, const EncoderCache& cache, const Tensor& d_reps, ModelBundle& grads);

/// F: representations (n, d_r) -> unit-norm embeddings (n, d_e).
/// Throws DegenerateEmbeddingError for a pre-normalization norm < 1e-12.
Tensor embed(const ModelBundle& model, const Tensor& reps, EmbeddingCache* cache = nullptr);
Tensor embed_backward(const ModelBundle& model, const EmbeddingCache& cache, const Tensor& d_embeddings,
                      ModelBundle& grads);

/// D: representations (n, d_r) -> images (n, C, H, W) with values in [0, 1].
Tensor decode(const ModelBundle& model, const Tensor& reps, DecoderCache* cache = nullptr);
Tensor decode_backward(const ModelBundle& model, const DecoderCache& cache, const Tensor& d_images, ModelBundle& grads);

/// Clustering head: embeddings (n, d_e) -> logits (n, K).
Tensor cluster_logits(const ModelBundle& model, const Tensor& embeddings, ClusterHeadCache* cache = nullptr);
Tensor cluster_logits_backward(const ModelBundle& model, const ClusterHeadCache& cache, const Tensor& d_logits,
                               ModelBundle& grads);

}  // namespace cbswr
