#include "cbswr/model.hpp"

#include <cmath>
#include <sstream>

#include "cbswr/errors.hpp"
#include "cbswr/layers.hpp"
#include "cbswr/rng.hpp"

namespace cbswr {

namespace {

constexpr layers::ConvGeometry kDownsample{3, 2, 1};
constexpr layers::ConvGeometry kUpsample{4, 2, 1};

// Indices into each ParamGroup::params, in declaration order.
enum EncoderParam { kConv1W, kConv1B, kConv2W, kConv2B, kEncFcW, kEncFcB };
enum EmbeddingParam { kEmbW, kEmbB };
enum DecoderParam { kDecFcW, kDecFcB, kDeconv1W, kDeconv1B, kDeconv2W, kDeconv2B };
enum HeadParam { kHeadW, kHeadB };

Parameter make_param(std::string name, Shape shape, double bound, Rng& rng) {
  Parameter p{std::move(name), shape, std::vector<double>(shape_size(shape))};
  for (double& v : p.value) v = rng.uniform(-bound, bound);
  return p;
}

Parameter make_zero(std::string name, Shape shape) {
  return Parameter{std::move(name), shape, std::vector<double>(shape_size(shape), 0.0)};
}

std::span<const double> values(const ParamGroup& g, std::size_t i) { return g.params[i].value; }
std::span<double> values(ParamGroup& g, std::size_t i) { return g.params[i].value; }

Tensor reshape(Tensor t, Shape shape) {
  if (shape_size(shape) != t.size()) throw ConsistencyError("reshape to " + shape_string(shape));
  t.shape = std::move(shape);
  return t;
}

}  // namespace

void ModelConfig::validate() const {
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  require(channels >= 1, "model: channels must be >= 1");
  require(height >= 4 && height % 4 == 0, "model: image height must be a positive multiple of 4");
  require(width >= 4 && width % 4 == 0, "model: image width must be a positive multiple of 4");
  require(conv1_channels >= 1 && conv2_channels >= 1, "model: conv channel counts must be >= 1");
  require(rep_dim >= 1, "model: rep_dim must be >= 1");
  require(embed_dim >= 2, "model: embed_dim must be >= 2");
  require(num_clusters >= 1, "model: num_clusters must be >= 1");
  require(std::isfinite(head_init_scale) && head_init_scale > 0.0, "model: head_init_scale must be positive");
}

std::string ModelConfig::canonical() const {
  std::ostringstream os;
  os << "channels=" << channels << ";height=" << height << ";width=" << width << ";conv1_channels=" << conv1_channels
     << ";conv2_channels=" << conv2_channels << ";rep_dim=" << rep_dim << ";embed_dim=" << embed_dim
     << ";embed_bias=" << (embed_bias ? 1 : 0) << ";num_clusters=" << num_clusters;
  return os.str();
}

std::uint64_t ModelConfig::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : canonical()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::size_t ParamGroup::size() const {
  std::size_t n = 0;
  for (const auto& p : params) n += p.size();
  return n;
}

Parameter& ParamGroup::at(std::string_view param_name) {
  for (auto& p : params)
    if (p.name == param_name) return p;
  throw UsageError("no parameter '" + std::string(param_name) + "' in group " + name);
}

const Parameter& ParamGroup::at(std::string_view param_name) const {
  return const_cast<ParamGroup*>(this)->at(param_name);
}

ModelBundle ModelBundle::initialize(const ModelConfig& config) {
  config.validate();
  ModelBundle m;
  m.config = config;
  Rng rng(derive_seed(config.init_seed, 0x1417));
  const auto& c = config;
  const std::size_t flat = c.conv2_channels * c.bottleneck_height() * c.bottleneck_width();
  auto bound = [](std::size_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); };

  const double b1 = bound(c.channels * 9);
  m.encoder.params.push_back(make_param("conv1.weight", {c.conv1_channels, c.channels, 3, 3}, b1, rng));
  m.encoder.params.push_back(make_zero("conv1.bias", {c.conv1_channels}));
  const double b2 = bound(c.conv1_channels * 9);
  m.encoder.params.push_back(make_param("conv2.weight", {c.conv2_channels, c.conv1_channels, 3, 3}, b2, rng));
  m.encoder.params.push_back(make_zero("conv2.bias", {c.conv2_channels}));
  const double b3 = bound(flat);
  m.encoder.params.push_back(make_param("fc.weight", {c.rep_dim, flat}, b3, rng));
  m.encoder.params.push_back(make_zero("fc.bias", {c.rep_dim}));

  const double be = bound(c.rep_dim);
  m.embedding.params.push_back(make_param("fc.weight", {c.embed_dim, c.rep_dim}, be, rng));
  if (c.embed_bias) m.embedding.params.push_back(make_zero("fc.bias", {c.embed_dim}));

  const double bd = bound(c.rep_dim);
  m.decoder.params.push_back(make_param("fc.weight", {flat, c.rep_dim}, bd, rng));
  m.decoder.params.push_back(make_zero("fc.bias", {flat}));
  // A stride-2, 4x4 transposed conv feeds each output pixel from 2x2 taps per input channel.
  const double bt1 = bound(c.conv2_channels * 4);
  m.decoder.params.push_back(make_param("deconv1.weight", {c.conv2_channels, c.conv1_channels, 4, 4}, bt1, rng));
  m.decoder.params.push_back(make_zero("deconv1.bias", {c.conv1_channels}));
  const double bt2 = bound(c.conv1_channels * 4);
  m.decoder.params.push_back(make_param("deconv2.weight", {c.conv1_channels, c.channels, 4, 4}, bt2, rng));
  m.decoder.params.push_back(make_zero("deconv2.bias", {c.channels}));

  const double bh = bound(c.embed_dim) * c.head_init_scale;
  m.cluster_head.params.push_back(make_param("weight", {c.num_clusters, c.embed_dim}, bh, rng));
  m.cluster_head.params.push_back(make_zero("bias", {c.num_clusters}));
  return m;
}

ModelBundle ModelBundle::zeros_like() const {
  ModelBundle z = *this;
  for (ParamGroup* g : z.groups())
    for (auto& p : g->params) std::fill(p.value.begin(), p.value.end(), 0.0);
  return z;
}

std::size_t ModelBundle::num_parameters() const {
  std::size_t n = 0;
  for (const ParamGroup* g : groups()) n += g->size();
  return n;
}

std::vector<double> ModelBundle::flatten() const {
  std::vector<double> flat;
  flat.reserve(num_parameters());
  for (const ParamGroup* g : groups())
    for (const auto& p : g->params) flat.insert(flat.end(), p.value.begin(), p.value.end());
  return flat;
}

void ModelBundle::assign_flat(const std::vector<double>& flat) {
  if (flat.size() != num_parameters()) throw UsageError("assign_flat: size mismatch");
  std::size_t off = 0;
  for (ParamGroup* g : groups())
    for (auto& p : g->params) {
      std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), p.size(), p.value.begin());
      off += p.size();
    }
}

bool ModelBundle::operator==(const ModelBundle& other) const {
  if (config.hash() != other.config.hash()) return false;
  auto a = groups();
  auto b = other.groups();
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i]->params.size() != b[i]->params.size()) return false;
    for (std::size_t j = 0; j < a[i]->params.size(); ++j) {
      if (a[i]->params[j].name != b[i]->params[j].name || a[i]->params[j].value != b[i]->params[j].value)
        return false;
    }
  }
  return true;
}

// ---- encoder ---------------------------------------------------------------

Tensor encode(const ModelBundle& model, const Tensor& images, EncoderCache* cache) {
  const auto& c = model.config;
  if (images.rank() != 4 || images.dim(0) == 0 || images.dim(1) != c.channels || images.dim(2) != c.height ||
      images.dim(3) != c.width) {
    throw ConfigError("encode: batch shape " + shape_string(images.shape) + " does not match configured image shape " +
                      shape_string(c.image_shape()));
  }
  const auto& g = model.encoder;
  // Pixels in [0, 1] are centered to [-1, 1] so the first layer sees zero-mean input.
  Tensor centered = images;
  for (double& v : centered.data) v = 2.0 * v - 1.0;
  Tensor pre1 = layers::conv2d(centered, values(g, kConv1W), values(g, kConv1B), c.conv1_channels, kDownsample);
  Tensor out1 = layers::elu(pre1);
  Tensor pre2 = layers::conv2d(out1, values(g, kConv2W), values(g, kConv2B), c.conv2_channels, kDownsample);
  Tensor out2 = layers::elu(pre2);
  Tensor flat = reshape(out2, {images.dim(0), out2.stride0()});
  Tensor reps = layers::linear(flat, values(g, kEncFcW), values(g, kEncFcB), c.rep_dim);
  if (cache) *cache = {std::move(centered), std::move(pre1), std::move(out1), std::move(pre2), std::move(out2), std::move(flat)};
  return reps;
}

Tensor encode_backward(const ModelBundle& model, const EncoderCache& cache, const Tensor& d_reps, ModelBundle& grads) {
  const auto& g = model.encoder;
  auto& dg = grads.encoder;
  Tensor d_flat = layers::linear_backward(cache.flat, d_reps, values(g, kEncFcW), values(dg, kEncFcW),
                                          values(dg, kEncFcB));
  Tensor d_out2 = reshape(std::move(d_flat), cache.conv2_out.shape);
  Tensor d_pre2 = layers::elu_backward(cache.conv2_pre, d_out2);
  Tensor d_out1 = layers::conv2d_backward(cache.conv1_out, d_pre2, values(g, kConv2W), values(dg, kConv2W),
                                          values(dg, kConv2B), kDownsample);
  Tensor d_pre1 = layers::elu_backward(cache.conv1_pre, d_out1);
  Tensor d_images = layers::conv2d_backward(cache.input, d_pre1, values(g, kConv1W), values(dg, kConv1W),
                                            values(dg, kConv1B), kDownsample);
  for (double& v : d_images.data) v *= 2.0;
  return d_images;
}

// ---- embedding -------------------------------------------------------------

Tensor embed(const ModelBundle& model, const Tensor& reps, EmbeddingCache* cache) {
  const auto& g = model.embedding;
  if (reps.rank() != 2 || reps.dim(1) != model.config.rep_dim) {
    throw ConfigError("embed: input shape " + shape_string(reps.shape) + " does not match rep_dim");
  }
  for (double v : reps.data)
    if (!std::isfinite(v)) throw NumericalError("representation", "embed: non-finite representation entry");
  std::span<const double> bias = model.config.embed_bias ? values(g, kEmbB) : std::span<const double>{};
  Tensor pre = layers::linear(reps, values(g, kEmbW), bias, model.config.embed_dim);
  std::vector<double> norms;
  Tensor out = layers::l2_normalize_rows(pre, &norms);
  if (cache) *cache = {reps, std::move(pre), out, std::move(norms)};
  return out;
}

Tensor embed_backward(const ModelBundle& model, const EmbeddingCache& cache, const Tensor& d_embeddings,
                      ModelBundle& grads) {
  auto& dg = grads.embedding;
  Tensor d_pre = layers::l2_normalize_rows_backward(cache.output, cache.norms, d_embeddings);
  std::span<double> d_bias = model.config.embed_bias ? values(dg, kEmbB) : std::span<double>{};
  return layers::linear_backward(cache.input, d_pre, values(model.embedding, kEmbW), values(dg, kEmbW), d_bias);
}

// ---- decoder ---------------------------------------------------------------

Tensor decode(const ModelBundle& model, const Tensor& reps, DecoderCache* cache) {
  const auto& c = model.config;
  const auto& g = model.decoder;
  if (reps.rank() != 2 || reps.dim(1) != c.rep_dim) {
    throw ConfigError("decode: input shape " + shape_string(reps.shape) + " does not match rep_dim");
  }
  const std::size_t n = reps.dim(0);
  const std::size_t flat = c.conv2_channels * c.bottleneck_height() * c.bottleneck_width();
  Tensor fc_pre = layers::linear(reps, values(g, kDecFcW), values(g, kDecFcB), flat);
  Tensor fc_out = reshape(layers::elu(fc_pre), {n, c.conv2_channels, c.bottleneck_height(), c.bottleneck_width()});
  Tensor pre1 = layers::conv_transpose2d(fc_out, values(g, kDeconv1W), values(g, kDeconv1B), c.conv1_channels, kUpsample);
  Tensor out1 = layers::elu(pre1);
  Tensor pre2 = layers::conv_transpose2d(out1, values(g, kDeconv2W), values(g, kDeconv2B), c.channels, kUpsample);
  Tensor out = layers::sigmoid(pre2);
  if (cache) *cache = {reps, std::move(fc_pre), std::move(fc_out), std::move(pre1), std::move(out1), out};
  return out;
}

Tensor decode_backward(const ModelBundle& model, const DecoderCache& cache, const Tensor& d_images, ModelBundle& grads) {
  const auto& g = model.decoder;
  auto& dg = grads.decoder;
  Tensor d_pre2 = layers::sigmoid_backward(cache.output, d_images);
  Tensor d_out1 = layers::conv_transpose2d_backward(cache.deconv1_out, d_pre2, values(g, kDeconv2W),
                                                    values(dg, kDeconv2W), values(dg, kDeconv2B), kUpsample);
  Tensor d_pre1 = layers::elu_backward(cache.deconv1_pre, d_out1);
  Tensor d_fc_out = layers::conv_transpose2d_backward(cache.fc_out, d_pre1, values(g, kDeconv1W),
                                                      values(dg, kDeconv1W), values(dg, kDeconv1B), kUpsample);
  Tensor d_fc_pre = layers::elu_backward(cache.fc_pre, reshape(std::move(d_fc_out), cache.fc_pre.shape));
  return layers::linear_backward(cache.input, d_fc_pre, values(g, kDecFcW), values(dg, kDecFcW), values(dg, kDecFcB));
}

// ---- clustering head -------------------------------------------------------

Tensor cluster_logits(const ModelBundle& model, const Tensor& embeddings, ClusterHeadCache* cache) {
  const auto& g = model.cluster_head;
  if (embeddings.rank() != 2 || embeddings.dim(1) != model.config.embed_dim) {
    throw ConfigError("cluster_logits: input shape " + shape_string(embeddings.shape) + " does not match embed_dim");
  }
  Tensor logits = layers::linear(embeddings, values(g, kHeadW), values(g, kHeadB), model.config.num_clusters);
  if (cache) cache->input = embeddings;
  return logits;
}

Tensor cluster_logits_backward(const ModelBundle& model, const ClusterHeadCache& cache, const Tensor& d_logits,
                               ModelBundle& grads) {
  return layers::linear_backward(cache.input, d_logits, values(model.cluster_head, kHeadW),
                                 values(grads.cluster_head, kHeadW), values(grads.cluster_head, kHeadB));
}

}  // namespace cbswr
