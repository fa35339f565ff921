#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "cbswr/checkpoint.hpp"
#include "cbswr/errors.hpp"
#include "cbswr/layers.hpp"
#include "cbswr/model.hpp"
#include "cbswr/rng.hpp"
#include "cbswr/trainer.hpp"

namespace cbswr {
namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.num_clusters = 4;
  c.init_seed = 7;
  return c;
}

Tensor random_images(std::size_t n, const ModelConfig& c, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t({n, c.channels, c.height, c.width});
  for (double& v : t.data) v = rng.uniform();
  return t;
}

Tensor random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t({rows, cols});
  for (double& v : t.data) v = rng.uniform(-1.0, 1.0);
  return t;
}

void set_identity(Parameter& w) {
  std::fill(w.value.begin(), w.value.end(), 0.0);
  const std::size_t rows = w.shape[0], cols = w.shape[1];
  for (std::size_t i = 0; i < std::min(rows, cols); ++i) w.value[i * cols + i] = 1.0;
}

TEST(Encode, OutputShape) {
  const auto model = ModelBundle::initialize(small_config());
  const Tensor reps = encode(model, random_images(4, model.config, 1));
  EXPECT_EQ(reps.shape, (Shape{4, 64}));
}

TEST(Encode, IdenticalImagesGiveIdenticalRepresentations) {
  const auto model = ModelBundle::initialize(small_config());
  Tensor images = random_images(2, model.config, 2);
  std::copy(images.row(0).begin(), images.row(0).end(), images.row(1).begin());
  const Tensor reps = encode(model, images);
  EXPECT_TRUE(std::equal(reps.row(0).begin(), reps.row(0).end(), reps.row(1).begin()));
}

TEST(Encode, ZeroFinalLayerGivesZeroRepresentations) {
  auto model = ModelBundle::initialize(small_config());
  for (auto* name : {"fc.weight", "fc.bias"}) {
    auto& p = model.encoder.at(name);
    std::fill(p.value.begin(), p.value.end(), 0.0);
  }
  const Tensor reps = encode(model, random_images(3, model.config, 3));
  for (double v : reps.data) EXPECT_EQ(v, 0.0);
}

TEST(Encode, RejectsWrongImageShape) {
  const auto model = ModelBundle::initialize(small_config());
  EXPECT_THROW(encode(model, Tensor({2, 1, 8, 8})), ConfigError);
}

TEST(Embed, NormalizesWithIdentityLayer) {
  ModelConfig c = small_config();
  auto model = ModelBundle::initialize(c);
  set_identity(model.embedding.at("fc.weight"));
  auto& b = model.embedding.at("fc.bias");
  std::fill(b.value.begin(), b.value.end(), 0.0);
  Tensor r({1, c.rep_dim});
  r.data[0] = 3.0;
  r.data[1] = 4.0;
  const Tensor f = embed(model, r);
  EXPECT_NEAR(f.data[0], 0.6, 1e-12);
  EXPECT_NEAR(f.data[1], 0.8, 1e-12);
  for (std::size_t i = 2; i < c.embed_dim; ++i) EXPECT_EQ(f.data[i], 0.0);
}

TEST(Embed, UnitNormForRandomInputs) {
  const auto model = ModelBundle::initialize(small_config());
  const Tensor f = embed(model, random_matrix(20, 64, 4));
  for (std::size_t i = 0; i < 20; ++i) EXPECT_NEAR(std::sqrt(squared_norm(f.row(i))), 1.0, 1e-6);
}

TEST(Embed, ScaleInvariantWithoutBias) {
  ModelConfig c = small_config();
  c.embed_bias = false;
  const auto model = ModelBundle::initialize(c);
  const Tensor r = random_matrix(5, c.rep_dim, 5);
  Tensor r2 = r;
  for (double& v : r2.data) v *= 2.0;
  const Tensor a = embed(model, r), b = embed(model, r2);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a.data[i], b.data[i], 1e-12);
}

TEST(Embed, DegenerateVectorThrows) {
  ModelConfig c = small_config();
  c.embed_bias = false;
  const auto model = ModelBundle::initialize(c);
  EXPECT_THROW(embed(model, Tensor({1, c.rep_dim})), DegenerateEmbeddingError);
}

TEST(Decode, ShapeAndRange) {
  const auto model = ModelBundle::initialize(small_config());
  const Tensor r = random_matrix(3, 64, 6);
  const Tensor img = decode(model, r);
  EXPECT_EQ(img.shape, (Shape{3, 1, 16, 16}));
  for (double v : img.data) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  EXPECT_EQ(decode(model, r), img);
}

TEST(ClusterHead, ZeroParametersGiveZeroLogits) {
  auto model = ModelBundle::initialize(small_config());
  for (auto& p : model.cluster_head.params) std::fill(p.value.begin(), p.value.end(), 0.0);
  const Tensor logits = cluster_logits(model, random_matrix(2, 16, 7));
  EXPECT_EQ(logits.shape, (Shape{2, 4}));
  for (double v : logits.data) EXPECT_EQ(v, 0.0);
}

TEST(ClusterHead, FirstBasisVectorSelectsFirstColumn) {
  auto model = ModelBundle::initialize(small_config());
  auto& w = model.cluster_head.at("weight");
  Rng rng(8);
  for (double& v : w.value) v = rng.uniform(-1.0, 1.0);
  auto& b = model.cluster_head.at("bias");
  std::fill(b.value.begin(), b.value.end(), 0.0);
  Tensor x({1, 16});
  x.data[0] = 1.0;
  const Tensor logits = cluster_logits(model, x);
  for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(logits.data[k], w.value[k * 16]);
}

TEST(ModelBundle, InitializationIsSeeded) {
  ModelConfig c = small_config();
  EXPECT_EQ(ModelBundle::initialize(c), ModelBundle::initialize(c));
  ModelConfig other = c;
  other.init_seed = 8;
  EXPECT_FALSE(ModelBundle::initialize(c) == ModelBundle::initialize(other));
}

TEST(ModelBundle, FlattenRoundTrip) {
  auto model = ModelBundle::initialize(small_config());
  auto flat = model.flatten();
  EXPECT_EQ(flat.size(), model.num_parameters());
  for (double& v : flat) v += 1.0;
  model.assign_flat(flat);
  EXPECT_EQ(model.flatten(), flat);
}

TEST(ModelConfig, HashIgnoresSeedButNotShape) {
  ModelConfig a = small_config(), b = a;
  b.init_seed = 99;
  EXPECT_EQ(a.hash(), b.hash());
  b.embed_dim = 8;
  EXPECT_NE(a.hash(), b.hash());
}

// Random linear functional of a component's output; its gradient is the functional itself.
struct Probe {
  Tensor weights;
  double operator()(const Tensor& out) const { return dot(out.data, weights.data); }
};

Probe make_probe(const Shape& shape, std::uint64_t seed) {
  Rng rng(seed);
  Tensor w(shape);
  for (double& v : w.data) v = rng.uniform(-1.0, 1.0);
  return {w};
}

template <typename Forward, typename Backward>
void check_group(ModelBundle model, ParamGroup ModelBundle::*group, Forward forward, Backward backward) {
  const Tensor out = forward(model);
  const Probe probe = make_probe(out.shape, 11);
  ModelBundle grads = model.zeros_like();
  backward(model, probe.weights, grads);
  for (std::size_t p = 0; p < (model.*group).params.size(); ++p) {
    auto& param = (model.*group).params[p];
    std::vector<double> x = param.value;
    std::vector<std::size_t> coords;
    Rng rng(12 + p);
    for (std::size_t i = 0; i < std::min<std::size_t>(16, x.size()); ++i) coords.push_back(rng.below(x.size()));
    auto f = [&](std::span<const double> v) {
      ModelBundle probe_model = model;
      std::copy(v.begin(), v.end(), (probe_model.*group).params[p].value.begin());
      return probe(forward(probe_model));
    };
    const auto check =
        finite_difference_check(f, x, (grads.*group).params[p].value, coords, 1e-5, 1e-4);
    EXPECT_LE(check.max_rel_error, 1e-4) << (model.*group).name << "." << param.name;
  }
}

TEST(Gradients, EncoderMatchesFiniteDifferences) {
  const auto model = ModelBundle::initialize(small_config());
  const Tensor images = random_images(2, model.config, 13);
  check_group(
      model, &ModelBundle::encoder, [&](const ModelBundle& m) { return encode(m, images); },
      [&](const ModelBundle& m, const Tensor& d, ModelBundle& g) {
        EncoderCache cache;
        encode(m, images, &cache);
        encode_backward(m, cache, d, g);
      });
}

TEST(Gradients, EmbeddingMatchesFiniteDifferences) {
  const auto model = ModelBundle::initialize(small_config());
  const Tensor reps = random_matrix(3, 64, 14);
  check_group(
      model, &ModelBundle::embedding, [&](const ModelBundle& m) { return embed(m, reps); },
      [&](const ModelBundle& m, const Tensor& d, ModelBundle& g) {
        EmbeddingCache cache;
        embed(m, reps, &cache);
        embed_backward(m, cache, d, g);
      });
}

TEST(Gradients, DecoderMatchesFiniteDifferences) {
  const auto model = ModelBundle::initialize(small_config());
  const Tensor reps = random_matrix(2, 64, 15);
  check_group(
      model, &ModelBundle::decoder, [&](const ModelBundle& m) { return decode(m, reps); },
      [&](const ModelBundle& m, const Tensor& d, ModelBundle& g) {
        DecoderCache cache;
        decode(m, reps, &cache);
        decode_backward(m, cache, d, g);
      });
}

TEST(Gradients, ClusterHeadMatchesFiniteDifferences) {
  const auto model = ModelBundle::initialize(small_config());
  const Tensor x = random_matrix(3, 16, 16);
  check_group(
      model, &ModelBundle::cluster_head, [&](const ModelBundle& m) { return cluster_logits(m, x); },
      [&](const ModelBundle& m, const Tensor& d, ModelBundle& g) {
        ClusterHeadCache cache;
        cluster_logits(m, x, &cache);
        cluster_logits_backward(m, cache, d, g);
      });
}

TEST(Gradients, EmbeddingInputMatchesFiniteDifferences) {
  const auto model = ModelBundle::initialize(small_config());
  const Tensor reps = random_matrix(2, 64, 17);
  EmbeddingCache cache;
  const Tensor out = embed(model, reps, &cache);
  const Probe probe = make_probe(out.shape, 18);
  ModelBundle grads = model.zeros_like();
  const Tensor d_reps = embed_backward(model, cache, probe.weights, grads);
  std::vector<std::size_t> coords(reps.size());
  std::iota(coords.begin(), coords.end(), 0);
  auto f = [&](std::span<const double> v) {
    return probe(embed(model, Tensor(reps.shape, std::vector<double>(v.begin(), v.end()))));
  };
  EXPECT_LE(finite_difference_check(f, reps.data, d_reps.data, coords, 1e-5, 1e-4).max_rel_error, 1e-4);
}

class CheckpointTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = std::filesystem::temp_directory_path() /
           ("cbswr_ckpt_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    std::filesystem::remove_all(dir_);
    std::filesystem::create_directories(dir_);
  }
  void TearDown() override { std::filesystem::remove_all(dir_); }
  std::filesystem::path dir_;
};

TEST_F(CheckpointTest, RoundTripIsExact) {
  Checkpoint ckpt{ModelBundle::initialize(small_config()), "run.seed = 3\n", std::nullopt};
  OptimizerState opt{ckpt.model.zeros_like(), 4, 40};
  opt.momentum.encoder.params[0].value[0] = 0.125;
  ckpt.optimizer = opt;
  save_checkpoint(dir_ / "a.ckpt", ckpt);
  const Checkpoint back = load_checkpoint(dir_ / "a.ckpt", ckpt.model.config);
  EXPECT_EQ(back.model, ckpt.model);
  EXPECT_EQ(back.run_config, ckpt.run_config);
  ASSERT_TRUE(back.optimizer.has_value());
  EXPECT_EQ(back.optimizer->momentum, opt.momentum);
  EXPECT_EQ(back.optimizer->epoch, 4u);
  EXPECT_EQ(back.optimizer->step, 40u);
}

TEST_F(CheckpointTest, RefusesMismatchedConfigHash) {
  const Checkpoint ckpt{ModelBundle::initialize(small_config()), "", std::nullopt};
  save_checkpoint(dir_ / "a.ckpt", ckpt);
  ModelConfig other = small_config();
  other.num_clusters = 8;
  EXPECT_THROW(load_checkpoint(dir_ / "a.ckpt", other), CheckpointError);
}

TEST_F(CheckpointTest, DetectsCorruption) {
  const Checkpoint ckpt{ModelBundle::initialize(small_config()), "", std::nullopt};
  const auto path = dir_ / "a.ckpt";
  save_checkpoint(path, ckpt);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekg(200);
    const char c = static_cast<char>(f.get());
    f.seekp(200);
    f.put(static_cast<char>(c ^ 0x5a));
  }
  EXPECT_THROW(load_checkpoint(path), CheckpointError);
  EXPECT_THROW(load_checkpoint(dir_ / "missing.ckpt"), CheckpointError);
}

}  // namespace
}  // namespace cbswr
