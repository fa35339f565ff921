#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "cbswr/rng.hpp"
#include "cbswr/tensor.hpp"

namespace cbswr {

enum class SplitRule { kFirst, kSeeded };

struct DatasetConfig {
  std::size_t num_classes = 8;    // total generative classes
  std::size_t train_classes = 4;  // the rest are held out for testing
  std::size_t samples_per_class = 50;
  std::size_t channels = 1;
  std::size_t height = 16;
  std::size_t width = 16;
  double noise_level = 0.3;  // pixel noise amplitude and phase/frequency jitter scale, in [0, 1)
  double crop_fraction = 0.8;
  SplitRule split_rule = SplitRule::kFirst;
  std::uint64_t split_seed = 0;

  Shape image_shape() const { return {channels, height, width}; }
  void validate() const;
};

struct ImageSample {
  Tensor pixels;  // (C, H, W), values in [0, 1]
  std::uint64_t sample_id = 0;
  bool is_augmented = false;
  std::int64_t label = -1;  // generative class; used for evaluation only

  bool operator==(const ImageSample&) const = default;
};

struct Dataset {
  Shape image_shape;
  std::vector<ImageSample> samples;

  std::size_t size() const { return samples.size(); }
  bool operator==(const Dataset&) const = default;
};

struct DatasetSplit {
  Dataset train;
  Dataset test;
  std::vector<std::int64_t> train_classes;
  std::vector<std::int64_t> test_classes;
};

/// Every class is a parametric texture (stripe/checker/ring family at a class-specific
/// frequency). noise_level scales per-sample phase and frequency jitter and uniform pixel noise; at 0
/// all samples of a class are identical. Pure function of (cfg, seed).
Dataset generate_dataset(const DatasetConfig& cfg, std::uint64_t seed);

/// Splits by CLASS: train and test class sets are disjoint.
DatasetSplit split_by_class(const Dataset& all, const DatasetConfig& cfg);

/// generate_dataset followed by split_by_class.
DatasetSplit make_split(const DatasetConfig& cfg, std::uint64_t seed);

struct AugmentOptions {
  double crop_fraction = 0.8;
  std::optional<bool> force_flip;  // unset: flip with probability 0.5
};

/// Random crop of crop_fraction of each spatial extent, bilinear resize back to the full
/// size, optional horizontal flip. Throws ConfigError for a fraction outside (0, 1].
ImageSample augment(const ImageSample& image, Rng& rng, const AugmentOptions& opts);

/// Deterministic center crop + resize, used for test-time inputs.
ImageSample center_crop(const ImageSample& image, double crop_fraction);

/// Original at row 2i, its augmented twin at row 2i+1.
struct Batch {
  std::vector<ImageSample> samples;

  std::size_t size() const { return samples.size(); }
  bool operator==(const Batch&) const = default;
};

/// Seeded shuffle, b originals per batch each paired with a fresh augmented twin; the
/// last incomplete batch is dropped. Throws ConfigError when b is 0 or exceeds the dataset.
std::vector<Batch> make_batches(const Dataset& dataset, std::size_t b, std::uint64_t epoch_seed,
                                double crop_fraction);

/// Stack samples into (n, C, H, W).
Tensor stack_images(const std::vector<ImageSample>& samples);

/// positive_of[i] for an interleaved batch of m rows: i ^ 1.
std::vector<std::size_t> twin_indices(std::size_t m);

// ---- array container ---------------------------------------------------------

/// A directory holding `arrays.bin` (row-major little-endian float64) and `manifest.json`
/// (kind, shape, labels, ids, augmented flags and free-form metadata).
struct ArrayContainer {
  std::string kind;  // "dataset" or "embeddings"
  Tensor array;
  std::vector<std::int64_t> labels;
  std::vector<std::uint64_t> ids;
  std::vector<bool> augmented;
  nlohmann::json meta = nlohmann::json::object();
};

void write_container(const std::filesystem::path& dir, const ArrayContainer& c);
ArrayContainer read_container(const std::filesystem::path& dir);

ArrayContainer to_container(const Dataset& ds, nlohmann::json meta = nlohmann::json::object());
Dataset dataset_from_container(const ArrayContainer& c);

}  // namespace cbswr
