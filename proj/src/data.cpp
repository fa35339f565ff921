#include "cbswr/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numbers>

#include "cbswr/errors.hpp"

namespace cbswr {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;
constexpr double kContrast = 0.4;

enum class Pattern { kHorizontal, kVertical, kChecker, kRings };

struct ClassParams {
  Pattern pattern;
  double cycles;  // spatial frequency in cycles per image
};

// Pattern family cycles with the class index; frequency levels alternate so that the
// first and second halves of the class list both cover every family.
ClassParams class_params(std::size_t c, std::size_t num_classes) {
  const std::size_t levels = std::max<std::size_t>(2, (num_classes + 3) / 4);
  const std::size_t level = (c / 4 + c % 2) % levels;
  return {static_cast<Pattern>(c % 4), 2.0 + 0.5 * static_cast<double>(level)};
}

double pattern_value(const ClassParams& p, double u, double v, double phase_u, double phase_v) {
  switch (p.pattern) {
    case Pattern::kHorizontal:
      return std::sin(kTwoPi * p.cycles * v + phase_v);
    case Pattern::kVertical:
      return std::sin(kTwoPi * p.cycles * u + phase_u);
    case Pattern::kChecker:
      return std::sin(kTwoPi * p.cycles * u + phase_u) * std::sin(kTwoPi * p.cycles * v + phase_v);
    case Pattern::kRings: {
      const double r = std::hypot(u - 0.5, v - 0.5);
      return std::sin(kTwoPi * p.cycles * 2.0 * r + phase_u);
    }
  }
  return 0.0;
}

// Bilinear resample of the window [y0, y0+ch) x [x0, x0+cw) to the full image size,
// corner-aligned, so a full-size window reproduces the input exactly.
Tensor crop_resize(const Tensor& img, std::size_t y0, std::size_t x0, std::size_t ch, std::size_t cw, bool flip) {
  const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  Tensor out(img.shape);
  auto src_coord = [](std::size_t o, std::size_t out_len, std::size_t win) {
    return out_len > 1 ? static_cast<double>(o) * static_cast<double>(win - 1) / static_cast<double>(out_len - 1) : 0.0;
  };
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t oy = 0; oy < H; ++oy) {
      const double sy = src_coord(oy, H, ch);
      const auto iy = static_cast<std::size_t>(std::floor(sy));
      const std::size_t iy1 = std::min(iy + 1, ch - 1);
      const double fy = sy - static_cast<double>(iy);
      for (std::size_t ox = 0; ox < W; ++ox) {
        const double sx = src_coord(ox, W, cw);
        const auto ix = static_cast<std::size_t>(std::floor(sx));
        const std::size_t ix1 = std::min(ix + 1, cw - 1);
        const double fx = sx - static_cast<double>(ix);
        auto at = [&](std::size_t y, std::size_t x) { return img.data[(c * H + y0 + y) * W + x0 + x]; };
        double v = at(iy, ix);
        if (fx != 0.0 || fy != 0.0) {
          v = (1 - fy) * ((1 - fx) * at(iy, ix) + fx * at(iy, ix1)) + fy * ((1 - fx) * at(iy1, ix) + fx * at(iy1, ix1));
        }
        const std::size_t dx = flip ? W - 1 - ox : ox;
        out.data[(c * H + oy) * W + dx] = std::clamp(v, 0.0, 1.0);
      }
    }
  return out;
}

std::size_t window_extent(double fraction, std::size_t full) {
  return std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(fraction * static_cast<double>(full))), 1, full);
}

void check_crop_fraction(double f) {
  if (!(f > 0.0 && f <= 1.0)) throw ConfigError("crop fraction must lie in (0, 1], got " + std::to_string(f));
}

}  // namespace

void DatasetConfig::validate() const {
  if (num_classes < 2) throw ConfigError("data.num_classes must be >= 2");
  if (train_classes < 1 || train_classes >= num_classes) {
    throw ConfigError("data.train_classes must lie in [1, num_classes)");
  }
  if (samples_per_class < 2) throw ConfigError("data.samples_per_class must be >= 2");
  if (channels < 1 || height < 4 || width < 4) throw ConfigError("data: image shape too small");
  if (!(noise_level >= 0.0 && noise_level < 1.0)) throw ConfigError("data.noise_level must lie in [0, 1)");
  check_crop_fraction(crop_fraction);
}

Dataset generate_dataset(const DatasetConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Dataset ds;
  ds.image_shape = cfg.image_shape();
  const std::size_t C = cfg.channels, H = cfg.height, W = cfg.width;
  std::uint64_t next_id = 0;
  for (std::size_t cls = 0; cls < cfg.num_classes; ++cls) {
    const ClassParams params = class_params(cls, cfg.num_classes);
    Rng rng(derive_seed(seed, 1000 + cls));
    for (std::size_t s = 0; s < cfg.samples_per_class; ++s) {
      const double jitter = cfg.noise_level * std::numbers::pi;
      const double phase_u = jitter * rng.uniform(-1.0, 1.0);
      const double phase_v = jitter * rng.uniform(-1.0, 1.0);
      ClassParams sample_params = params;
      sample_params.cycles *= 1.0 + cfg.noise_level * rng.uniform(-0.5, 0.5);
      ImageSample img{Tensor(cfg.image_shape()), next_id++, false, static_cast<std::int64_t>(cls)};
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < H; ++y)
          for (std::size_t x = 0; x < W; ++x) {
            const double u = (static_cast<double>(x) + 0.5) / static_cast<double>(W);
            const double v = (static_cast<double>(y) + 0.5) / static_cast<double>(H);
            const double noise = cfg.noise_level * rng.uniform(-1.0, 1.0);
            const double val = 0.5 + kContrast * pattern_value(sample_params, u, v, phase_u, phase_v) + noise;
            img.pixels.data[(c * H + y) * W + x] = std::clamp(val, 0.0, 1.0);
          }
      ds.samples.push_back(std::move(img));
    }
  }
  return ds;
}

DatasetSplit split_by_class(const Dataset& all, const DatasetConfig& cfg) {
  std::vector<std::int64_t> order(cfg.num_classes);
  for (std::size_t c = 0; c < order.size(); ++c) order[c] = static_cast<std::int64_t>(c);
  if (cfg.split_rule == SplitRule::kSeeded) {
    Rng rng(derive_seed(cfg.split_seed, 0x5b11));
    shuffle(order, rng);
  }
  DatasetSplit split;
  split.train_classes.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(cfg.train_classes));
  split.test_classes.assign(order.begin() + static_cast<std::ptrdiff_t>(cfg.train_classes), order.end());
  std::sort(split.train_classes.begin(), split.train_classes.end());
  std::sort(split.test_classes.begin(), split.test_classes.end());
  split.train.image_shape = split.test.image_shape = all.image_shape;
  for (const auto& s : all.samples) {
    const bool is_train = std::binary_search(split.train_classes.begin(), split.train_classes.end(), s.label);
    (is_train ? split.train : split.test).samples.push_back(s);
  }
  return split;
}

DatasetSplit make_split(const DatasetConfig& cfg, std::uint64_t seed) {
  return split_by_class(generate_dataset(cfg, seed), cfg);
}

ImageSample augment(const ImageSample& image, Rng& rng, const AugmentOptions& opts) {
  check_crop_fraction(opts.crop_fraction);
  const std::size_t H = image.pixels.dim(1), W = image.pixels.dim(2);
  const std::size_t ch = window_extent(opts.crop_fraction, H);
  const std::size_t cw = window_extent(opts.crop_fraction, W);
  const auto y0 = static_cast<std::size_t>(rng.below(H - ch + 1));
  const auto x0 = static_cast<std::size_t>(rng.below(W - cw + 1));
  const bool flip = opts.force_flip ? *opts.force_flip : rng.coin();
  ImageSample out = image;
  out.pixels = crop_resize(image.pixels, y0, x0, ch, cw, flip);
  out.is_augmented = true;
  return out;
}

ImageSample center_crop(const ImageSample& image, double crop_fraction) {
  check_crop_fraction(crop_fraction);
  const std::size_t H = image.pixels.dim(1), W = image.pixels.dim(2);
  const std::size_t ch = window_extent(crop_fraction, H);
  const std::size_t cw = window_extent(crop_fraction, W);
  ImageSample out = image;
  out.pixels = crop_resize(image.pixels, (H - ch) / 2, (W - cw) / 2, ch, cw, false);
  return out;
}

std::vector<Batch> make_batches(const Dataset& dataset, std::size_t b, std::uint64_t epoch_seed,
                                double crop_fraction) {
  if (b == 0) throw ConfigError("batch size must be >= 1");
  if (b > dataset.size()) {
    throw ConfigError("batch size " + std::to_string(b) + " exceeds dataset size " + std::to_string(dataset.size()));
  }
  std::vector<std::size_t> order(dataset.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(epoch_seed);
  shuffle(order, rng);
  const AugmentOptions opts{crop_fraction, std::nullopt};
  std::vector<Batch> batches;
  for (std::size_t start = 0; start + b <= order.size(); start += b) {
    Batch batch;
    batch.samples.reserve(2 * b);
    for (std::size_t k = 0; k < b; ++k) {
      const ImageSample& original = dataset.samples[order[start + k]];
      batch.samples.push_back(original);
      batch.samples.back().is_augmented = false;
      batch.samples.push_back(augment(original, rng, opts));
    }
    batches.push_back(std::move(batch));
  }
  return batches;
}

Tensor stack_images(const std::vector<ImageSample>& samples) {
  if (samples.empty()) throw EmptyBatchError("stack_images: no samples");
  std::vector<std::span<const double>> rows;
  rows.reserve(samples.size());
  for (const auto& s : samples) {
    if (s.pixels.shape != samples.front().pixels.shape) throw ConfigError("stack_images: non-uniform image shapes");
    rows.emplace_back(s.pixels.data);
  }
  return stack_rows(rows, samples.front().pixels.shape);
}

std::vector<std::size_t> twin_indices(std::size_t m) {
  if (m % 2 != 0) throw UsageError("twin_indices: batch size must be even");
  std::vector<std::size_t> t(m);
  for (std::size_t i = 0; i < m; ++i) t[i] = i ^ 1U;
  return t;
}

// ---- container ------------------------------------------------------------

static_assert(std::endian::native == std::endian::little, "container IO assumes a little-endian host");

void write_container(const std::filesystem::path& dir, const ArrayContainer& c) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "arrays.bin", std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + (dir / "arrays.bin").string());
    out.write(reinterpret_cast<const char*>(c.array.data.data()),
              static_cast<std::streamsize>(c.array.data.size() * sizeof(double)));
  }
  nlohmann::json m;
  m["format"] = "cbswr-array-container";
  m["version"] = 1;
  m["kind"] = c.kind;
  m["dtype"] = "float64-le";
  m["shape"] = c.array.shape;
  m["labels"] = c.labels;
  m["ids"] = c.ids;
  std::vector<int> aug(c.augmented.begin(), c.augmented.end());
  m["augmented"] = aug;
  m["meta"] = c.meta;
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  out << m.dump(2) << '\n';
}

ArrayContainer read_container(const std::filesystem::path& dir) {
  std::ifstream min(dir / "manifest.json");
  if (!min) throw CheckpointError("missing manifest.json in " + dir.string());
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(min);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("corrupt manifest: ") + e.what());
  }
  if (m.value("format", "") != "cbswr-array-container" || m.value("version", 0) != 1) {
    throw CheckpointError("unsupported container format in " + dir.string());
  }
  ArrayContainer c;
  try {
    c.kind = m.at("kind").get<std::string>();
    c.array = Tensor(m.at("shape").get<Shape>());
    c.labels = m.at("labels").get<std::vector<std::int64_t>>();
    c.ids = m.at("ids").get<std::vector<std::uint64_t>>();
    for (int a : m.at("augmented").get<std::vector<int>>()) c.augmented.push_back(a != 0);
    c.meta = m.value("meta", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("corrupt manifest: ") + e.what());
  }
  std::ifstream in(dir / "arrays.bin", std::ios::binary);
  if (!in) throw CheckpointError("missing arrays.bin in " + dir.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() != c.array.size() * sizeof(double)) throw CheckpointError("arrays.bin size does not match manifest");
  std::memcpy(c.array.data.data(), bytes.data(), bytes.size());
  return c;
}

ArrayContainer to_container(const Dataset& ds, nlohmann::json meta) {
  ArrayContainer c;
  c.kind = "dataset";
  c.array = stack_images(ds.samples);
  for (const auto& s : ds.samples) {
    c.labels.push_back(s.label);
    c.ids.push_back(s.sample_id);
    c.augmented.push_back(s.is_augmented);
  }
  c.meta = std::move(meta);
  return c;
}

Dataset dataset_from_container(const ArrayContainer& c) {
  if (c.kind != "dataset" || c.array.rank() != 4) throw CheckpointError("container does not hold a dataset");
  const std::size_t n = c.array.dim(0);
  if (c.labels.size() != n || c.ids.size() != n || c.augmented.size() != n) {
    throw CheckpointError("dataset container: per-row metadata does not match row count");
  }
  Dataset ds;
  ds.image_shape = {c.array.dim(1), c.array.dim(2), c.array.dim(3)};
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = c.array.row(i);
    ImageSample s{Tensor(ds.image_shape, std::vector<double>(r.begin(), r.end())), c.ids[i], c.augmented[i], c.labels[i]};
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace cbswr
