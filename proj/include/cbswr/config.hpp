#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "cbswr/data.hpp"
#include "cbswr/model.hpp"
#include "cbswr/trainer.hpp"

namespace cbswr {

/// Everything a run needs, parsed from one flat `key = value` text file.
struct RunConfig {
  std::string run_name = "run";
  std::string out_dir;  // empty: $CBSWR_OUT_ROOT (or ./runs) / run_name
  std::uint64_t seed = 0;
  DatasetConfig data;
  ModelConfig model;
  TrainConfig train;
  std::vector<std::size_t> eval_ks{1, 2, 4, 8};
  std::size_t gradcheck_batches = 5;

  /// Seeds for the dataset, the parameter init and batch order/augmentation, all
  /// derived from `seed`.
  std::uint64_t data_seed() const;

  /// Propagates shared fields (image shape, K, seeds, crop fraction) and validates.
  void finalize();

  /// Canonical text with every key, one per line, in a fixed order. Parsing it back
  /// reproduces the config exactly.
  std::string to_text() const;
};

/// Applies `key = value` lines ('#' starts a comment) on top of `base`. Unknown keys and
/// malformed values throw ConfigError naming the key and line.
RunConfig parse_run_config(const std::string& text, RunConfig base = {});
RunConfig load_run_config(const std::filesystem::path& path, RunConfig base = {});

/// Applies a single override; `assignment` is "key=value".
void apply_override(RunConfig& cfg, const std::string& assignment);

/// All recognized keys, in canonical order.
std::vector<std::string> config_keys();

}  // namespace cbswr
