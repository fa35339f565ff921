#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "cbswr/model.hpp"

namespace cbswr {

/// Optimizer-side training state carried alongside the parameters for resume.
struct OptimizerState {
  ModelBundle momentum;  // same shapes as the model
  std::uint64_t epoch = 0;  // completed epochs
  std::uint64_t step = 0;   // completed optimizer steps
};

struct Checkpoint {
  ModelBundle model;
  std::string run_config;  // resolved config text, may be empty
  std::optional<OptimizerState> optimizer;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Little-endian binary container:
///   "CBSWRCKP" | u32 version | u64 config hash | model config | run config text |
///   4 parameter groups | optional optimizer state | u64 FNV-1a checksum of all previous bytes.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);

/// Throws CheckpointError when the file is missing, truncated, corrupt or of another version.
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// As above, and additionally refuses a checkpoint whose config hash differs from `expected`.
Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected);

}  // namespace cbswr
