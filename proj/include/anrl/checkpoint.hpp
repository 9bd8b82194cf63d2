#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "anrl/config.hpp"
#include "anrl/model.hpp"

namespace anrl {

/// Named float64 array inside a checkpoint.
struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<double> data;
};

/// Binary container: magic "ANRLCKPT", u32 version, u64 config hash, config
/// text, u32 array count, then (name, rank, dims, values) records. All
/// integers little-endian.
struct Checkpoint {
  std::uint64_t config_hash = 0;
  std::string config_text;
  std::vector<NamedArray> arrays;
};

constexpr std::uint32_t kCheckpointVersion = 1;

Checkpoint make_checkpoint(const ExperimentConfig& cfg, const Model& model);
void write_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::string& path);

/// Rebuilds the model the checkpoint was taken from. Every parameter and BN
/// buffer must be present and no unknown arrays are accepted.
Model restore_model(const Checkpoint& ckpt, ExperimentConfig* cfg_out = nullptr);

}  // namespace anrl
