#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "anrl/meta_trainer.hpp"
#include "anrl/model.hpp"
#include "anrl/synth_domains.hpp"

namespace anrl {

/// Raised for malformed or inconsistent configuration. The CLI maps it to
/// exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DataConfig {
  std::size_t n_domains = 4;
  int held_out = 3;
  ProtocolSizes sizes;
  std::uint64_t data_seed = 1;
  std::vector<DomainSpec> domains = default_domain_specs();
};

enum class ThresholdSource { TestEer, Fixed };

struct EvalConfig {
  /// TestEer picks the EER threshold on the held-out scores themselves.
  ThresholdSource threshold = ThresholdSource::TestEer;
  double fixed_threshold = 0.5;
  std::size_t alpha_probe = 64;
  std::size_t alpha_sample_channels = 4;
  bool export_embeddings = false;
  std::size_t embedding_source_samples = 300;
  std::size_t eval_batch = 100;
};

struct ExperimentConfig {
  NetworkConfig network;
  TrainConfig train;
  DataConfig data;
  EvalConfig eval;

  void validate() const;
  ImageGeometry geometry() const { return {network.input_side, network.depth_map_side}; }
};

/// INI-style text: [section] headers and key = value lines, '#' comments.
/// Sections: network, train, ablation, data, eval, domain.<id>. Unknown
/// sections or keys are errors.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::string& path);

/// Canonical text listing every key; parse_config(to_text(c)) reproduces c.
std::string to_text(const ExperimentConfig& cfg);
std::uint64_t config_hash(const ExperimentConfig& cfg);
std::string hex64(std::uint64_t v);

}  // namespace anrl
