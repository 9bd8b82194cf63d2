#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "anrl/norm_layers.hpp"
#include "anrl/param_store.hpp"
#include "anrl/tensor.hpp"

namespace anrl {

struct NetworkConfig {
  std::size_t in_channels = 6;
  std::vector<std::size_t> block_channel_widths{16, 32, 64};
  /// One entry per block, or a single entry applied to every block.
  std::vector<NormVariant> norm_variant{NormVariant::AFNM};
  /// Width of the pooled embedding. 0 means the last block width, which is
  /// the only other accepted value.
  std::size_t embed_dim = 0;
  std::size_t depth_map_side = 8;
  std::size_t input_side = 32;
  double norm_eps = 1e-5;
  double stat_momentum = 0.9;

  void validate() const;
  NormVariant variant_of(std::size_t block) const;
  std::size_t embedding_dim() const { return block_channel_widths.back(); }
  /// Spatial side after each block. Blocks halve the side until it reaches
  /// depth_map_side, then keep it.
  std::vector<std::size_t> block_sides() const;
  bool uses_afnm() const;
};

struct ForwardTrace {
  Tensor embedding;   // [N,D]
  Tensor logit;       // [N]
  Tensor depth_pred;  // [N,1,h,h]
  std::vector<Tensor> alphas;  // [N,C] per block, AFNM blocks only
};

struct Model {
  NetworkConfig config;
  ParamStore params;
  std::vector<BnState> bn;  // one per block

  static std::string block_prefix(std::size_t block);
  NormParams norm_params(const ParamStore& store, std::size_t block) const;
};

/// Deterministic initialization. Every normalization-layer tensor is tagged
/// F, convolutions and heads are tagged Base.
Model build_model(const NetworkConfig& cfg, std::uint64_t seed);

/// Forward with an explicit parameter view (e.g. live store with F entries
/// rebound to shadow tensors). BN running stats live in `bn` and are only
/// touched when mode is Train and update_stats is set.
ForwardTrace forward(const Model& model, const ParamStore& params, std::vector<BnState>& bn, const Tensor& x,
                     Mode mode, bool update_stats);
ForwardTrace forward(Model& model, const Tensor& x, Mode mode, bool update_stats = true);

/// sigmoid(logit) per sample.
std::vector<double> liveness_scores(const ForwardTrace& trace);

}  // namespace anrl
