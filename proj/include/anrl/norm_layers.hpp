#pragma once

#include <string>
#include <vector>

#include "anrl/random.hpp"
#include "anrl/tensor.hpp"

namespace anrl {

enum class NormVariant { BN, IN, IN_BN_HALF, BIN, IBN, AFNM };
enum class Mode { Train, Eval };

const char* variant_name(NormVariant v);
NormVariant parse_variant(const std::string& name);
std::vector<NormVariant> all_variants();

/// Running statistics for the batch-normalized branch.
struct BnState {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double eps = 1e-5;
  /// Weight kept on the old running value at each update.
  double stat_momentum = 0.9;

  static BnState init(std::size_t channels, double eps = 1e-5, double stat_momentum = 0.9);
};

/// Train mode normalizes with batch statistics over (N,H,W) and, when
/// `update_stats` is set, folds them into the running averages. Eval mode
/// uses the running statistics. No affine.
Tensor batch_norm(const Tensor& x, BnState& state, Mode mode, bool update_stats = true);

/// Per-(sample, channel) spatial normalization. No affine.
Tensor instance_norm(const Tensor& x, double eps = 1e-5);

/// Channel-wise spatial means S[N,C] of x[N,C,H,W].
Tensor channel_statistics(const Tensor& x);

/// Z = relu(W S) per sample, W is [d,C].
Tensor compact_descriptor(const Tensor& stats, const Tensor& descriptor);

struct BranchGates {
  Tensor bn;
  Tensor in;
};

/// B = sigmoid(W_B Z), I = sigmoid(W_I Z), both heads [C,d].
BranchGates branch_gates(const Tensor& z, const Tensor& gate_bn, const Tensor& gate_in);

/// alpha = B / (B + I), elementwise.
Tensor balance_factors(const Tensor& gate_bn, const Tensor& gate_in);

/// alpha * x_bn + (1 - alpha) * x_in with alpha[N,C] spread over H,W.
Tensor mix_normalized(const Tensor& x_bn, const Tensor& x_in, const Tensor& alpha);

/// mix_normalized followed by the per-channel affine (gamma, beta).
Tensor fuse_normalized(const Tensor& x_bn, const Tensor& x_in, const Tensor& alpha, const Tensor& gamma,
                       const Tensor& beta);

/// Learnable tensors of one normalization layer. Fields a variant does not
/// use stay undefined.
struct NormParams {
  Tensor gamma;       // [C]
  Tensor beta;        // [C]
  Tensor descriptor;  // W   [d,C]  AFNM
  Tensor gate_bn;     // W_B [C,d]  AFNM
  Tensor gate_in;     // W_I [C,d]  AFNM
  Tensor rho;         // [C]        BIN, kept in [0,1]
};

/// One normalization layer. For the AFNM variant this is the module state:
/// descriptor, both gate heads, the shared post-fusion affine and the BN
/// running statistics.
struct NormState {
  NormVariant variant = NormVariant::BN;
  std::size_t channels = 0;
  std::size_t bottleneck = 0;
  NormParams params;
  BnState bn;
};

using AfnmState = NormState;

/// d = max(C/8, 4).
std::size_t afnm_bottleneck(std::size_t channels);

/// Fresh layer: gate heads zero so every alpha starts at 0.5, descriptor
/// uniform in +-1/sqrt(C), unit affine, BIN gate at 0.5.
NormState make_norm_state(NormVariant variant, std::size_t channels, Rng& rng, double eps = 1e-5,
                          double stat_momentum = 0.9);

struct NormOutput {
  Tensor y;
  Tensor alpha;  // [N,C], AFNM only
};

NormOutput afnm_forward(const Tensor& x, const NormParams& params, BnState& bn, Mode mode,
                        bool update_stats = true);
NormOutput afnm_forward(const Tensor& x, NormState& state, Mode mode, bool update_stats = true);

NormOutput variant_forward(const Tensor& x, NormVariant variant, const NormParams& params, BnState& bn,
                           Mode mode, bool update_stats = true);
NormOutput variant_forward(const Tensor& x, NormState& state, Mode mode, bool update_stats = true);

/// Project a BIN gate back onto [0,1] after an optimizer step.
void clip_bin_gate(Tensor& rho);

}  // namespace anrl
