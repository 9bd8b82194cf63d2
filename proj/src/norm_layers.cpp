#include "anrl/norm_layers.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace anrl {

namespace {

struct Dims {
  std::size_t n, c, hw;
};

Dims dims4(const char* op, const Tensor& x) {
  if (x.rank() != 4) throw ShapeError(std::string(op) + ": expected [N,C,H,W], got " + shape_str(x.shape()));
  return {x.dim(0), x.dim(1), x.dim(2) * x.dim(3)};
}

// Backward of y = (x - mean) * inv_std with statistics taken over each group;
// `index(g, j)` maps member j of group g to a flat offset. BN groups are
// channels over (N,H,W), IN groups are single planes.
template <typename Index>
void normalize_backward(const std::vector<double>& x_hat, const std::vector<double>& inv_std,
                        std::size_t groups, std::size_t members, Index index, const std::vector<double>& grad_out,
                        std::vector<double>& grad_in) {
  const double m = static_cast<double>(members);
  for (std::size_t g = 0; g < groups; ++g) {
    double sum_g = 0.0, sum_gx = 0.0;
    for (std::size_t j = 0; j < members; ++j) {
      const std::size_t at = index(g, j);
      sum_g += grad_out[at];
      sum_gx += grad_out[at] * x_hat[at];
    }
    for (std::size_t j = 0; j < members; ++j) {
      const std::size_t at = index(g, j);
      grad_in[at] += inv_std[g] / m * (m * grad_out[at] - sum_g - x_hat[at] * sum_gx);
    }
  }
}

Tensor constant_alpha(std::size_t n, std::size_t c, const std::vector<double>& per_channel) {
  std::vector<double> a(n * c);
  for (std::size_t s = 0; s < n; ++s) std::copy(per_channel.begin(), per_channel.end(), a.begin() + s * c);
  return Tensor::from({n, c}, std::move(a));
}

void require(const Tensor& t, const char* field, NormVariant v) {
  if (!t.defined()) {
    throw std::invalid_argument(std::string("norm layer: variant ") + variant_name(v) + " needs parameter " + field);
  }
}

}  // namespace

const char* variant_name(NormVariant v) {
  switch (v) {
    case NormVariant::BN: return "BN";
    case NormVariant::IN: return "IN";
    case NormVariant::IN_BN_HALF: return "IN_BN_HALF";
    case NormVariant::BIN: return "BIN";
    case NormVariant::IBN: return "IBN";
    case NormVariant::AFNM: return "AFNM";
  }
  return "?";
}

NormVariant parse_variant(const std::string& name) {
  for (auto v : all_variants()) {
    if (name == variant_name(v)) return v;
  }
  throw std::invalid_argument("unknown normalization variant '" + name + "'");
}

std::vector<NormVariant> all_variants() {
  return {NormVariant::BN, NormVariant::IN, NormVariant::IN_BN_HALF,
          NormVariant::BIN, NormVariant::IBN, NormVariant::AFNM};
}

BnState BnState::init(std::size_t channels, double eps, double stat_momentum) {
  if (!(eps > 0.0)) throw std::invalid_argument("BnState: eps must be positive");
  if (stat_momentum < 0.0 || stat_momentum >= 1.0) throw std::invalid_argument("BnState: momentum must be in [0,1)");
  BnState s;
  s.running_mean.assign(channels, 0.0);
  s.running_var.assign(channels, 1.0);
  s.eps = eps;
  s.stat_momentum = stat_momentum;
  return s;
}

Tensor batch_norm(const Tensor& x, BnState& state, Mode mode, bool update_stats) {
  const auto [n, c, hw] = dims4("batch_norm", x);
  if (state.running_mean.size() != c || state.running_var.size() != c) {
    throw ShapeError("batch_norm: channel axis mismatch: input has C=" + std::to_string(c) + ", state has " +
                     std::to_string(state.running_mean.size()));
  }
  auto in = x.data();
  std::vector<double> out(x.numel());
  auto index = [n = n, c = c, hw = hw](std::size_t ch, std::size_t j) {
    const std::size_t s = j / hw, i = j % hw;
    return (s * c + ch) * hw + i;
  };
  (void)n;

  if (mode == Mode::Eval) {
    std::vector<double> inv(c);
    for (std::size_t ch = 0; ch < c; ++ch) inv[ch] = 1.0 / std::sqrt(state.running_var[ch] + state.eps);
    const auto mean = state.running_mean;
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t j = 0; j < n * hw; ++j) {
        const std::size_t at = index(ch, j);
        out[at] = (in[at] - mean[ch]) * inv[ch];
      }
    return make_result(x.shape(), std::move(out), {x}, [inv, index, c = c, m = n * hw](detail::Node& self) {
      auto& nx = self.inputs[0];
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t j = 0; j < m; ++j) {
          const std::size_t at = index(ch, j);
          nx->grad[at] += self.grad[at] * inv[ch];
        }
    });
  }

  if (n < 2) throw std::invalid_argument("batch_norm: train mode needs N >= 2, got N=" + std::to_string(n));
  const std::size_t m = n * hw;
  std::vector<double> inv(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double mu = 0.0;
    for (std::size_t j = 0; j < m; ++j) mu += in[index(ch, j)];
    mu /= static_cast<double>(m);
    double var = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      const double d = in[index(ch, j)] - mu;
      var += d * d;
    }
    var /= static_cast<double>(m);
    inv[ch] = 1.0 / std::sqrt(var + state.eps);
    for (std::size_t j = 0; j < m; ++j) {
      const std::size_t at = index(ch, j);
      out[at] = (in[at] - mu) * inv[ch];
    }
    if (update_stats) {
      const double k = state.stat_momentum;
      const double unbiased = var * static_cast<double>(m) / static_cast<double>(m - 1);
      state.running_mean[ch] = k * state.running_mean[ch] + (1.0 - k) * mu;
      state.running_var[ch] = k * state.running_var[ch] + (1.0 - k) * unbiased;
    }
  }
  return make_result(x.shape(), out, {x}, [x_hat = out, inv, index, c = c, m](detail::Node& self) {
    normalize_backward(x_hat, inv, c, m, index, self.grad, self.inputs[0]->grad);
  });
}

Tensor instance_norm(const Tensor& x, double eps) {
  const auto [n, c, hw] = dims4("instance_norm", x);
  if (hw < 2) throw std::invalid_argument("instance_norm: needs H*W >= 2, got " + std::to_string(hw));
  if (!(eps > 0.0)) throw std::invalid_argument("instance_norm: eps must be positive");
  const std::size_t planes = n * c;
  auto in = x.data();
  std::vector<double> out(x.numel());
  std::vector<double> inv(planes);
  for (std::size_t p = 0; p < planes; ++p) {
    double mu = 0.0;
    for (std::size_t i = 0; i < hw; ++i) mu += in[p * hw + i];
    mu /= static_cast<double>(hw);
    double var = 0.0;
    for (std::size_t i = 0; i < hw; ++i) {
      const double d = in[p * hw + i] - mu;
      var += d * d;
    }
    var /= static_cast<double>(hw);
    inv[p] = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < hw; ++i) out[p * hw + i] = (in[p * hw + i] - mu) * inv[p];
  }
  auto index = [hw = hw](std::size_t p, std::size_t i) { return p * hw + i; };
  return make_result(x.shape(), out, {x}, [x_hat = out, inv, index, planes, hw = hw](detail::Node& self) {
    normalize_backward(x_hat, inv, planes, hw, index, self.grad, self.inputs[0]->grad);
  });
}

Tensor channel_statistics(const Tensor& x) { return global_avg_pool(x); }

Tensor compact_descriptor(const Tensor& stats, const Tensor& descriptor) {
  if (stats.rank() != 2 || descriptor.rank() != 2 || descriptor.dim(1) != stats.dim(1)) {
    throw ShapeError("compact_descriptor: S " + shape_str(stats.shape()) + " incompatible with W " +
                     shape_str(descriptor.shape()) + " on the channel axis");
  }
  return relu(matmul(stats, transpose(descriptor)));
}

BranchGates branch_gates(const Tensor& z, const Tensor& gate_bn, const Tensor& gate_in) {
  auto check = [&](const Tensor& w, const char* name) {
    if (z.rank() != 2 || w.rank() != 2 || w.dim(1) != z.dim(1)) {
      throw ShapeError(std::string("branch_gates: ") + name + " " + shape_str(w.shape()) +
                       " incompatible with Z " + shape_str(z.shape()) + " on the bottleneck axis");
    }
  };
  check(gate_bn, "W_B");
  check(gate_in, "W_I");
  if (gate_bn.shape() != gate_in.shape()) throw ShapeError("branch_gates: W_B and W_I differ in shape");
  return {sigmoid(matmul(z, transpose(gate_bn))), sigmoid(matmul(z, transpose(gate_in)))};
}

Tensor balance_factors(const Tensor& gate_bn, const Tensor& gate_in) {
  return div(gate_bn, add(gate_bn, gate_in));
}

Tensor mix_normalized(const Tensor& x_bn, const Tensor& x_in, const Tensor& alpha) {
  const auto [n, c, hw] = dims4("mix_normalized", x_bn);
  if (x_in.shape() != x_bn.shape()) {
    throw ShapeError("mix_normalized: branch shapes differ " + shape_str(x_bn.shape()) + " vs " +
                     shape_str(x_in.shape()));
  }
  if (alpha.rank() != 2 || alpha.dim(0) != n || alpha.dim(1) != c) {
    throw ShapeError("mix_normalized: alpha must be [N,C]=" + shape_str({n, c}) + ", got " + shape_str(alpha.shape()));
  }
  auto b = x_bn.data(), i = x_in.data(), a = alpha.data();
  std::vector<double> out(x_bn.numel());
  for (std::size_t p = 0; p < n * c; ++p)
    for (std::size_t k = 0; k < hw; ++k) {
      const std::size_t at = p * hw + k;
      out[at] = a[p] * b[at] + (1.0 - a[p]) * i[at];
    }
  return make_result(x_bn.shape(), std::move(out), {x_bn, x_in, alpha}, [n = n, c = c, hw = hw](detail::Node& self) {
    auto& nb = self.inputs[0];
    auto& ni = self.inputs[1];
    auto& na = self.inputs[2];
    for (std::size_t p = 0; p < n * c; ++p) {
      const double a = na->data[p];
      double ga = 0.0;
      for (std::size_t k = 0; k < hw; ++k) {
        const std::size_t at = p * hw + k;
        const double g = self.grad[at];
        if (nb->requires_grad) nb->grad[at] += a * g;
        if (ni->requires_grad) ni->grad[at] += (1.0 - a) * g;
        ga += g * (nb->data[at] - ni->data[at]);
      }
      if (na->requires_grad) na->grad[p] += ga;
    }
  });
}

Tensor fuse_normalized(const Tensor& x_bn, const Tensor& x_in, const Tensor& alpha, const Tensor& gamma,
                       const Tensor& beta) {
  return channel_affine(mix_normalized(x_bn, x_in, alpha), gamma, beta);
}

std::size_t afnm_bottleneck(std::size_t channels) { return std::max<std::size_t>(channels / 8, 4); }

NormState make_norm_state(NormVariant variant, std::size_t channels, Rng& rng, double eps, double stat_momentum) {
  if (channels == 0) throw std::invalid_argument("make_norm_state: channels must be positive");
  NormState s;
  s.variant = variant;
  s.channels = channels;
  s.bn = BnState::init(channels, eps, stat_momentum);
  s.params.gamma = Tensor::parameter({channels}, std::vector<double>(channels, 1.0));
  s.params.beta = Tensor::parameter({channels}, std::vector<double>(channels, 0.0));
  if (variant == NormVariant::AFNM) {
    const std::size_t d = afnm_bottleneck(channels);
    s.bottleneck = d;
    const double bound = 1.0 / std::sqrt(static_cast<double>(channels));
    std::vector<double> w(d * channels);
    for (auto& v : w) v = rng.uniform(-bound, bound);
    s.params.descriptor = Tensor::parameter({d, channels}, std::move(w));
    s.params.gate_bn = Tensor::parameter({channels, d}, std::vector<double>(channels * d, 0.0));
    s.params.gate_in = Tensor::parameter({channels, d}, std::vector<double>(channels * d, 0.0));
  } else if (variant == NormVariant::BIN) {
    s.params.rho = Tensor::parameter({channels}, std::vector<double>(channels, 0.5));
  }
  return s;
}

NormOutput afnm_forward(const Tensor& x, const NormParams& params, BnState& bn, Mode mode, bool update_stats) {
  require(params.descriptor, "W", NormVariant::AFNM);
  require(params.gate_bn, "W_B", NormVariant::AFNM);
  require(params.gate_in, "W_I", NormVariant::AFNM);
  require(params.gamma, "gamma", NormVariant::AFNM);
  require(params.beta, "beta", NormVariant::AFNM);
  Tensor x_bn = batch_norm(x, bn, mode, update_stats);
  Tensor x_in = instance_norm(x, bn.eps);
  Tensor z = compact_descriptor(channel_statistics(x), params.descriptor);
  BranchGates gates = branch_gates(z, params.gate_bn, params.gate_in);
  Tensor alpha = balance_factors(gates.bn, gates.in);
  return {fuse_normalized(x_bn, x_in, alpha, params.gamma, params.beta), alpha};
}

NormOutput afnm_forward(const Tensor& x, NormState& state, Mode mode, bool update_stats) {
  if (state.variant != NormVariant::AFNM) {
    throw std::invalid_argument(std::string("afnm_forward: state holds variant ") + variant_name(state.variant));
  }
  return afnm_forward(x, state.params, state.bn, mode, update_stats);
}

NormOutput variant_forward(const Tensor& x, NormVariant variant, const NormParams& params, BnState& bn, Mode mode,
                           bool update_stats) {
  require(params.gamma, "gamma", variant);
  require(params.beta, "beta", variant);
  const auto [n, c, hw] = dims4("variant_forward", x);
  (void)hw;
  switch (variant) {
    case NormVariant::BN:
      return {channel_affine(batch_norm(x, bn, mode, update_stats), params.gamma, params.beta), {}};
    case NormVariant::IN:
      return {channel_affine(instance_norm(x, bn.eps), params.gamma, params.beta), {}};
    case NormVariant::IN_BN_HALF: {
      Tensor alpha = constant_alpha(n, c, std::vector<double>(c, 0.5));
      return {fuse_normalized(batch_norm(x, bn, mode, update_stats), instance_norm(x, bn.eps), alpha, params.gamma,
                              params.beta),
              {}};
    }
    case NormVariant::BIN: {
      require(params.rho, "rho", variant);
      if (params.rho.rank() != 1 || params.rho.dim(0) != c) throw ShapeError("variant_forward: rho channel axis mismatch");
      Tensor alpha = broadcast_rows(params.rho, n);
      return {fuse_normalized(batch_norm(x, bn, mode, update_stats), instance_norm(x, bn.eps), alpha, params.gamma,
                              params.beta),
              {}};
    }
    case NormVariant::IBN: {
      // Channels [0, C/2) take IN, the rest BN.
      std::vector<double> mask(c, 1.0);
      for (std::size_t ch = 0; ch < c / 2; ++ch) mask[ch] = 0.0;
      Tensor alpha = constant_alpha(n, c, mask);
      return {fuse_normalized(batch_norm(x, bn, mode, update_stats), instance_norm(x, bn.eps), alpha, params.gamma,
                              params.beta),
              {}};
    }
    case NormVariant::AFNM:
      return afnm_forward(x, params, bn, mode, update_stats);
  }
  throw std::logic_error("variant_forward: unreachable");
}

NormOutput variant_forward(const Tensor& x, NormState& state, Mode mode, bool update_stats) {
  return variant_forward(x, state.variant, state.params, state.bn, mode, update_stats);
}

void clip_bin_gate(Tensor& rho) {
  for (auto& v : rho.mutable_data()) v = std::clamp(v, 0.0, 1.0);
}

}  // namespace anrl
