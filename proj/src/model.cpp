#include "anrl/model.hpp"

#include <cmath>
#include <stdexcept>

#include "anrl/random.hpp"

namespace anrl {

namespace {

Tensor uniform_param(Shape shape, double bound, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(-bound, bound);
  return Tensor::parameter(std::move(shape), std::move(v));
}

void add_norm_params(ParamStore& store, const std::string& prefix, NormState& s) {
  const auto& p = s.params;
  store.add(prefix + "gamma", p.gamma, Partition::F);
  store.add(prefix + "beta", p.beta, Partition::F);
  if (p.descriptor.defined()) store.add(prefix + "W", p.descriptor, Partition::F);
  if (p.gate_bn.defined()) store.add(prefix + "W_B", p.gate_bn, Partition::F);
  if (p.gate_in.defined()) store.add(prefix + "W_I", p.gate_in, Partition::F);
  if (p.rho.defined()) store.add(prefix + "rho", p.rho, Partition::F);
}

}  // namespace

void NetworkConfig::validate() const {
  if (in_channels == 0) throw std::invalid_argument("NetworkConfig: in_channels must be positive");
  if (block_channel_widths.size() < 2) throw std::invalid_argument("NetworkConfig: need at least 2 blocks");
  for (auto w : block_channel_widths) {
    if (w == 0) throw std::invalid_argument("NetworkConfig: block widths must be positive");
  }
  if (norm_variant.size() != 1 && norm_variant.size() != block_channel_widths.size()) {
    throw std::invalid_argument("NetworkConfig: norm_variant needs 1 or " + std::to_string(block_channel_widths.size()) +
                                " entries");
  }
  if (embed_dim != 0 && embed_dim != block_channel_widths.back()) {
    throw std::invalid_argument("NetworkConfig: embed_dim must equal the last block width");
  }
  if (depth_map_side == 0 || input_side == 0 || input_side % depth_map_side != 0) {
    throw std::invalid_argument("NetworkConfig: depth_map_side must divide input_side");
  }
  if (input_side < 3) throw std::invalid_argument("NetworkConfig: input_side too small");
  if (block_sides().back() % depth_map_side != 0) {
    throw std::invalid_argument("NetworkConfig: final feature side " + std::to_string(block_sides().back()) +
                                " is not a multiple of depth_map_side");
  }
}

NormVariant NetworkConfig::variant_of(std::size_t block) const {
  return norm_variant.size() == 1 ? norm_variant[0] : norm_variant.at(block);
}

std::vector<std::size_t> NetworkConfig::block_sides() const {
  std::vector<std::size_t> sides;
  std::size_t s = input_side;
  for (std::size_t b = 0; b < block_channel_widths.size(); ++b) {
    if (s / 2 >= depth_map_side && s % 2 == 0) s /= 2;
    sides.push_back(s);
  }
  return sides;
}

bool NetworkConfig::uses_afnm() const {
  for (std::size_t b = 0; b < block_channel_widths.size(); ++b) {
    if (variant_of(b) == NormVariant::AFNM) return true;
  }
  return false;
}

std::string Model::block_prefix(std::size_t block) { return "block" + std::to_string(block) + "."; }

NormParams Model::norm_params(const ParamStore& store, std::size_t block) const {
  const std::string p = block_prefix(block) + "norm.";
  NormParams out;
  out.gamma = store.get(p + "gamma");
  out.beta = store.get(p + "beta");
  if (store.contains(p + "W")) out.descriptor = store.get(p + "W");
  if (store.contains(p + "W_B")) out.gate_bn = store.get(p + "W_B");
  if (store.contains(p + "W_I")) out.gate_in = store.get(p + "W_I");
  if (store.contains(p + "rho")) out.rho = store.get(p + "rho");
  return out;
}

Model build_model(const NetworkConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Model m;
  m.config = cfg;
  Rng rng(derive_seed(seed, 0x4D4F44454CULL));
  std::size_t in = cfg.in_channels;
  for (std::size_t b = 0; b < cfg.block_channel_widths.size(); ++b) {
    const std::size_t out = cfg.block_channel_widths[b];
    const std::string prefix = Model::block_prefix(b);
    m.params.add(prefix + "conv.weight", uniform_param({out, in, 3, 3}, std::sqrt(6.0 / (9.0 * in)), rng),
                 Partition::Base);
    NormState ns = make_norm_state(cfg.variant_of(b), out, rng, cfg.norm_eps, cfg.stat_momentum);
    add_norm_params(m.params, prefix + "norm.", ns);
    m.bn.push_back(ns.bn);
    in = out;
  }
  const std::size_t d = cfg.embedding_dim();
  m.params.add("head.cls.weight", uniform_param({d, 1}, 1.0 / std::sqrt(static_cast<double>(d)), rng), Partition::Base);
  m.params.add("head.cls.bias", Tensor::parameter({1}, {0.0}), Partition::Base);
  m.params.add("head.depth.weight", uniform_param({1, d, 3, 3}, std::sqrt(3.0 / (9.0 * d)), rng), Partition::Base);
  m.params.add("head.depth.bias", Tensor::parameter({1}, {0.0}), Partition::Base);
  return m;
}

ForwardTrace forward(const Model& model, const ParamStore& params, std::vector<BnState>& bn, const Tensor& x,
                     Mode mode, bool update_stats) {
  const auto& cfg = model.config;
  if (x.rank() != 4 || x.dim(1) != cfg.in_channels || x.dim(2) != cfg.input_side || x.dim(3) != cfg.input_side) {
    throw ShapeError("forward: expected [N," + std::to_string(cfg.in_channels) + "," + std::to_string(cfg.input_side) +
                     "," + std::to_string(cfg.input_side) + "], got " + shape_str(x.shape()));
  }
  if (bn.size() != cfg.block_channel_widths.size()) throw std::invalid_argument("forward: BN state count mismatch");
  ForwardTrace trace;
  Tensor h = x;
  std::size_t side = cfg.input_side;
  const auto sides = cfg.block_sides();
  for (std::size_t b = 0; b < cfg.block_channel_widths.size(); ++b) {
    const std::string prefix = Model::block_prefix(b);
    h = conv2d(h, params.get(prefix + "conv.weight"), 1, 1);
    NormOutput n = variant_forward(h, cfg.variant_of(b), model.norm_params(params, b), bn[b], mode, update_stats);
    h = relu(n.y);
    if (sides[b] != side) {
      h = avg_pool2d(h, side / sides[b]);
      side = sides[b];
    }
    if (n.alpha.defined()) trace.alphas.push_back(n.alpha);
  }
  trace.embedding = global_avg_pool(h);
  const std::size_t batch = x.dim(0);
  Tensor logit = add_row_bias(matmul(trace.embedding, params.get("head.cls.weight")), params.get("head.cls.bias"));
  trace.logit = reshape(logit, {batch});
  Tensor dmap = add_channel_bias(conv2d(h, params.get("head.depth.weight"), 1, 1), params.get("head.depth.bias"));
  if (side != cfg.depth_map_side) dmap = avg_pool2d(dmap, side / cfg.depth_map_side);
  trace.depth_pred = sigmoid(dmap);
  return trace;
}

ForwardTrace forward(Model& model, const Tensor& x, Mode mode, bool update_stats) {
  return forward(model, model.params, model.bn, x, mode, update_stats);
}

std::vector<double> liveness_scores(const ForwardTrace& trace) {
  std::vector<double> s;
  for (double z : trace.logit.data()) s.push_back(z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)));
  return s;
}

}  // namespace anrl
