#include "anrl/gradcheck.hpp"

#include <memory>

#include "anrl/dcc_losses.hpp"
#include "anrl/model.hpp"
#include "anrl/norm_layers.hpp"
#include "anrl/random.hpp"

namespace anrl {

namespace {

Tensor random_leaf(Shape shape, Rng& rng, double scale = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = scale * rng.normal();
  return Tensor::parameter(std::move(shape), std::move(v));
}

std::vector<double> random_weights(std::size_t n, Rng& rng) {
  std::vector<double> w(n);
  for (auto& x : w) x = rng.normal();
  return w;
}

// Projects an output onto fixed random weights so every element matters.
std::function<Tensor()> projected(std::function<Tensor()> f, std::size_t n, Rng& rng) {
  auto w = std::make_shared<std::vector<double>>(random_weights(n, rng));
  return [f = std::move(f), w] { return weighted_sum(f(), *w); };
}

NormParams random_norm_params(NormVariant v, std::size_t c, Rng& rng) {
  Rng init(rng.next_u64());
  NormState s = make_norm_state(v, c, init);
  NormParams p = s.params;
  p.gamma = random_leaf({c}, rng, 0.5);
  p.beta = random_leaf({c}, rng, 0.5);
  if (v == NormVariant::AFNM) {
    p.descriptor = random_leaf({s.bottleneck, c}, rng, 0.8);
    p.gate_bn = random_leaf({c, s.bottleneck}, rng, 0.8);
    p.gate_in = random_leaf({c, s.bottleneck}, rng, 0.8);
  }
  if (v == NormVariant::BIN) {
    std::vector<double> r(c);
    for (auto& x : r) x = rng.uniform(0.2, 0.8);
    p.rho = Tensor::parameter({c}, r);
  }
  return p;
}

std::vector<Tensor> norm_leaves(const NormParams& p) {
  std::vector<Tensor> out{p.gamma, p.beta};
  for (const auto* t : {&p.descriptor, &p.gate_bn, &p.gate_in, &p.rho}) {
    if (t->defined()) out.push_back(*t);
  }
  return out;
}

EmbeddingBatch random_embeddings(Tensor features, Rng& rng, std::size_t domains) {
  EmbeddingBatch b;
  b.features = features;
  for (std::size_t i = 0; i < features.dim(0); ++i) {
    b.domain_ids.push_back(static_cast<int>(i % domains));
    b.labels.push_back(static_cast<int>((i / domains) % 2));
  }
  (void)rng;
  return b;
}

CentroidBank random_bank(std::size_t dim, std::size_t domains, Rng& rng) {
  CentroidBank bank(0.9, dim);
  // Seed every key with one synthetic observation.
  const std::size_t n = 2 * domains;
  std::vector<double> f(n * dim);
  for (auto& x : f) x = rng.normal();
  EmbeddingBatch b;
  b.features = Tensor::from({n, dim}, f);
  for (std::size_t i = 0; i < n; ++i) {
    b.domain_ids.push_back(static_cast<int>(i % domains));
    b.labels.push_back(static_cast<int>(i < domains));
  }
  bank.update(b);
  return bank;
}

}  // namespace

std::vector<GradCase> gradient_cases(std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x47524144ULL));
  std::vector<GradCase> cases;

  {
    Tensor x = random_leaf({2, 3, 6, 6}, rng), w = random_leaf({4, 3, 3, 3}, rng, 0.4);
    cases.push_back({"conv2d_pad1", projected([=] { return conv2d(x, w, 1, 1); }, 2 * 4 * 6 * 6, rng), {x, w}});
    Tensor x2 = random_leaf({2, 2, 7, 7}, rng), w2 = random_leaf({3, 2, 3, 3}, rng, 0.4);
    cases.push_back({"conv2d_stride2", projected([=] { return conv2d(x2, w2, 2, 0); }, 2 * 3 * 3 * 3, rng), {x2, w2}});
  }
  for (NormVariant v : all_variants()) {
    const std::size_t c = 8;
    Tensor x = random_leaf({3, c, 4, 4}, rng, 1.5);
    NormParams p = random_norm_params(v, c, rng);
    auto bn = std::make_shared<BnState>(BnState::init(c));
    auto params = norm_leaves(p);
    params.insert(params.begin(), x);
    cases.push_back({std::string("norm_") + variant_name(v),
                     projected([=] { return variant_forward(x, v, p, *bn, Mode::Train, false).y; }, 3 * c * 16, rng),
                     params});
  }
  {
    Tensor x = random_leaf({3, 4, 3, 3}, rng, 1.5);
    auto bn = std::make_shared<BnState>(BnState::init(4));
    cases.push_back({"batch_norm", projected([=] { return batch_norm(x, *bn, Mode::Train, false); }, 3 * 4 * 9, rng), {x}});
    Tensor x2 = random_leaf({2, 3, 3, 3}, rng, 1.5);
    cases.push_back({"instance_norm", projected([=] { return instance_norm(x2); }, 2 * 3 * 9, rng), {x2}});
  }
  {
    // The balance-factor path on its own.
    Tensor s = random_leaf({3, 8}, rng), w = random_leaf({4, 8}, rng), wb = random_leaf({8, 4}, rng), wi = random_leaf({8, 4}, rng);
    cases.push_back({"afnm_alpha",
                     projected(
                         [=] {
                           auto g = branch_gates(compact_descriptor(s, w), wb, wi);
                           return balance_factors(g.bn, g.in);
                         },
                         3 * 8, rng),
                     {s, w, wb, wi}});
  }
  {
    Tensor e = random_leaf({5, 6}, rng), w = random_leaf({6, 1}, rng), b = random_leaf({1}, rng);
    cases.push_back({"head_classifier",
                     projected([=] { return reshape(add_row_bias(matmul(e, w), b), {5}); }, 5, rng), {e, w, b}});
    Tensor f = random_leaf({2, 4, 8, 8}, rng), dw = random_leaf({1, 4, 3, 3}, rng, 0.4), db = random_leaf({1}, rng);
    cases.push_back({"head_depth",
                     projected([=] { return sigmoid(avg_pool2d(add_channel_bias(conv2d(f, dw, 1, 1), db), 2)); }, 2 * 16, rng),
                     {f, dw, db}});
    Tensor g = random_leaf({2, 3, 4, 4}, rng);
    cases.push_back({"pool_relu", projected([=] { return global_avg_pool(relu(g)); }, 6, rng), {g}});
  }
  {
    const std::size_t dim = 5, domains = 3;
    auto bank = std::make_shared<CentroidBank>(random_bank(dim, domains, rng));
    Tensor f = random_leaf({12, dim}, rng);
    auto batch = std::make_shared<EmbeddingBatch>(random_embeddings(f, rng, domains));
    cases.push_back({"loss_idc", [=] { return idc_loss(*batch, *bank); }, {f}});
    cases.push_back({"loss_ics", [=] { return ics_loss(*batch, *bank); }, {f}});
    Tensor p = random_leaf({3, 1, 4, 4}, rng), t = Tensor::from({3, 1, 4, 4}, random_weights(48, rng));
    cases.push_back({"loss_depth", [=] { return depth_loss(p, t); }, {p}});
    Tensor z = random_leaf({6}, rng, 2.0);
    cases.push_back({"loss_cls", [=] { return cls_loss(z, {1, 0, 1, 1, 0, 0}); }, {z}});
  }
  {
    NetworkConfig cfg;
    cfg.block_channel_widths = {4, 4};
    cfg.input_side = 8;
    cfg.depth_map_side = 4;
    cfg.norm_variant = {NormVariant::AFNM};
    auto model = std::make_shared<Model>(build_model(cfg, rng.next_u64()));
    // Non-zero gates so the α path carries gradient.
    for (const auto& e : model->params.entries()) {
      if (e.name.find("W_") != std::string::npos) {
        Tensor t = e.value;
        for (auto& v : t.mutable_data()) v = 0.5 * rng.normal();
      }
    }
    const std::size_t n = 4;
    std::vector<double> img(n * 6 * 64);
    for (auto& v : img) v = rng.uniform();
    Tensor x = Tensor::from({n, 6, 8, 8}, img);
    std::vector<double> dep(n * 16);
    for (auto& v : dep) v = rng.uniform();
    Tensor target = Tensor::from({n, 1, 4, 4}, dep);
    std::vector<int> labels{1, 0, 1, 0};
    std::vector<Tensor> params;
    for (const auto& e : model->params.entries()) params.push_back(e.value);
    cases.push_back({"network_end_to_end",
                     [=] {
                       auto bn = model->bn;
                       ForwardTrace t = forward(*model, model->params, bn, x, Mode::Train, false);
                       return add(cls_loss(t.logit, labels), depth_loss(t.depth_pred, target));
                     },
                     params, 1e-5});
  }
  return cases;
}

std::vector<GradResult> run_gradient_suite(std::uint64_t seed, double step) {
  std::vector<GradResult> out;
  for (auto& c : gradient_cases(seed)) {
    out.push_back({c.name, finite_diff_check(c.loss, c.params, step), c.tolerance});
  }
  return out;
}

}  // namespace anrl
