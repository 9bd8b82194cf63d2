#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <map>

#include "anrl/meta_trainer.hpp"
#include "anrl/random.hpp"

using namespace anrl;

namespace {

double norm2(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

struct Fixture {
  TrainingSet data;
  Model model;

  explicit Fixture(NetworkConfig net, ImageGeometry geom, std::uint64_t seed = 1)
      : data(TrainingSet::from_protocol(build_protocol(4, 3, {16, 4}, 2), default_domain_specs(), geom)),
        model(build_model(net, seed)) {}
};

NetworkConfig tiny_net() {
  NetworkConfig c;
  c.block_channel_widths = {2, 2};
  c.norm_variant = {NormVariant::BN};
  c.input_side = 8;
  c.depth_map_side = 4;
  return c;
}

NetworkConfig small_net(NormVariant v = NormVariant::AFNM) {
  NetworkConfig c;
  c.block_channel_widths = {4, 8};
  c.norm_variant = {v};
  c.input_side = 16;
  c.depth_map_side = 4;
  return c;
}

DomainBatch batch_of(const TrainingSet& data, const std::set<int>& domains, std::size_t per, std::uint64_t seed) {
  DomainSampler s(data, seed);
  return materialize(s.draw(domains, per), data.specs, data.geom);
}

}  // namespace

TEST_CASE("exact meta-gradient matches the analytic form on a quartic") {
  // L_trn = sum a_i t_i^4 / 4 + t^T B t / 2, so H = diag(3 a_i t_i^2) + B.
  Rng rng(4);
  const std::size_t n = 6;
  std::vector<double> a(n), theta(n), g_val(n), bmat(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    a[i] = rng.uniform(0.5, 2.0);
    theta[i] = rng.uniform(-1.0, 1.0);
    g_val[i] = rng.normal();
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) bmat[i * n + j] = bmat[j * n + i] = rng.uniform(-0.5, 0.5);
  auto grad = [&](const std::vector<double>& t) {
    std::vector<double> g(n);
    for (std::size_t i = 0; i < n; ++i) {
      g[i] = a[i] * t[i] * t[i] * t[i];
      for (std::size_t j = 0; j < n; ++j) g[i] += bmat[i * n + j] * t[j];
    }
    return g;
  };
  const double beta1 = 0.3;
  const auto g_trn = grad(theta);
  std::vector<double> expected(n);
  for (std::size_t j = 0; j < n; ++j) {
    double hv = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double h = bmat[i * n + j] + (i == j ? 3.0 * a[i] * theta[i] * theta[i] : 0.0);
      hv += h * g_val[i];
    }
    expected[j] = g_trn[j] + g_val[j] - beta1 * hv;
  }
  const auto exact = meta_gradient_exact(theta, g_trn, g_val, beta1, grad, 1e-5);
  CHECK(max_abs_diff(exact, expected) < 1e-4);

  // First order drops beta1 H^T g_val and nothing else.
  const auto first = meta_gradient_first_order(g_trn, g_val);
  double h_norm = 0.0;  // Frobenius bound on the spectral norm
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double h = bmat[i * n + j] + (i == j ? 3.0 * a[i] * theta[i] * theta[i] : 0.0);
      h_norm += h * h;
    }
  std::vector<double> gap(n);
  for (std::size_t i = 0; i < n; ++i) gap[i] = first[i] - exact[i];
  CHECK(norm2(gap) <= beta1 * std::sqrt(h_norm) * norm2(g_val) * (1.0 + 1e-6));
  CHECK(norm2(gap) > 0.0);
}

TEST_CASE("exact meta-gradient refuses large parameter sets") {
  std::vector<double> theta(kExactMetaMaxDim + 1, 0.0);
  auto grad = [](const std::vector<double>& t) { return t; };
  CHECK_THROWS(meta_gradient_exact(theta, theta, theta, 0.1, grad, 1e-5));
  std::vector<double> ok(kExactMetaMaxDim, 0.0);
  CHECK_NOTHROW(meta_gradient_exact(ok, ok, ok, 0.1, grad, 1e-5));
}

TEST_CASE("Adam follows the bias-corrected update") {
  Optimizer opt(OptimizerKind::Adam, 2, 0.1);
  std::vector<double> theta{0.5, -0.3};
  const std::vector<std::vector<double>> grads{{1.0, 0.2}, {-1.0, 0.4}, {2.0, -0.1}};
  const std::vector<std::vector<double>> expected{{0.4000000009999999, -0.39999999500000033},
                                                  {0.4052631588421051, -0.49651819453046164},
                                                  {0.3554389447994021, -0.5553788655784843}};
  for (std::size_t t = 0; t < 3; ++t) {
    opt.step(theta, grads[t]);
    CHECK(theta[0] == doctest::Approx(expected[t][0]).epsilon(1e-12));
    CHECK(theta[1] == doctest::Approx(expected[t][1]).epsilon(1e-12));
  }
  CHECK(opt.steps() == 3);
}

TEST_CASE("SGD step and length checks") {
  Optimizer sgd(OptimizerKind::Sgd, 2, 0.5);
  std::vector<double> theta{1.0, 2.0};
  sgd.step(theta, {2.0, -2.0});
  CHECK(theta == std::vector<double>{0.0, 3.0});
  CHECK_THROWS(sgd.step(theta, {1.0}));
}

TEST_CASE("domain split is a uniform one-out partition") {
  const std::set<int> domains{0, 1, 2};
  std::map<int, int> freq;
  const int n = 3000;
  for (int it = 0; it < n; ++it) {
    DomainSplit s = split_domains(domains, 17, static_cast<std::uint64_t>(it));
    REQUIRE(s.val.size() == 1);
    CHECK(s.trn.size() == 2);
    CHECK_FALSE(s.trn.count(*s.val.begin()));
    ++freq[*s.val.begin()];
    const DomainSplit again = split_domains(domains, 17, static_cast<std::uint64_t>(it));
    CHECK(again.val == s.val);
  }
  for (int d : domains) CHECK(std::abs(freq[d] / double(n) - 1.0 / 3.0) < 0.03);
  CHECK_THROWS(split_domains({0}, 1, 0));
}

TEST_CASE("sampler covers every sample once per epoch") {
  Fixture f(small_net(), {16, 4});
  DomainSampler s(f.data, 5);
  std::map<std::uint64_t, int> seen;
  for (int i = 0; i < 4; ++i)
    for (const auto& r : s.draw({0}, 4)) ++seen[r.id];
  CHECK(seen.size() == 16);
  CHECK(s.epoch(0) == 0);
  s.draw({0}, 1);
  CHECK(s.epoch(0) == 1);
  CHECK_THROWS(s.draw({3}, 1));
}

TEST_CASE("supervised terms sum per-domain means") {
  Fixture f(small_net(), {16, 4});
  MetaTrainer trainer(f.model, TrainConfig{}, f.data);
  DomainBatch b = batch_of(f.data, {0, 1, 2}, 4, 3);
  ForwardTrace t = forward(f.model, b.images, Mode::Train, false);
  LossParts parts = trainer.compose_loss(t, b, true, nullptr);
  std::map<int, double> cls_sum, dep_sum;
  std::map<int, int> count;
  const std::size_t dd = 16;
  for (std::size_t i = 0; i < b.size(); ++i) {
    const double z = t.logit.data()[i];
    const double p = 1.0 / (1.0 + std::exp(-z));
    cls_sum[b.domain_ids[i]] += -(b.labels[i] ? std::log(p) : std::log(1.0 - p));
    double sq = 0.0;
    for (std::size_t k = 0; k < dd; ++k) {
      const double e = t.depth_pred.data()[i * dd + k] - b.depth.data()[i * dd + k];
      sq += e * e;
    }
    dep_sum[b.domain_ids[i]] += sq;
    ++count[b.domain_ids[i]];
  }
  double cls = 0.0, dep = 0.0;
  for (auto& [d, c] : count) {
    cls += cls_sum[d] / c;
    dep += dep_sum[d] / c;
  }
  CHECK(parts.cls == doctest::Approx(cls).epsilon(1e-10));
  CHECK(parts.depth == doctest::Approx(dep).epsilon(1e-10));
  CHECK_FALSE(parts.idc_active);  // empty bank
  CHECK_FALSE(parts.ics_active);
  CHECK(parts.total == doctest::Approx(cls + dep).epsilon(1e-10));
}

TEST_CASE("unbalanced batches are rejected") {
  Fixture f(small_net(), {16, 4});
  MetaTrainer trainer(f.model, TrainConfig{}, f.data);
  DomainSampler s(f.data, 1);
  auto refs = s.draw({0}, 3);
  auto more = s.draw({1}, 2);
  refs.insert(refs.end(), more.begin(), more.end());
  DomainBatch b = materialize(refs, f.data.specs, f.data.geom);
  ForwardTrace t = forward(f.model, b.images, Mode::Train, false);
  CHECK_THROWS(trainer.compose_loss(t, b, false, nullptr));
}

TEST_CASE("meta phases reject batches from the wrong side of the split") {
  Fixture f(small_net(), {16, 4});
  MetaTrainer trainer(f.model, TrainConfig{}, f.data);
  DomainSplit split{{0, 1}, {2}};
  DomainBatch trn = batch_of(f.data, {0, 1}, 2, 1), val = batch_of(f.data, {2}, 2, 1);
  CHECK_THROWS(trainer.meta_train_step(val, split));
  MetaTrainResult mt = trainer.meta_train_step(trn, split);
  CHECK_THROWS(trainer.meta_test_loss(mt.shadow, trn, split));
  CHECK_NOTHROW(trainer.meta_test_loss(mt.shadow, val, split));
}

TEST_CASE("meta-train shadow is one SGD step and leaves the live parameters alone") {
  Fixture f(small_net(), {16, 4});
  TrainConfig cfg;
  cfg.beta1 = 0.05;
  MetaTrainer trainer(f.model, cfg, f.data);
  DomainSplit split{{0, 2}, {1}};
  const auto before_f = f.model.params.hash(Partition::F);
  const auto before_b = f.model.params.hash(Partition::Base);
  const auto theta = f.model.params.flatten(Partition::F);
  MetaTrainResult mt = trainer.meta_train_step(batch_of(f.data, split.trn, 3, 4), split);
  for (std::size_t i = 0; i < theta.size(); ++i) CHECK(mt.shadow[i] == theta[i] - 0.05 * mt.grad[i]);
  trainer.meta_test_loss(mt.shadow, batch_of(f.data, split.val, 3, 4), split);
  CHECK(f.model.params.hash(Partition::F) == before_f);
  CHECK(f.model.params.hash(Partition::Base) == before_b);
}

TEST_CASE("exact mode meta-gradient equals finite differences of the bilevel objective") {
  Fixture f(tiny_net(), {8, 4}, 3);
  TrainConfig cfg;
  cfg.beta1 = 0.2;
  cfg.meta_mode = MetaMode::ExactSmall;
  cfg.batch_per_domain = 4;
  cfg.iterations = 10;
  MetaTrainer trainer(f.model, cfg, f.data);
  REQUIRE(f.model.params.numel(Partition::F) <= kExactMetaMaxDim);
  trainer.run_iteration();  // fills the centroid bank
  trainer.run_iteration();

  DomainSplit split{{0, 1}, {2}};
  DomainBatch trn = batch_of(f.data, split.trn, 4, 8), val = batch_of(f.data, split.val, 4, 8);
  auto& params = f.model.params;
  const auto theta = params.flatten(Partition::F);
  auto objective = [&](const std::vector<double>& t) {
    params.assign_flat(Partition::F, t);
    MetaTrainResult mt = trainer.meta_train_step(trn, split);
    MetaTestResult mv = trainer.meta_test_loss(mt.shadow, val, split);
    return mt.loss.total + mv.loss.total;
  };
  std::vector<double> numeric(theta.size());
  const double h = 1e-5;
  for (std::size_t j = 0; j < theta.size(); ++j) {
    auto p = theta, m = theta;
    p[j] += h;
    m[j] -= h;
    numeric[j] = (objective(p) - objective(m)) / (2.0 * h);
  }
  params.assign_flat(Partition::F, theta);
  MetaTrainResult mt = trainer.meta_train_step(trn, split);
  CHECK(mt.loss.idc_active);
  CHECK(mt.loss.ics_active);
  MetaTestResult mv = trainer.meta_test_loss(mt.shadow, val, split);
  const auto exact = trainer.meta_optimize(mt.grad, mv.grad, trn);
  double worst = 0.0;
  for (std::size_t j = 0; j < theta.size(); ++j)
    worst = std::max(worst, std::abs(exact[j] - numeric[j]) / std::max(1.0, std::abs(numeric[j])));
  INFO("max relative error " << worst);
  CHECK(worst < 1e-4);

  const auto first = meta_gradient_first_order(mt.grad, mv.grad);
  CHECK(max_abs_diff(first, numeric) > max_abs_diff(exact, numeric));
}

TEST_CASE("phases touch only their own partition") {
  Fixture f(small_net(), {16, 4});
  TrainConfig cfg;
  cfg.iterations = 4;
  cfg.batch_per_domain = 2;
  MetaTrainer trainer(f.model, cfg, f.data);
  std::vector<Phase> order;
  std::uint64_t last_f = f.model.params.hash(Partition::F), last_b = f.model.params.hash(Partition::Base);
  bool ok = true;
  trainer.run(nullptr, [&](std::size_t, Phase p, const Model& m) {
    order.push_back(p);
    const auto hf = m.params.hash(Partition::F), hb = m.params.hash(Partition::Base);
    if (p == Phase::NormalTrain) ok = ok && hf == last_f && hb != last_b;
    if (p == Phase::MetaTrain || p == Phase::MetaTest || p == Phase::SplitDomains) ok = ok && hf == last_f && hb == last_b;
    if (p == Phase::MetaOptimize) ok = ok && hf != last_f && hb == last_b;
    if (p == Phase::CentroidUpdate) ok = ok && hf == last_f && hb == last_b;
    last_f = hf;
    last_b = hb;
  });
  CHECK(ok);
  const std::vector<Phase> cycle{Phase::NormalTrain, Phase::SplitDomains, Phase::MetaTrain,
                                 Phase::MetaTest,    Phase::MetaOptimize, Phase::CentroidUpdate};
  REQUIRE(order.size() == 4 * cycle.size());
  for (std::size_t i = 0; i < order.size(); ++i) CHECK(order[i] == cycle[i % cycle.size()]);
  CHECK(trainer.bank().domain_count() == 3);
  CHECK(trainer.bank().has_real());
}

TEST_CASE("disabling meta reduces to joint supervised training") {
  TrainConfig cfg;
  cfg.use_meta = false;
  cfg.use_idc = false;
  cfg.use_ics = false;
  cfg.batch_per_domain = 3;
  cfg.iterations = 3;
  cfg.seed = 9;
  Fixture f(small_net(), {16, 4}, 5);
  Model ref = build_model(small_net(), 5);
  MetaTrainer trainer(f.model, cfg, f.data);
  trainer.run();

  // Reference loop: one Adam over every parameter on K * (cls + depth).
  DomainSampler sampler(f.data, derive_seed(9, 0x4E4F524DULL));
  const std::size_t nb = ref.params.numel(Partition::Base), nf = ref.params.numel(Partition::F);
  Optimizer opt(OptimizerKind::Adam, nb + nf, cfg.beta1);
  for (int it = 0; it < 3; ++it) {
    DomainBatch b = materialize(sampler.draw({0, 1, 2}, 3), f.data.specs, f.data.geom);
    ref.params.set_requires_grad(Partition::Base, true);
    ref.params.set_requires_grad(Partition::F, true);
    ref.params.zero_grad();
    ForwardTrace t = forward(ref, b.images, Mode::Train, true);
    Tensor loss = scale(add(cls_loss(t.logit, b.labels), depth_loss(t.depth_pred, b.depth)), 3.0);
    backward(loss);
    auto theta = ref.params.flatten(Partition::Base);
    auto grad = ref.params.flatten_grad(Partition::Base);
    const auto tf = ref.params.flatten(Partition::F), gf = ref.params.flatten_grad(Partition::F);
    theta.insert(theta.end(), tf.begin(), tf.end());
    grad.insert(grad.end(), gf.begin(), gf.end());
    opt.step(theta, grad);
    ref.params.assign_flat(Partition::Base, std::vector<double>(theta.begin(), theta.begin() + nb));
    ref.params.assign_flat(Partition::F, std::vector<double>(theta.begin() + nb, theta.end()));
  }
  CHECK(max_abs_diff(ref.params.flatten(Partition::Base), f.model.params.flatten(Partition::Base)) < 1e-12);
  CHECK(max_abs_diff(ref.params.flatten(Partition::F), f.model.params.flatten(Partition::F)) < 1e-12);
  CHECK(ref.bn[0].running_mean == f.model.bn[0].running_mean);
}

TEST_CASE("runs are reproducible and log one line per iteration") {
  auto once = [](std::string* log) {
    Fixture f(small_net(), {16, 4});
    TrainConfig cfg;
    cfg.iterations = 3;
    cfg.batch_per_domain = 2;
    MetaTrainer trainer(f.model, cfg, f.data);
    std::ostringstream out;
    trainer.run(&out);
    *log = out.str();
    return f.model.params.hash(Partition::F) ^ f.model.params.hash(Partition::Base);
  };
  std::string a, b;
  CHECK(once(&a) == once(&b));
  CHECK(a == b);
  CHECK(std::count(a.begin(), a.end(), '\n') == 3);
  CHECK(a.find("\"meta_val_domains\"") != std::string::npos);
}

TEST_CASE("config validation") {
  TrainConfig c;
  c.gamma = 1.0;
  CHECK_THROWS(c.validate());
  c = TrainConfig{};
  c.batch_per_domain = 1;
  CHECK_THROWS(c.validate());
  CHECK(parse_meta_mode("exact_small") == MetaMode::ExactSmall);
  CHECK_THROWS(parse_optimizer("rmsprop"));
}

TEST_CASE("plain gradient descent on the base partition") {
  Fixture f(small_net(), {16, 4});
  TrainConfig cfg;
  cfg.base_optimizer = OptimizerKind::Sgd;
  cfg.beta1 = 0.01;
  MetaTrainer trainer(f.model, cfg, f.data);
  DomainBatch b = batch_of(f.data, {0, 1, 2}, 2, 6);

  Model ref = f.model;
  ref.params = f.model.params.deep_copy();
  ref.params.set_requires_grad(Partition::F, false);
  ForwardTrace t = forward(ref, b.images, Mode::Train, true);
  backward(scale(add(cls_loss(t.logit, b.labels), depth_loss(t.depth_pred, b.depth)), 3.0));
  const auto grad = ref.params.flatten_grad(Partition::Base);
  const auto before = f.model.params.flatten(Partition::Base);
  const auto f_hash = f.model.params.hash(Partition::F);

  trainer.normal_train_step(b);
  const auto after = f.model.params.flatten(Partition::Base);
  for (std::size_t i = 0; i < after.size(); ++i) CHECK(after[i] == before[i] - 0.01 * grad[i]);
  CHECK(f.model.params.hash(Partition::F) == f_hash);
}

TEST_CASE("zero learning rates leave parameters unchanged") {
  Fixture f(small_net(), {16, 4});
  TrainConfig cfg;
  cfg.beta1 = 0.0;
  cfg.beta2 = 0.0;
  cfg.iterations = 2;
  MetaTrainer trainer(f.model, cfg, f.data);
  const auto hf = f.model.params.hash(Partition::F), hb = f.model.params.hash(Partition::Base);
  trainer.run();
  CHECK(f.model.params.hash(Partition::F) == hf);
  CHECK(f.model.params.hash(Partition::Base) == hb);
}

TEST_CASE("zero inner step evaluates the val batch at the live parameters") {
  Fixture f(small_net(), {16, 4});
  TrainConfig cfg;
  cfg.beta1 = 0.0;
  MetaTrainer trainer(f.model, cfg, f.data);
  DomainSplit split{{0, 1}, {2}};
  MetaTrainResult mt = trainer.meta_train_step(batch_of(f.data, split.trn, 2, 3), split);
  CHECK(mt.shadow == f.model.params.flatten(Partition::F));
  DomainBatch val = batch_of(f.data, split.val, 2, 3);
  MetaTestResult mv = trainer.meta_test_loss(mt.shadow, val, split);
  auto bn = f.model.bn;
  ForwardTrace t = forward(f.model, f.model.params, bn, val.images, Mode::Train, false);
  CHECK(mv.loss.total == trainer.compose_loss(t, val, true, nullptr).total);
}

TEST_CASE("zero meta-gradients leave the normalization parameters unchanged") {
  Fixture f(small_net(), {16, 4});
  MetaTrainer trainer(f.model, TrainConfig{}, f.data);
  const auto before = f.model.params.flatten(Partition::F);
  const std::vector<double> zeros(before.size(), 0.0);
  DomainBatch trn = batch_of(f.data, {0, 1}, 2, 1);
  trainer.meta_optimize(zeros, zeros, trn);
  CHECK(f.model.params.flatten(Partition::F) == before);
}
