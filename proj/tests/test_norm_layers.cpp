#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "anrl/norm_layers.hpp"

using namespace anrl;

namespace {

Tensor random_input(Shape s, Rng& rng, double scale = 2.0, double shift = 0.5) {
  std::vector<double> v(shape_numel(s));
  for (auto& x : v) x = shift + scale * rng.normal();
  return Tensor::from(s, v);
}

// Mean and population variance of one channel over the selected samples.
std::pair<double, double> channel_moments(const Tensor& x, std::size_t c, std::size_t n_lo, std::size_t n_hi) {
  const std::size_t C = x.dim(1), hw = x.dim(2) * x.dim(3);
  double s = 0.0, ss = 0.0;
  std::size_t cnt = 0;
  for (std::size_t i = n_lo; i < n_hi; ++i)
    for (std::size_t p = 0; p < hw; ++p) {
      const double v = x.data()[(i * C + c) * hw + p];
      s += v;
      ss += v * v;
      ++cnt;
    }
  const double mu = s / cnt;
  return {mu, ss / cnt - mu * mu};
}

}  // namespace

TEST_CASE("batch norm output has zero mean and unit variance per channel") {
  Rng rng(1);
  Tensor x = random_input({4, 3, 5, 5}, rng);
  BnState st = BnState::init(3);
  Tensor y = batch_norm(x, st, Mode::Train);
  for (std::size_t c = 0; c < 3; ++c) {
    auto [mu, var] = channel_moments(y, c, 0, 4);
    CHECK(mu == doctest::Approx(0.0).epsilon(1e-12).scale(1.0));
    CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
  }
}

TEST_CASE("batch norm running statistics use unbiased variance and keep 0.9 of the old value") {
  Rng rng(2);
  Tensor x = random_input({3, 2, 2, 2}, rng);
  BnState st = BnState::init(2);
  batch_norm(x, st, Mode::Train);
  for (std::size_t c = 0; c < 2; ++c) {
    auto [mu, var] = channel_moments(x, c, 0, 3);
    const double m = 12.0;
    CHECK(st.running_mean[c] == doctest::Approx(0.1 * mu));
    CHECK(st.running_var[c] == doctest::Approx(0.9 + 0.1 * var * m / (m - 1.0)));
  }
  BnState frozen = BnState::init(2);
  batch_norm(x, frozen, Mode::Train, false);
  CHECK(frozen.running_mean[0] == 0.0);
  CHECK(frozen.running_var[0] == 1.0);
}

TEST_CASE("eval-mode batch norm uses running statistics") {
  BnState st = BnState::init(1);
  st.running_mean = {2.0};
  st.running_var = {4.0};
  Tensor x = Tensor::from({1, 1, 1, 2}, {2.0, 6.0});
  Tensor y = batch_norm(x, st, Mode::Eval);
  CHECK(y.data()[0] == doctest::Approx(0.0));
  CHECK(y.data()[1] == doctest::Approx(4.0 / std::sqrt(4.0 + 1e-5)));
}

TEST_CASE("batch norm rejects a single-sample training batch") {
  BnState st = BnState::init(2);
  CHECK_THROWS(batch_norm(Tensor::zeros({1, 2, 3, 3}), st, Mode::Train));
}

TEST_CASE("instance norm normalizes every sample separately") {
  Rng rng(3);
  Tensor x = random_input({3, 2, 4, 4}, rng);
  Tensor y = instance_norm(x);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t c = 0; c < 2; ++c) {
      auto [mu, var] = channel_moments(y, c, i, i + 1);
      CHECK(std::abs(mu) < 1e-12);
      CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
    }
  CHECK_THROWS(instance_norm(Tensor::zeros({2, 2, 1, 1})));
}

TEST_CASE("AFNM bottleneck follows max(C/8, 4)") {
  CHECK(afnm_bottleneck(8) == 4);
  CHECK(afnm_bottleneck(32) == 4);
  CHECK(afnm_bottleneck(64) == 8);
  CHECK(afnm_bottleneck(100) == 12);
}

TEST_CASE("fresh AFNM layer gives alpha exactly 0.5 and averages the two branches") {
  Rng rng(4);
  NormState s = make_norm_state(NormVariant::AFNM, 16, rng);
  Tensor x = random_input({3, 16, 4, 4}, rng);
  BnState bn_copy = s.bn;
  NormOutput out = afnm_forward(x, s, Mode::Train);
  for (double a : out.alpha.data()) CHECK(a == 0.5);
  Tensor expect = scale(add(batch_norm(x, bn_copy, Mode::Train), instance_norm(x)), 0.5);
  for (std::size_t i = 0; i < expect.numel(); ++i) CHECK(out.y.data()[i] == doctest::Approx(expect.data()[i]).epsilon(1e-12));
}

TEST_CASE("AFNM alpha depends on the sample once the gates are trained") {
  Rng rng(5);
  NormState s = make_norm_state(NormVariant::AFNM, 8, rng);
  for (auto& v : s.params.gate_bn.mutable_data()) v = rng.normal();
  for (auto& v : s.params.gate_in.mutable_data()) v = rng.normal();
  Tensor x = random_input({4, 8, 3, 3}, rng);
  NormOutput out = afnm_forward(x, s, Mode::Train);
  const auto a = out.alpha.data();
  bool varies = false;
  for (std::size_t c = 0; c < 8; ++c) varies |= a[c] != a[8 + c];
  CHECK(varies);
  for (double v : a) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
}

TEST_CASE("IN variant is independent of batch composition") {
  Rng rng(6);
  NormState s = make_norm_state(NormVariant::IN, 4, rng);
  Tensor x = random_input({2, 4, 3, 3}, rng);
  auto xd = x.data();
  std::vector<double> stacked(xd.begin(), xd.begin() + 36);
  stacked.insert(stacked.end(), xd.begin(), xd.begin() + 36);
  Tensor y1 = variant_forward(x, s, Mode::Train).y;
  Tensor y2 = variant_forward(Tensor::from({2, 4, 3, 3}, stacked), s, Mode::Train).y;
  for (std::size_t i = 0; i < 36; ++i) CHECK(y1.data()[i] == y2.data()[i]);
}

TEST_CASE("IBN takes IN on the first half of the channels and BN on the rest") {
  Rng rng(7);
  NormState s = make_norm_state(NormVariant::IBN, 4, rng);
  Tensor x = random_input({3, 4, 2, 2}, rng);
  BnState bn = s.bn;
  Tensor y = variant_forward(x, s, Mode::Train).y;
  Tensor in = instance_norm(x), bnx = batch_norm(x, bn, Mode::Train);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t c = 0; c < 4; ++c)
      for (std::size_t p = 0; p < 4; ++p) {
        const std::size_t at = (i * 4 + c) * 4 + p;
        CHECK(y.data()[at] == doctest::Approx(c < 2 ? in.data()[at] : bnx.data()[at]));
      }
}

TEST_CASE("BIN gate is clipped to the unit interval") {
  Rng rng(8);
  NormState s = make_norm_state(NormVariant::BIN, 3, rng);
  for (double v : s.params.rho.data()) CHECK(v == 0.5);
  auto d = s.params.rho.mutable_data();
  d[0] = -0.2;
  d[1] = 1.7;
  clip_bin_gate(s.params.rho);
  CHECK(s.params.rho.data()[0] == 0.0);
  CHECK(s.params.rho.data()[1] == 1.0);
}

TEST_CASE("variant names round-trip and unknown names are rejected") {
  for (auto v : all_variants()) CHECK(parse_variant(variant_name(v)) == v);
  CHECK(all_variants().size() == 6);
  CHECK_THROWS(parse_variant("GN"));
}

TEST_CASE("norm layers reject a channel axis mismatch") {
  Rng rng(9);
  NormState s = make_norm_state(NormVariant::AFNM, 4, rng);
  CHECK_THROWS(afnm_forward(Tensor::zeros({2, 5, 3, 3}), s, Mode::Train));
}
