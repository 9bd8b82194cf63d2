#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <map>
#include <set>

#include "anrl/dcc_losses.hpp"
#include "anrl/random.hpp"
#include "oracles.hpp"

using namespace anrl;

using oracle::Vec;

TEST_CASE("IDC and ICS match brute-force evaluation on random instances") {
  Rng rng(17);
  double worst_idc = 0.0, worst_ics = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const auto in = oracle::random_dcc(rng);
    const CentroidBank bank = oracle::bank_for(in);
    const EmbeddingBatch b = oracle::batch_for(in);
    worst_idc = std::max(worst_idc, std::abs(idc_loss(b, bank).item() - oracle::brute_idc(in)));
    worst_ics = std::max(worst_ics, std::abs(ics_loss(b, bank).item() - oracle::brute_ics(in)));
  }
  CHECK(worst_idc < 1e-10);
  CHECK(worst_ics < 1e-10);
}

TEST_CASE("centroid bank copies on first observation and blends afterwards") {
  CentroidBank bank(0.9, 2);
  EmbeddingBatch b{Tensor::from({2, 2}, {1.0, 2.0, 3.0, 4.0}), {0, 0}, {kReal, kFake}};
  auto r = bank.update(b, {0, 1});
  CHECK(bank.domain(0) == Vec{2.0, 3.0});
  CHECK(bank.real() == Vec{1.0, 2.0});
  CHECK(bank.fake() == Vec{3.0, 4.0});
  CHECK(r.skipped == std::vector<std::string>{"domain:1"});
  EmbeddingBatch b2{Tensor::from({1, 2}, {12.0, 13.0}), {0}, {kReal}};
  bank.update(b2);
  CHECK(bank.domain(0)[0] == doctest::Approx(0.9 * 2.0 + 0.1 * 12.0));
  CHECK(bank.real()[1] == doctest::Approx(0.9 * 2.0 + 0.1 * 13.0));
  CHECK(bank.fake() == Vec{3.0, 4.0});
  CHECK_FALSE(bank.has_domain(1));
}

TEST_CASE("centroid bank rejects an embedding width change and bad momentum") {
  CentroidBank bank(0.9, 2);
  EmbeddingBatch b{Tensor::from({1, 3}, {1.0, 2.0, 3.0}), {0}, {kReal}};
  CHECK_THROWS_AS(bank.update(b), ShapeError);
  CHECK_THROWS(CentroidBank(1.0));
  CHECK_THROWS(CentroidBank(-0.1));
}

TEST_CASE("bank centroids never enter the gradient graph") {
  CentroidBank bank(0.5, 2);
  Tensor f = Tensor::parameter({2, 2}, {1.0, 2.0, 3.0, 5.0});
  EmbeddingBatch b{f, {0, 1}, {kReal, kFake}};
  bank.update(b);
  backward(ics_loss(b, bank));
  // Gradient of D_rr for the single real row is 2 (O - C_r) with C_r = O: zero.
  // Only D_rf contributes: -2 (O - C_f).
  CHECK(f.grad()[0] == doctest::Approx(-2.0 * (1.0 - 3.0)));
  CHECK(f.grad()[1] == doctest::Approx(-2.0 * (2.0 - 5.0)));
}

TEST_CASE("IDC and ICS need the keys they read") {
  CentroidBank bank(0.9, 2);
  EmbeddingBatch b{Tensor::from({2, 2}, {1.0, 2.0, 3.0, 4.0}), {0, 0}, {kReal, kReal}};
  bank.update(b);
  CHECK_THROWS(idc_loss(b, bank));  // one domain in the bank
  CHECK_THROWS(ics_loss(b, bank));  // no fakes
}

TEST_CASE("cls loss matches the naive binary cross-entropy and is stable for large logits") {
  Tensor z = Tensor::from({4}, {0.3, -2.0, 40.0, -40.0});
  std::vector<int> y{1, 0, 0, 1};
  double ref = 0.0;
  for (std::size_t i = 0; i < 2; ++i) {
    const double p = 1.0 / (1.0 + std::exp(-z.data()[i]));
    ref += -(y[i] * std::log(p) + (1 - y[i]) * std::log(1 - p));
  }
  ref += 40.0 + 40.0;
  CHECK(cls_loss(z, y).item() == doctest::Approx(ref / 4.0).epsilon(1e-12));
  CHECK(std::isfinite(cls_loss(Tensor::from({1}, {800.0}), {0}).item()));
  CHECK_THROWS(cls_loss(z, {1, 0, 2, 1}));
}

TEST_CASE("depth loss is the per-sample sum of squares averaged over samples") {
  Tensor p = Tensor::from({2, 1, 1, 2}, {1.0, 2.0, 0.0, 0.0});
  Tensor t = Tensor::from({2, 1, 1, 2}, {0.0, 0.0, 0.0, 3.0});
  CHECK(depth_loss(p, t).item() == doctest::Approx((1.0 + 4.0 + 9.0) / 2.0));
  CHECK_THROWS_AS(depth_loss(p, Tensor::zeros({2, 1, 2, 1})), ShapeError);
}

TEST_CASE("hand-computed distances and losses") {
  CentroidBank bank(0.9, 2);
  bank.assign_domain(0, {0.0, 0.0});
  bank.assign_domain(1, {1.0, 0.0});
  bank.assign_real({0.0, 0.0});
  bank.assign_fake({1.0, 0.0});

  // One sample per domain, each sitting on its own centroid.
  EmbeddingBatch on_own{Tensor::from({2, 2}, {0.0, 0.0, 1.0, 0.0}), {0, 1}, {kReal, kFake}};
  CHECK(intra_domain_distance(on_own, bank, 0).item() == 0.0);
  CHECK(inter_domain_distance(on_own, bank, 0).item() == 1.0);
  CHECK(idc_loss(on_own, bank).item() == 2.0);
  CHECK(ics_loss(on_own, bank).item() == -2.0);

  CentroidBank flat(0.9, 2);
  flat.assign_domain(0, {0.5, 0.5});
  flat.assign_domain(1, {0.5, 0.5});
  flat.assign_real({0.5, 0.5});
  flat.assign_fake({0.5, 0.5});
  EmbeddingBatch same{Tensor::from({2, 2}, {0.5, 0.5, 0.5, 0.5}), {0, 1}, {kReal, kFake}};
  CHECK(idc_loss(same, flat).item() == 0.0);
  CHECK(ics_loss(same, flat).item() == 0.0);
}

TEST_CASE("gradient descent on free embeddings lowers the IDC loss") {
  Rng rng(21);
  CentroidBank bank(0.9, 3);
  for (int d = 0; d < 3; ++d) bank.assign_domain(d, {rng.normal(), rng.normal(), rng.normal()});
  Vec init(6 * 3);
  for (auto& v : init) v = rng.normal();
  Tensor f = Tensor::parameter({6, 3}, init);
  const std::vector<int> domains{0, 0, 1, 1, 2, 2}, labels{1, 0, 1, 0, 1, 0};
  double last = 1e300;
  for (int step = 0; step < 20; ++step) {
    f.zero_grad();
    Tensor loss = idc_loss({f, domains, labels}, bank);
    CHECK(loss.item() < last);
    last = loss.item();
    backward(loss);
    auto g = f.grad();
    auto v = f.mutable_data();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= 0.05 * g[i];
  }
}
