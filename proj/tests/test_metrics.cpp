#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "anrl/metrics.hpp"
#include "anrl/random.hpp"
#include "oracles.hpp"

using namespace anrl;

namespace {

struct Scored {
  std::vector<double> scores;
  std::vector<int> labels;
};

// Scores on a coarse grid so ties are common.
Scored random_scored(Rng& rng, std::size_t n, int grid) {
  Scored s;
  for (std::size_t i = 0; i < n; ++i) {
    const int label = i < 2 ? static_cast<int>(i) : static_cast<int>(rng.below(2));
    double v = rng.uniform() + 0.3 * label;
    if (grid) v = std::round(v * grid) / grid;
    s.scores.push_back(v);
    s.labels.push_back(label);
  }
  return s;
}

double std_normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

}  // namespace

TEST_CASE("AUC equals pair counting, ties included") {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const auto s = random_scored(rng, 2 + rng.below(80), trial % 2 ? 10 : 0);
    CHECK(roc_auc(s.scores, s.labels) == doctest::Approx(oracle::pairwise_auc(s.scores, s.labels)).epsilon(1e-14));
  }
}

TEST_CASE("AUC and HTER edge cases") {
  const std::vector<double> s{0.1, 0.2, 0.8, 0.9};
  CHECK(roc_auc(s, {0, 0, 1, 1}) == 1.0);
  CHECK(roc_auc(s, {1, 1, 0, 0}) == 0.0);
  CHECK(roc_auc({0.5, 0.5}, {1, 0}) == 0.5);
  const auto e = eer_threshold(s, {0, 0, 1, 1});
  CHECK(e.far == 0.0);
  CHECK(e.frr == 0.0);
  CHECK(hter(s, {0, 0, 1, 1}, e.threshold) == 0.0);
  CHECK_THROWS(roc_auc(s, {1, 1, 1, 1}));
  CHECK_THROWS(roc_auc(s, {1, 0, 2, 0}));
  CHECK_THROWS(hter(s, {1, 0}, 0.5));
}

TEST_CASE("error rates use score >= threshold as accept") {
  const std::vector<double> s{0.2, 0.5, 0.5, 0.9};
  const std::vector<int> l{0, 0, 1, 1};
  auto r = error_rates(s, l, 0.5);
  CHECK(r.far == 0.5);
  CHECK(r.frr == 0.0);
  r = error_rates(s, l, 0.50001);
  CHECK(r.far == 0.0);
  CHECK(r.frr == 0.5);
  CHECK(hter(s, l, 0.0) == 0.5);
}

TEST_CASE("threshold candidates") {
  CHECK(threshold_candidates({0.4, 0.0, 0.4, 1.0}) == std::vector<double>{0.0, 0.2, 0.4, 0.7, 1.0});
}

TEST_CASE("EER threshold is the exhaustive minimizer with lowest-threshold ties") {
  Rng rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    const auto s = random_scored(rng, 2 + rng.below(60), trial % 3 ? 8 : 0);
    double best_gap = 1e9, best_thr = 0.0;
    for (double t : threshold_candidates(s.scores)) {
      const auto r = error_rates(s.scores, s.labels, t);
      const double gap = std::abs(r.far - r.frr);
      if (gap < best_gap - 1e-12) {
        best_gap = gap;
        best_thr = t;
      }
    }
    const auto e = eer_threshold(s.scores, s.labels);
    CHECK(e.threshold == best_thr);
    const auto r = error_rates(s.scores, s.labels, e.threshold);
    CHECK(e.far == r.far);
    CHECK(e.frr == r.frr);
  }
}

TEST_CASE("Monte Carlo agreement with Gaussian score models") {
  // Live ~ N(1,1), spoof ~ N(0,1): AUC = Phi(1/sqrt 2), EER at 0.5 with rate Phi(-0.5).
  Rng rng(12);
  std::vector<double> s;
  std::vector<int> l;
  for (int i = 0; i < 20000; ++i) {
    s.push_back(rng.normal() + 1.0);
    l.push_back(1);
    s.push_back(rng.normal());
    l.push_back(0);
  }
  CHECK(std::abs(roc_auc(s, l) - std_normal_cdf(1.0 / std::sqrt(2.0))) < 0.01);
  const auto e = eer_threshold(s, l);
  CHECK(std::abs(e.threshold - 0.5) < 0.05);
  CHECK(std::abs(0.5 * (e.far + e.frr) - std_normal_cdf(-0.5)) < 0.01);
  CHECK(std::abs(hter(s, l, 0.5) - std_normal_cdf(-0.5)) < 0.01);
}

TEST_CASE("AUC is invariant under strictly increasing transforms") {
  Rng rng(5);
  const auto s = random_scored(rng, 60, 0);
  std::vector<double> t;
  for (double v : s.scores) t.push_back(std::exp(3.0 * v) - 7.0);
  CHECK(roc_auc(t, s.labels) == roc_auc(s.scores, s.labels));
}

TEST_CASE("inverted scores") {
  const std::vector<double> s{0.9, 0.8, 0.2, 0.1};
  const std::vector<int> l{0, 0, 1, 1};
  CHECK(roc_auc(s, l) == 0.0);
  // Accepting exactly the spoofs rejects every live sample.
  CHECK(hter(s, l, 0.5) == 1.0);
  const auto a = eer_threshold(s, l), b = eer_threshold(s, l);
  CHECK(a.threshold == b.threshold);
  CHECK(a.far == a.frr);
}

TEST_CASE("random scores average to chance") {
  Rng rng(31);
  double h = 0.0, a = 0.0;
  const int trials = 1000;
  for (int t = 0; t < trials; ++t) {
    std::vector<double> s;
    std::vector<int> l;
    for (int i = 0; i < 100; ++i) {
      s.push_back(rng.uniform());
      l.push_back(i % 2);
    }
    h += hter(s, l, 0.5);
    a += roc_auc(s, l);
  }
  CHECK(std::abs(h / trials - 0.5) < 0.03);
  CHECK(std::abs(a / trials - 0.5) < 0.03);
}
