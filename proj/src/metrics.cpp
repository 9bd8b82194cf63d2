#include "anrl/metrics.hpp"

#include <algorithm>
#include <cstdlib>
#include <numeric>
#include <stdexcept>
#include <string>

namespace anrl {

namespace {

struct ClassCounts {
  std::size_t live = 0;
  std::size_t spoof = 0;
};

ClassCounts check_inputs(const std::vector<double>& scores, const std::vector<int>& labels, const char* who) {
  if (scores.size() != labels.size()) {
    throw std::invalid_argument(std::string(who) + ": " + std::to_string(scores.size()) + " scores vs " +
                                std::to_string(labels.size()) + " labels");
  }
  ClassCounts c;
  for (int l : labels) {
    if (l == 1) {
      ++c.live;
    } else if (l == 0) {
      ++c.spoof;
    } else {
      throw std::invalid_argument(std::string(who) + ": labels must be 0 or 1");
    }
  }
  if (c.live == 0 || c.spoof == 0) throw std::invalid_argument(std::string(who) + ": both classes must be present");
  return c;
}

struct SortedScores {
  std::vector<double> live;
  std::vector<double> spoof;
};

SortedScores split_sorted(const std::vector<double>& scores, const std::vector<int>& labels) {
  SortedScores s;
  for (std::size_t i = 0; i < scores.size(); ++i) (labels[i] == 1 ? s.live : s.spoof).push_back(scores[i]);
  std::sort(s.live.begin(), s.live.end());
  std::sort(s.spoof.begin(), s.spoof.end());
  return s;
}

// Counts of spoofs accepted and live samples rejected at a threshold.
std::pair<std::size_t, std::size_t> error_counts(const SortedScores& s, double thr) {
  const auto accepted = static_cast<std::size_t>(s.spoof.end() - std::lower_bound(s.spoof.begin(), s.spoof.end(), thr));
  const auto rejected = static_cast<std::size_t>(std::lower_bound(s.live.begin(), s.live.end(), thr) - s.live.begin());
  return {accepted, rejected};
}

}  // namespace

double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  const auto c = check_inputs(scores, labels, "roc_auc");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Twice the live rank sum, with tied groups sharing their average rank.
  unsigned long long twice_rank_sum = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
    const unsigned long long twice_avg = (i + 1) + j;  // ranks i+1 .. j
    for (std::size_t k = i; k < j; ++k) {
      if (labels[idx[k]] == 1) twice_rank_sum += twice_avg;
    }
    i = j;
  }
  const unsigned long long n_live = c.live, n_spoof = c.spoof;
  const unsigned long long twice_u = twice_rank_sum - n_live * (n_live + 1);
  return static_cast<double>(twice_u) / static_cast<double>(2 * n_live * n_spoof);
}

ErrorRates error_rates(const std::vector<double>& scores, const std::vector<int>& labels, double threshold) {
  const auto c = check_inputs(scores, labels, "error_rates");
  std::size_t accepted = 0, rejected = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] == 0 && scores[i] >= threshold) ++accepted;
    if (labels[i] == 1 && scores[i] < threshold) ++rejected;
  }
  return {static_cast<double>(accepted) / static_cast<double>(c.spoof),
          static_cast<double>(rejected) / static_cast<double>(c.live)};
}

std::vector<double> threshold_candidates(const std::vector<double>& scores) {
  std::vector<double> u = scores;
  std::sort(u.begin(), u.end());
  u.erase(std::unique(u.begin(), u.end()), u.end());
  std::vector<double> out;
  for (std::size_t i = 0; i < u.size(); ++i) {
    if (i > 0) out.push_back(u[i - 1] + 0.5 * (u[i] - u[i - 1]));
    out.push_back(u[i]);
  }
  return out;
}

EerResult eer_threshold(const std::vector<double>& scores, const std::vector<int>& labels) {
  const auto c = check_inputs(scores, labels, "eer_threshold");
  const auto sorted = split_sorted(scores, labels);
  EerResult best;
  bool have = false;
  long long best_gap = 0;
  for (double thr : threshold_candidates(scores)) {
    const auto [acc, rej] = error_counts(sorted, thr);
    // |acc/n_spoof - rej/n_live| compared exactly via cross-multiplication.
    const long long gap = std::llabs(static_cast<long long>(acc * c.live) - static_cast<long long>(rej * c.spoof));
    if (!have || gap < best_gap) {
      have = true;
      best_gap = gap;
      best.threshold = thr;
      best.far = static_cast<double>(acc) / static_cast<double>(c.spoof);
      best.frr = static_cast<double>(rej) / static_cast<double>(c.live);
    }
  }
  return best;
}

double hter(const std::vector<double>& scores, const std::vector<int>& labels, double threshold) {
  const auto r = error_rates(scores, labels, threshold);
  return 0.5 * (r.far + r.frr);
}

}  // namespace anrl
