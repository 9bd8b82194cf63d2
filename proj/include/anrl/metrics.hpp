#pragma once

#include <cstdint>
#include <vector>

namespace anrl {

/// P(score of a random live sample > score of a random spoof), ties count
/// one half. Label 1 is live.
double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels);

struct ErrorRates {
  double far = 0.0;  // spoofs with score >= threshold
  double frr = 0.0;  // live samples with score < threshold
};

ErrorRates error_rates(const std::vector<double>& scores, const std::vector<int>& labels, double threshold);

struct EerResult {
  double threshold = 0.0;
  double far = 0.0;
  double frr = 0.0;
};

/// Candidate thresholds are the distinct scores and the midpoints between
/// neighbours. Picks the smallest |FAR - FRR|, the lowest threshold on ties.
EerResult eer_threshold(const std::vector<double>& scores, const std::vector<int>& labels);

/// (FAR + FRR) / 2 at the threshold.
double hter(const std::vector<double>& scores, const std::vector<int>& labels, double threshold);

/// Sorted distinct scores interleaved with their midpoints.
std::vector<double> threshold_candidates(const std::vector<double>& scores);

}  // namespace anrl
