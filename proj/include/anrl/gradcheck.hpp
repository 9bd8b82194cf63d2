#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "anrl/tensor.hpp"

namespace anrl {

/// A scalar objective and the leaves it is differentiated against.
struct GradCase {
  std::string name;
  std::function<Tensor()> loss;
  std::vector<Tensor> params;
  double tolerance = 1e-6;
};

/// Layer and loss cases in isolation, then the tiny end-to-end network.
/// Every case draws its inputs from `seed`.
std::vector<GradCase> gradient_cases(std::uint64_t seed);

struct GradResult {
  std::string name;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed() const { return max_rel_error < tolerance; }
};

std::vector<GradResult> run_gradient_suite(std::uint64_t seed, double step = 1e-6);

}  // namespace anrl
