#pragma once

#include <string>
#include <vector>

namespace cqvpr {

struct OpGradReport {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t seeds_run = 0;
  std::size_t seeds_skipped = 0;  // kink margin too small, resampled
};

// Finite-difference verification of every differentiable op plus the full
// composite loss on the tiny preset. Each entry runs over at least `seeds`
// accepted seeds.
std::vector<OpGradReport> run_gradient_suite(std::size_t seeds = 20,
                                             double eps = 1e-3);

constexpr double kGradSuiteTolerance = 1e-4;

bool gradient_suite_passed(const std::vector<OpGradReport>& reports,
                           double tolerance = kGradSuiteTolerance);

}  // namespace cqvpr
