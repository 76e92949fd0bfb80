#pragma once
#include <string>
#include <vector>

#include "metadetr/value.hpp"

namespace metadetr {

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

// The invariant suite behind the `selftest` command: finite-difference
// gradient sweep over every differentiable operation, Hungarian agreement
// with brute-force permutation search, frozen loss-component oracles, and
// the aggregation-module algebra. Returns one result per check group.
std::vector<CheckResult> run_selftest();

// Individual groups, reused by the acceptance suite.
CheckResult check_op_gradients();
CheckResult check_model_gradients();   // full forward at toy sizes
CheckResult check_hungarian_oracle(int trials_per_size = 200);
CheckResult check_loss_oracles();
CheckResult check_cam_algebra();

// Exhaustive minimum over all permutations; the reference for the
// Hungarian checks. n <= 9.
double brute_force_assignment(const std::vector<double>& cost, int n,
                              std::vector<int>* best_sigma = nullptr);

}  // namespace metadetr
