#pragma once
#include <functional>
#include <string>
#include <vector>

#include "metadetr/param.hpp"

namespace metadetr {

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_err = 0.0;
  bool ok(double rtol) const { return max_rel_err <= rtol; }
};

// Compares the analytic gradient of a scalar function against central
// finite differences, per parameter element. forward() must rebuild the
// graph from the current parameter data on every call.
GradCheckReport grad_check(const std::vector<Parameter>& params,
                           const std::function<Value()>& forward, double h = 1e-5,
                           double rtol = 1e-3);

GradCheckReport grad_check(ParamStore& store, const std::function<Value()>& forward,
                           double h = 1e-5, double rtol = 1e-3);

// Same comparison for plain leaf inputs of an op under test.
GradCheckReport grad_check_inputs(const std::vector<Value>& inputs,
                                  const std::function<Value()>& forward, double h = 1e-5,
                                  double rtol = 1e-3);

// Relative error with a floor so that tiny matching gradients count as exact.
double rel_err(double analytic, double numeric);

}  // namespace metadetr
