#include "metadetr/grad_check.hpp"

#include <cmath>

namespace metadetr {

double rel_err(double analytic, double numeric) {
  double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-6});
  return std::fabs(analytic - numeric) / denom;
}

namespace {

GradCheckReport run_check(const std::vector<std::pair<std::string, Value>>& leaves,
                          const std::function<Value()>& forward, double h, double) {
  check(h > 0.0, "grad_check: step h must be positive");
  for (auto& [name, v] : leaves)
    check(v.requires_grad(), "grad_check: leaf '" + name + "' does not require gradients");

  // Analytic pass.
  for (auto& [name, v] : leaves) const_cast<Value&>(v).zero_grad();
  Value loss = forward();
  check(std::isfinite(loss.item()), "grad_check: non-finite loss");
  backward(loss);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(leaves.size());
  for (auto& [name, v] : leaves) analytic.push_back(v.node()->grad);

  GradCheckReport report;
  for (size_t p = 0; p < leaves.size(); ++p) {
    const auto& v = leaves[p].second;
    GradCheckEntry entry{leaves[p].first, 0.0, 0.0, 0.0};
    auto& data = v.node()->data;
    for (size_t i = 0; i < data.size(); ++i) {
      double keep = data[i];
      data[i] = keep + h;
      double fp = forward().item();
      data[i] = keep - h;
      double fm = forward().item();
      data[i] = keep;
      check(std::isfinite(fp) && std::isfinite(fm),
            "grad_check: non-finite intermediate while differencing '" + leaves[p].first + "'");
      double numeric = (fp - fm) / (2.0 * h);
      double e = rel_err(analytic[p][i], numeric);
      if (e > entry.max_rel_err) {
        entry.max_rel_err = e;
        entry.analytic_at_worst = analytic[p][i];
        entry.numeric_at_worst = numeric;
      }
    }
    report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace

GradCheckReport grad_check(const std::vector<Parameter>& params,
                           const std::function<Value()>& forward, double h, double rtol) {
  std::vector<std::pair<std::string, Value>> leaves;
  leaves.reserve(params.size());
  for (const auto& p : params) leaves.emplace_back(p.name, p.value);
  return run_check(leaves, forward, h, rtol);
}

GradCheckReport grad_check(ParamStore& store, const std::function<Value()>& forward, double h,
                           double rtol) {
  return grad_check(store.all(), forward, h, rtol);
}

GradCheckReport grad_check_inputs(const std::vector<Value>& inputs,
                                  const std::function<Value()>& forward, double h, double rtol) {
  std::vector<std::pair<std::string, Value>> leaves;
  for (size_t i = 0; i < inputs.size(); ++i)
    leaves.emplace_back("input" + std::to_string(i), inputs[i]);
  return run_check(leaves, forward, h, rtol);
}

}  // namespace metadetr
