#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "findrec/autodiff.hpp"

namespace findrec::ad {

struct GradCheckReport {
  std::string op_name;
  double max_rel_err = 0.0;
  std::size_t worst_index = 0;  // flat index across all inputs, in order
};

using ScalarFn = std::function<Var(const std::vector<Var>&)>;

// Compares tape gradients of a scalar function against central differences
// (f(x+eps) - f(x-eps)) / (2 eps), one coordinate at a time.
inline GradCheckReport finite_diff_check(const std::string& op_name, const ScalarFn& fn,
                                         const std::vector<Tensor>& inputs, double eps = 1e-5) {
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (const auto& t : inputs) vars.push_back(leaf(t, true));
  Var out = fn(vars);
  if (out.numel() != 1) throw ShapeMismatch("finite_diff_check: function must return a scalar");
  backward(out);

  GradCheckReport report{op_name, 0.0, 0};
  NoGradGuard no_grad;
  std::vector<Var> probe;
  for (const auto& t : inputs) probe.push_back(leaf(t, false));
  std::size_t flat = 0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor analytic = vars[k].grad();
    Tensor& x = probe[k].mutable_value();
    for (std::size_t i = 0; i < x.numel(); ++i, ++flat) {
      const double orig = x[i];
      x[i] = orig + eps;
      const double fp = fn(probe).item();
      x[i] = orig - eps;
      const double fm = fn(probe).item();
      x[i] = orig;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = analytic[i];
      const double err = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
      if (err > report.max_rel_err || !std::isfinite(err)) {
        report.max_rel_err = std::isfinite(err) ? err : HUGE_VAL;
        report.worst_index = flat;
      }
    }
  }
  return report;
}

}  // namespace findrec::ad
