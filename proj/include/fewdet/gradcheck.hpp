#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "fewdet/tensor.hpp"

namespace fewdet {

struct GradCheckReport {
  std::string op_name;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

// Compares reverse-mode gradients of a scalar-valued function against central
// finite differences in f64. `fn` must be a pure function of `inputs`; every
// input with requires_grad set is checked. When max_elems_per_input > 0 only
// an evenly spread subset of coordinates per input is probed (used for the
// composed-network checks where full Jacobians would be wasteful).
inline GradCheckReport grad_check(const std::string& op_name,
                                  const std::function<TensorD(std::vector<TensorD>&)>& fn,
                                  std::vector<TensorD> inputs, double eps = 1e-5,
                                  double tol = 1e-4, int max_elems_per_input = 0) {
  GradCheckReport report;
  report.op_name = op_name;
  report.tolerance = tol;

  for (auto& in : inputs) in.zero_grad();
  TensorD loss = fn(inputs);
  if (loss.numel() != 1) throw dimension_error("grad_check: op must be scalar-valued");
  if (!std::isfinite(loss.item())) throw numerical_error("non-finite forward value in " + op_name);
  loss.backward();

  double max_rel = 0.0;
  for (auto& in : inputs) {
    if (!in.requires_grad()) continue;
    const std::vector<double> analytic = in.grad();
    const std::int64_t n = in.numel();
    std::int64_t probes = n;
    if (max_elems_per_input > 0 && n > max_elems_per_input) probes = max_elems_per_input;
    for (std::int64_t k = 0; k < probes; ++k) {
      const std::int64_t i = (probes == n) ? k : (k * n) / probes;
      const double orig = in.data()[i];
      double fp, fm;
      {
        NoGradGuard ng;
        in.data()[i] = orig + eps;
        fp = fn(inputs).item();
        in.data()[i] = orig - eps;
        fm = fn(inputs).item();
        in.data()[i] = orig;
      }
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw numerical_error("non-finite value while differencing " + op_name);
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = analytic[static_cast<std::size_t>(i)];
      if (!std::isfinite(a)) throw numerical_error("non-finite analytic gradient in " + op_name);
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-3});
      max_rel = std::max(max_rel, std::abs(a - numeric) / denom);
    }
  }
  report.max_rel_error = max_rel;
  report.passed = max_rel <= tol;
  return report;
}

}  // namespace fewdet
