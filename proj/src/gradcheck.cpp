// SPDX-License-Identifier: Apache-2.0
#include "slategen/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace slategen {

GradCheckReport grad_check(const std::function<Tensor()>& f, std::vector<Tensor> inputs, GradCheckOptions options) {
  return grad_check_frozen(f, f, std::move(inputs), options);
}

GradCheckReport grad_check_frozen(const std::function<Tensor()>& f, const std::function<Tensor()>& numeric,
                                  std::vector<Tensor> inputs, GradCheckOptions options) {
  PrecisionScope f64(Precision::f64);
  for (auto& x : inputs) x.zero_grad();
  Tensor out = f();
  if (out.size() != 1) throw ContractError("grad_check: function is not scalar-valued");
  const double f0 = out.item();
  {
    NoGradScope ng;
    const double n0 = numeric().item();
    if (std::abs(n0 - f0) > 1e-9 * std::max(1.0, std::abs(f0)))
      throw ContractError("grad_check: numeric function disagrees with f at the base point");
  }
  out.backward();

  GradCheckReport report;
  const double floor = 1e-6 * std::max(1.0, std::abs(f0));
  for (auto& x : inputs) {
    std::vector<double> analytic(x.size(), 0.0);
    if (x.has_grad()) std::copy(x.grad().begin(), x.grad().end(), analytic.begin());
    auto values = x.mutable_values();
    std::size_t stride = 1;
    if (options.max_per_input > 0 && values.size() > options.max_per_input)
      stride = (values.size() + options.max_per_input - 1) / options.max_per_input;
    for (std::size_t i = 0; i < values.size(); i += stride) {
      const double saved = values[i];
      double hi = 0.0, lo = 0.0;
      {
        NoGradScope ng;
        values[i] = saved + options.step;
        hi = numeric().item();
        values[i] = saved - options.step;
        lo = numeric().item();
      }
      values[i] = saved;
      const double numeric = (hi - lo) / (2.0 * options.step);
      const double abs_err = std::abs(numeric - analytic[i]);
      const double denom = std::max({std::abs(numeric), std::abs(analytic[i]), floor});
      report.max_abs_error = std::max(report.max_abs_error, abs_err);
      report.max_rel_error = std::max(report.max_rel_error, abs_err / denom);
      ++report.checked;
    }
  }
  for (auto& x : inputs) x.zero_grad();
  return report;
}

GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x) {
  return grad_check([&] { return f(x); }, {x});
}

}  // namespace slategen
