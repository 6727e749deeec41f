// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "slategen/tensor.hpp"

namespace slategen {

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t checked = 0;

  bool passes(double tol) const { return max_rel_error <= tol; }
};

struct GradCheckOptions {
  double step = 1e-5;
  // Upper bound on checked elements per input; larger inputs are strided.
  std::size_t max_per_input = 0;
};

/// Compares reverse-mode gradients of a scalar function against central
/// differences, in 64-bit mode. The relative error denominator is floored at
/// 1e-6·max(1, |f|) so entries at rounding-noise level do not dominate.
GradCheckReport grad_check(const std::function<Tensor()>& f, std::vector<Tensor> inputs,
                           GradCheckOptions options = {});

GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x);

/// Reverse-mode gradients of f against central differences of `numeric`: the
/// same value with every stop-gradient operand replaced by a constant taken at
/// the base point. Throws ContractError if the two values differ there.
GradCheckReport grad_check_frozen(const std::function<Tensor()>& f, const std::function<Tensor()>& numeric,
                                  std::vector<Tensor> inputs, GradCheckOptions options = {});

}  // namespace slategen
