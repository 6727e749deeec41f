// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <vector>

#include "slategen/nn.hpp"

namespace slategen {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // L2 penalty folded into the gradient.
  double weight_decay = 1e-4;
  // Global gradient-norm clip; 0 disables.
  double clip_norm = 1.0;
};

/// Adam over a fixed parameter list. Updated values are rounded to the active
/// precision so parameters stay representable in 32-bit.
class Adam {
 public:
  Adam(nn::ParamList params, AdamConfig cfg);

  void zero_grad();
  /// Returns the pre-clip global gradient norm.
  double step();

  std::size_t steps() const { return t_; }
  const AdamConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }

 private:
  nn::ParamList params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

/// Cosine decay from base at step 1 to min_frac·base at step total.
double cosine_lr(double base, std::size_t step, std::size_t total, double min_frac = 0.0);

}  // namespace slategen
