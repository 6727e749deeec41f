// SPDX-License-Identifier: Apache-2.0
#include "slategen/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace slategen {

Adam::Adam(nn::ParamList params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor.size(), 0.0);
    v_.emplace_back(p.tensor.size(), 0.0);
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

double Adam::step() {
  double sq = 0.0;
  for (const auto& p : params_)
    if (p.tensor.has_grad())
      for (double g : p.tensor.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericError("Adam: non-finite gradient norm");
  const double clip = (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / norm : 1.0;
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  const bool f32 = current_precision() == Precision::f32;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& t = params_[i].tensor;
    if (!t.has_grad()) continue;
    auto w = t.mutable_values();
    const auto g = t.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g[j] * clip + cfg_.weight_decay * w[j];
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
      const double upd = cfg_.lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.eps);
      w[j] -= upd;
      if (f32) w[j] = static_cast<double>(static_cast<float>(w[j]));
    }
  }
  return norm;
}

double cosine_lr(double base, std::size_t step, std::size_t total, double min_frac) {
  if (total <= 1) return base;
  const double t = static_cast<double>(std::min(step, total) - std::min<std::size_t>(step, 1)) /
                   static_cast<double>(total - 1);
  return base * (min_frac + (1.0 - min_frac) * 0.5 * (1.0 + std::cos(std::numbers::pi * t)));
}

}  // namespace slategen
