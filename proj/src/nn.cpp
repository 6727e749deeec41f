// SPDX-License-Identifier: Apache-2.0
#include "slategen/nn.hpp"

#include <cmath>

namespace slategen::nn {

namespace {

double round_f32(double x) { return static_cast<double>(static_cast<float>(x)); }

}  // namespace

std::size_t count_parameters(const ParamList& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.size();
  return n;
}

Tensor xavier(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> v(fan_in * fan_out);
  for (auto& x : v) x = round_f32(rng.uniform(-bound, bound));
  return Tensor::from({fan_in, fan_out}, std::move(v), true);
}

Tensor normal_param(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = round_f32(rng.normal(0.0, stddev));
  return Tensor::from({rows, cols}, std::move(v), true);
}

Tensor zeros_param(Shape shape) { return Tensor::zeros(std::move(shape), true); }
Tensor ones_param(std::size_t n) { return Tensor::full({n}, 1.0, true); }

// ---------------------------------------------------------------------------

Linear::Linear(std::size_t in, std::size_t out, bool with_bias, Rng& rng) : weight(xavier(in, out, rng)) {
  if (with_bias) bias = zeros_param({out});
}

Tensor Linear::forward(const Tensor& x) const {
  Tensor y = matmul(x, weight);
  return bias.defined() ? add_row(y, bias) : y;
}

void Linear::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".weight", weight});
  if (bias.defined()) out.push_back({prefix + ".bias", bias});
}

Mlp::Mlp(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng)
    : first(in, hidden, true, rng), second(hidden, out, true, rng) {}

Tensor Mlp::forward(const Tensor& x) const { return second.forward(silu(first.forward(x))); }

void Mlp::collect(const std::string& prefix, ParamList& out) const {
  first.collect(prefix + ".0", out);
  second.collect(prefix + ".1", out);
}

// ---------------------------------------------------------------------------

DecoderBlock::DecoderBlock(const BlockShape& shape, Rng& rng) : shape_(shape) {
  const std::size_t d = shape.d_model;
  if (shape.n_heads == 0 || d % shape.n_heads != 0)
    throw ContractError("DecoderBlock: d_model " + std::to_string(d) + " not divisible by " +
                        std::to_string(shape.n_heads) + " heads");
  if (shape.cross) {
    norm_cross_ = ones_param(d);
    norm_key_ = ones_param(d);
    norm_value_ = ones_param(d);
    wq_c_ = xavier(d, d, rng);
    wk_c_ = xavier(d, d, rng);
    wv_c_ = xavier(d, d, rng);
    wo_c_ = xavier(d, d, rng);
  }
  norm_self_ = ones_param(d);
  wq_s_ = xavier(d, d, rng);
  wk_s_ = xavier(d, d, rng);
  wv_s_ = xavier(d, d, rng);
  wo_s_ = xavier(d, d, rng);
  norm_ffn_ = ones_param(d);
  w_up_ = xavier(d, shape.d_ffn, rng);
  w_down_ = xavier(shape.d_ffn, d, rng);
}

ContextKV DecoderBlock::project_context(const Tensor& context) const {
  if (!shape_.cross) return {};
  return {matmul(rms_norm(context, norm_key_), wk_c_), matmul(rms_norm(context, norm_value_), wv_c_)};
}

Tensor DecoderBlock::cross_part(const Tensor& h, const ContextKV* ctx, const kernels::AttentionMask& mask) const {
  if (!shape_.cross) return h;
  if (ctx == nullptr || !ctx->keys.defined()) throw ContractError("DecoderBlock: cross-attention needs a context");
  Tensor q = matmul(rms_norm(h, norm_cross_), wq_c_);
  return h + matmul(attention(q, ctx->keys, ctx->values, shape_.n_heads, mask), wo_c_);
}

Tensor DecoderBlock::ffn_part(const Tensor& h) const {
  return h + matmul(silu(matmul(rms_norm(h, norm_ffn_), w_up_)), w_down_);
}

Tensor DecoderBlock::forward(const Tensor& h, const ContextKV* ctx, const kernels::AttentionMask& self_mask,
                             const kernels::AttentionMask& cross_mask) const {
  Tensor x = cross_part(h, ctx, cross_mask);
  Tensor n = rms_norm(x, norm_self_);
  Tensor q = matmul(n, wq_s_);
  Tensor k = matmul(n, wk_s_);
  Tensor v = matmul(n, wv_s_);
  x = x + matmul(attention(q, k, v, shape_.n_heads, self_mask), wo_s_);
  return ffn_part(x);
}

Tensor DecoderBlock::step(const Tensor& h_new, const ContextKV* ctx, SelfKV& cache) const {
  Tensor x = cross_part(h_new, ctx, kernels::AttentionMask::none());
  Tensor n = rms_norm(x, norm_self_);
  Tensor q = matmul(n, wq_s_);
  Tensor k = matmul(n, wk_s_);
  Tensor v = matmul(n, wv_s_);
  const std::size_t offset = cache.length();
  if (offset == 0) {
    cache.keys = k;
    cache.values = v;
  } else {
    const Tensor ks[] = {cache.keys, k};
    const Tensor vs[] = {cache.values, v};
    cache.keys = concat_rows(ks);
    cache.values = concat_rows(vs);
  }
  x = x + matmul(attention(q, cache.keys, cache.values, shape_.n_heads, kernels::AttentionMask::causal(offset)), wo_s_);
  return ffn_part(x);
}

void DecoderBlock::collect(const std::string& prefix, ParamList& out) const {
  if (shape_.cross) {
    out.push_back({prefix + ".cross.norm", norm_cross_});
    out.push_back({prefix + ".cross.norm_k", norm_key_});
    out.push_back({prefix + ".cross.norm_v", norm_value_});
    out.push_back({prefix + ".cross.wq", wq_c_});
    out.push_back({prefix + ".cross.wk", wk_c_});
    out.push_back({prefix + ".cross.wv", wv_c_});
    out.push_back({prefix + ".cross.wo", wo_c_});
  }
  out.push_back({prefix + ".self.norm", norm_self_});
  out.push_back({prefix + ".self.wq", wq_s_});
  out.push_back({prefix + ".self.wk", wk_s_});
  out.push_back({prefix + ".self.wv", wv_s_});
  out.push_back({prefix + ".self.wo", wo_s_});
  out.push_back({prefix + ".ffn.norm", norm_ffn_});
  out.push_back({prefix + ".ffn.up", w_up_});
  out.push_back({prefix + ".ffn.down", w_down_});
}

}  // namespace slategen::nn
