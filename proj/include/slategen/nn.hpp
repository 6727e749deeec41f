// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "slategen/random.hpp"
#include "slategen/tensor.hpp"

namespace slategen::nn {

struct NamedParam {
  std::string name;
  Tensor tensor;
};

using ParamList = std::vector<NamedParam>;

std::size_t count_parameters(const ParamList& params);

/// Trainable leaf initialized uniformly in ±sqrt(6/(fan_in+fan_out)).
Tensor xavier(std::size_t fan_in, std::size_t fan_out, Rng& rng);
/// Trainable [rows×cols] leaf with N(0, stddev²) entries.
Tensor normal_param(std::size_t rows, std::size_t cols, double stddev, Rng& rng);
Tensor zeros_param(Shape shape);
Tensor ones_param(std::size_t n);

class Linear {
 public:
  Linear() = default;
  Linear(std::size_t in, std::size_t out, bool bias, Rng& rng);

  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;

  Tensor weight;  // [in×out]
  Tensor bias;    // [out], undefined when bias-free
};

/// Two linear layers with a SiLU in between.
class Mlp {
 public:
  Mlp() = default;
  Mlp(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng);

  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;

  Linear first;
  Linear second;
};

/// Keys and values derived from a context sequence for one block's cross-attention.
struct ContextKV {
  Tensor keys;
  Tensor values;
};

/// Self-attention keys/values of already-processed positions for one block.
struct SelfKV {
  Tensor keys;
  Tensor values;

  std::size_t length() const { return keys.defined() ? keys.rows() : 0; }
  std::size_t bytes() const { return keys.defined() ? 2 * keys.size() * sizeof(float) : 0; }
};

struct BlockShape {
  std::size_t d_model = 64;
  std::size_t d_ffn = 256;
  std::size_t n_heads = 4;
  bool cross = true;
};

/// Pre-norm transformer block: cross-attention to a context (optional), masked
/// self-attention, then FFN, each wrapped in a residual connection. Keys and
/// values of the context get their own per-block RMSNorms.
class DecoderBlock {
 public:
  DecoderBlock() = default;
  DecoderBlock(const BlockShape& shape, Rng& rng);

  ContextKV project_context(const Tensor& context) const;

  /// Full-sequence forward. cross_mask restricts which context rows each query
  /// row sees, for batches that stack several users.
  Tensor forward(const Tensor& h, const ContextKV* ctx, const kernels::AttentionMask& self_mask,
                 const kernels::AttentionMask& cross_mask = kernels::AttentionMask::none()) const;

  /// Incremental forward of new rows that follow the cached positions; appends
  /// their keys/values to the cache. Row-for-row identical to forward().
  Tensor step(const Tensor& h_new, const ContextKV* ctx, SelfKV& cache) const;

  void collect(const std::string& prefix, ParamList& out) const;
  const BlockShape& shape() const { return shape_; }

 private:
  Tensor cross_part(const Tensor& h, const ContextKV* ctx, const kernels::AttentionMask& mask) const;
  Tensor ffn_part(const Tensor& h) const;

  BlockShape shape_;
  Tensor norm_cross_, norm_key_, norm_value_;
  Tensor wq_c_, wk_c_, wv_c_, wo_c_;
  Tensor norm_self_;
  Tensor wq_s_, wk_s_, wv_s_, wo_s_;
  Tensor norm_ffn_;
  Tensor w_up_, w_down_;
};

}  // namespace slategen::nn
