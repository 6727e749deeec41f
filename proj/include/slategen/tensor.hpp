// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "slategen/kernels.hpp"

namespace slategen {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& s);

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

/// A forward op produced NaN or Inf.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Arithmetic mode for op outputs. In f32 mode every op output is rounded to the
/// nearest 32-bit float; f64 is the verification mode used by gradient checks.
enum class Precision { f32, f64 };

Precision current_precision();

class PrecisionScope {
 public:
  explicit PrecisionScope(Precision p);
  ~PrecisionScope();
  PrecisionScope(const PrecisionScope&) = delete;
  PrecisionScope& operator=(const PrecisionScope&) = delete;

 private:
  Precision saved_;
};

bool grad_enabled();

/// Disables graph recording on this thread for its lifetime.
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  bool saved_;
};

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Reads self.grad and accumulates into the parents' grads.
  std::function<void(Node& self)> backward;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

}  // namespace detail

class Tape;

/// Dense row-major tensor with reverse-mode autodiff. Copies share the
/// underlying node; values are immutable once an op has produced them.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t ndim() const { return shape().size(); }
  std::size_t size() const;
  std::size_t dim(std::size_t i) const;
  /// Product of all dimensions but the last.
  std::size_t rows() const;
  /// Last dimension.
  std::size_t cols() const;

  std::span<const double> values() const;
  /// Writable view for leaf tensors (parameters, optimizer updates).
  std::span<double> mutable_values();
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  bool has_grad() const;
  void zero_grad();

  bool requires_grad() const;
  const char* op() const;

  double item() const;
  double at(std::size_t i) const;
  double at(std::size_t r, std::size_t c) const;

  /// Reverse pass from a single-element tensor.
  void backward() const;

  /// Fresh leaf holding a copy of the values.
  Tensor clone(bool requires_grad = false) const;

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Topologically ordered record of the ops reachable from a root.
class Tape {
 public:
  static Tape record(const Tensor& root);

  std::size_t size() const { return order_.size(); }
  std::vector<std::string_view> ops() const;

  /// Seeds d(root)/d(root) = 1 and runs every backward closure once, in
  /// reverse topological order. Returns the number of closures invoked.
  std::size_t replay();

 private:
  std::shared_ptr<detail::Node> root_;
  std::vector<detail::Node*> order_;
};

enum class Reduction { mean, sum };

// Linear algebra and elementwise ops.
Tensor matmul(const Tensor& a, const Tensor& b);
/// a · bᵀ
Tensor matmul_t(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
/// a[…×d] + row[d], broadcast over rows.
Tensor add_row(const Tensor& a, const Tensor& row);
Tensor silu(const Tensor& x);
Tensor log_sigmoid(const Tensor& x);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum_squares(const Tensor& x);
/// Per-row squared L2 norm: [n×d] -> [n].
Tensor row_sum_squares(const Tensor& x);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }

inline constexpr double kRmsNormEps = 1e-6;

/// x / sqrt(mean(x²) + eps) * gain over the last dimension.
Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps = kRmsNormEps);
/// Row-wise unit-L2 normalization.
Tensor normalize_rows(const Tensor& x);
Tensor softmax_rows(const Tensor& x);

/// Negative log softmax probability of each target; optional mask excludes
/// entries (0 = excluded) from the normalizer.
Tensor softmax_ce(const Tensor& logits, std::span<const std::uint32_t> targets, Reduction reduction = Reduction::mean,
                  std::span<const std::uint8_t> mask = {});
/// log softmax(logits)[row, target] per row: [n×V] -> [n].
Tensor log_softmax_pick(const Tensor& logits, std::span<const std::uint32_t> targets);
/// log(π/(1−π)) with π = exp(log_prob) clamped to [eps, 1−eps].
Tensor log_odds(const Tensor& log_prob, double eps);

/// Multi-head attention; causal requires equal query and key lengths.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads, bool causal);
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads,
                 const kernels::AttentionMask& mask);

// Structural ops.
Tensor gather_rows(const Tensor& table, std::span<const std::uint32_t> indices);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count);
Tensor reshape(const Tensor& x, Shape shape);
/// Same values, no gradient path.
Tensor stop_gradient(const Tensor& x);

}  // namespace slategen
