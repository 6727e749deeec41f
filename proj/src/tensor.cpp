// SPDX-License-Identifier: Apache-2.0
#include "slategen/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace slategen {

using detail::Node;

namespace {

thread_local Precision g_precision = Precision::f32;
thread_local bool g_grad_enabled = true;

std::size_t product(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

void check_shape(const Shape& s) {
  for (auto d : s)
    if (d == 0) throw DimensionError("zero-length dimension in shape " + shape_string(s));
}

const Tensor& need(const Tensor& t, const char* op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor");
  return t;
}

void require_2d(const Tensor& t, const char* op) {
  if (t.ndim() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_string(t.shape()));
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
}

// Builds the output node: rounds to the active precision, rejects non-finite
// values, and wires the backward closure when any input needs gradients.
Tensor make_op(const char* op, Shape shape, std::vector<double> value, std::initializer_list<const Tensor*> inputs,
               std::function<void(Node&)> backward) {
  if (g_precision == Precision::f32)
    for (auto& x : value) x = static_cast<double>(static_cast<float>(x));
  for (double x : value)
    if (!std::isfinite(x)) throw NumericError(std::string("non-finite value produced by ") + op);
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  bool rg = false;
  if (g_grad_enabled)
    for (const Tensor* t : inputs) rg = rg || t->requires_grad();
  if (rg) {
    n->requires_grad = true;
    for (const Tensor* t : inputs) n->parents.push_back(t->node_ptr());
    n->backward = std::move(backward);
  }
  return Tensor(std::move(n));
}

// Parent i's gradient buffer, or nullptr when it does not need one.
double* grad_of(Node& self, std::size_t i) {
  Node& p = *self.parents[i];
  if (!p.requires_grad) return nullptr;
  p.ensure_grad();
  return p.grad.data();
}

}  // namespace

std::string shape_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

Precision current_precision() { return g_precision; }
PrecisionScope::PrecisionScope(Precision p) : saved_(g_precision) { g_precision = p; }
PrecisionScope::~PrecisionScope() { g_precision = saved_; }

bool grad_enabled() { return g_grad_enabled; }
NoGradScope::NoGradScope() : saved_(g_grad_enabled) { g_grad_enabled = false; }
NoGradScope::~NoGradScope() { g_grad_enabled = saved_; }

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  check_shape(shape);
  const auto n = product(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  check_shape(shape);
  if (product(shape) != values.size())
    throw DimensionError("Tensor::from: shape " + shape_string(shape) + " does not hold " +
                         std::to_string(values.size()) + " values");
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(double v, bool requires_grad) { return from({1}, {v}, requires_grad); }

const Shape& Tensor::shape() const { return need(*this, "shape").node_->shape; }
std::size_t Tensor::size() const { return values().size(); }
std::size_t Tensor::dim(std::size_t i) const { return shape().at(i); }
std::size_t Tensor::rows() const { return size() / cols(); }
std::size_t Tensor::cols() const { return shape().back(); }

std::span<const double> Tensor::values() const { return need(*this, "values").node_->value; }
std::span<double> Tensor::mutable_values() { return need(*this, "mutable_values").node_->value; }
std::span<const double> Tensor::grad() const { return need(*this, "grad").node_->grad; }
std::span<double> Tensor::mutable_grad() {
  node_->ensure_grad();
  return node_->grad;
}
bool Tensor::has_grad() const { return defined() && !node_->grad.empty(); }
void Tensor::zero_grad() {
  if (defined()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}
bool Tensor::requires_grad() const { return defined() && node_->requires_grad; }
const char* Tensor::op() const { return need(*this, "op").node_->op; }

double Tensor::item() const {
  if (size() != 1) throw ContractError("item(): tensor has " + std::to_string(size()) + " elements");
  return node_->value[0];
}
double Tensor::at(std::size_t i) const { return values()[i]; }
double Tensor::at(std::size_t r, std::size_t c) const { return values()[r * cols() + c]; }

void Tensor::backward() const {
  if (size() != 1) throw ContractError("backward(): root must be a single element, got " + shape_string(shape()));
  Tape::record(*this).replay();
}

Tensor Tensor::clone(bool requires_grad) const {
  return from(shape(), std::vector<double>(values().begin(), values().end()), requires_grad);
}

// ---------------------------------------------------------------------------
// Tape

Tape Tape::record(const Tensor& root) {
  Tape t;
  t.root_ = root.node_ptr();
  if (!t.root_ || !t.root_->requires_grad) return t;
  std::unordered_set<Node*> seen;
  // Iterative post-order DFS: parents land before their consumers.
  std::vector<std::pair<Node*, std::size_t>> stack{{t.root_.get(), 0}};
  seen.insert(t.root_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      t.order_.push_back(node);
      stack.pop_back();
    }
  }
  return t;
}

std::vector<std::string_view> Tape::ops() const {
  std::vector<std::string_view> out;
  out.reserve(order_.size());
  for (auto* n : order_) out.emplace_back(n->op);
  return out;
}

std::size_t Tape::replay() {
  if (order_.empty()) return 0;
  root_->ensure_grad();
  root_->grad[0] += 1.0;
  std::size_t visited = 0;
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    Node* n = *it;
    if (!n->backward) continue;
    n->ensure_grad();
    n->backward(*n);
    ++visited;
  }
  return visited;
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  need(a, "matmul");
  need(b, "matmul");
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw DimensionError("matmul: inner dimensions differ " + shape_string(a.shape()) + " · " +
                         shape_string(b.shape()));
  std::vector<double> out(m * n, 0.0);
  kernels::matmul_nn(a.values(), b.values(), out, m, k, n);
  return make_op("matmul", {m, n}, std::move(out), {&a, &b}, [m, k, n](Node& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (double* ga = grad_of(self, 0)) kernels::matmul_nt(self.grad, bv, {ga, m * k}, m, n, k);
    if (double* gb = grad_of(self, 1)) kernels::matmul_tn(av, self.grad, {gb, k * n}, k, m, n);
  });
}

Tensor matmul_t(const Tensor& a, const Tensor& b) {
  need(a, "matmul_t");
  need(b, "matmul_t");
  require_2d(a, "matmul_t");
  require_2d(b, "matmul_t");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k)
    throw DimensionError("matmul_t: inner dimensions differ " + shape_string(a.shape()) + " · " +
                         shape_string(b.shape()) + "ᵀ");
  std::vector<double> out(m * n, 0.0);
  kernels::matmul_nt(a.values(), b.values(), out, m, k, n);
  return make_op("matmul_t", {m, n}, std::move(out), {&a, &b}, [m, k, n](Node& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (double* ga = grad_of(self, 0)) kernels::matmul_nn(self.grad, bv, {ga, m * k}, m, n, k);
    if (double* gb = grad_of(self, 1)) kernels::matmul_tn(self.grad, av, {gb, n * k}, n, m, k);
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same(need(a, "add"), need(b, "add"), "add");
  std::vector<double> out(a.size());
  const auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return make_op("add", a.shape(), std::move(out), {&a, &b}, [](Node& self) {
    for (std::size_t p = 0; p < 2; ++p)
      if (double* g = grad_of(self, p))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same(need(a, "sub"), need(b, "sub"), "sub");
  std::vector<double> out(a.size());
  const auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return make_op("sub", a.shape(), std::move(out), {&a, &b}, [](Node& self) {
    if (double* g = grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    if (double* g = grad_of(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same(need(a, "mul"), need(b, "mul"), "mul");
  std::vector<double> out(a.size());
  const auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return make_op("mul", a.shape(), std::move(out), {&a, &b}, [](Node& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (double* g = grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bv[i];
    if (double* g = grad_of(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * av[i];
  });
}

Tensor scale(const Tensor& a, double s) {
  need(a, "scale");
  std::vector<double> out(a.values().begin(), a.values().end());
  for (auto& x : out) x *= s;
  return make_op("scale", a.shape(), std::move(out), {&a}, [s](Node& self) {
    if (double* g = grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * s;
  });
}

Tensor add_row(const Tensor& a, const Tensor& row) {
  need(a, "add_row");
  need(row, "add_row");
  const std::size_t d = a.cols();
  if (row.size() != d)
    throw DimensionError("add_row: row " + shape_string(row.shape()) + " does not match " + shape_string(a.shape()));
  std::vector<double> out(a.values().begin(), a.values().end());
  const auto rv = row.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += rv[i % d];
  return make_op("add_row", a.shape(), std::move(out), {&a, &row}, [d](Node& self) {
    if (double* g = grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    if (double* g = grad_of(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % d] += self.grad[i];
  });
}

Tensor silu(const Tensor& x) {
  need(x, "silu");
  std::vector<double> out(x.size());
  const auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] / (1.0 + std::exp(-xv[i]));
  return make_op("silu", x.shape(), std::move(out), {&x}, [](Node& self) {
    const auto& xv = self.parents[0]->value;
    if (double* g = grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        const double s = 1.0 / (1.0 + std::exp(-xv[i]));
        g[i] += self.grad[i] * s * (1.0 + xv[i] * (1.0 - s));
      }
  });
}

Tensor log_sigmoid(const Tensor& x) {
  need(x, "log_sigmoid");
  std::vector<double> out(x.size());
  const auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(xv[i], 0.0) - std::log1p(std::exp(-std::abs(xv[i])));
  return make_op("log_sigmoid", x.shape(), std::move(out), {&x}, [](Node& self) {
    const auto& xv = self.parents[0]->value;
    if (double* g = grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] / (1.0 + std::exp(xv[i]));
  });
}

Tensor sum(const Tensor& x) {
  need(x, "sum");
  double s = 0.0;
  for (double v : x.values()) s += v;
  return make_op("sum", {1}, {s}, {&x}, [](Node& self) {
    if (double* g = grad_of(self, 0))
      for (std::size_t i = 0; i < self.parents[0]->value.size(); ++i) g[i] += self.grad[0];
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(need(x, "mean").size())); }

Tensor sum_squares(const Tensor& x) {
  need(x, "sum_squares");
  double s = 0.0;
  for (double v : x.values()) s += v * v;
  return make_op("sum_squares", {1}, {s}, {&x}, [](Node& self) {
    const auto& xv = self.parents[0]->value;
    if (double* g = grad_of(self, 0))
      for (std::size_t i = 0; i < xv.size(); ++i) g[i] += 2.0 * xv[i] * self.grad[0];
  });
}

Tensor row_sum_squares(const Tensor& x) {
  need(x, "row_sum_squares");
  const std::size_t n = x.rows(), d = x.cols();
  std::vector<double> out(n, 0.0);
  const auto xv = x.values();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out[r] += xv[r * d + c] * xv[r * d + c];
  return make_op("row_sum_squares", {n}, std::move(out), {&x}, [n, d](Node& self) {
    const auto& xv = self.parents[0]->value;
    if (double* g = grad_of(self, 0))
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) g[r * d + c] += 2.0 * xv[r * d + c] * self.grad[r];
  });
}

// ---------------------------------------------------------------------------
// Normalization and probability

Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps) {
  need(x, "rms_norm");
  need(gain, "rms_norm");
  const std::size_t d = x.cols();
  if (d == 0) throw DimensionError("rms_norm: zero-length last dimension");
  if (gain.size() != d)
    throw DimensionError("rms_norm: gain " + shape_string(gain.shape()) + " does not match " +
                         shape_string(x.shape()));
  const std::size_t n = x.rows();
  const auto xv = x.values(), gv = gain.values();
  std::vector<double> inv(n);
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < n; ++r) {
    double ms = 0.0;
    for (std::size_t c = 0; c < d; ++c) ms += xv[r * d + c] * xv[r * d + c];
    inv[r] = 1.0 / std::sqrt(ms / static_cast<double>(d) + eps);
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = xv[r * d + c] * inv[r] * gv[c];
  }
  return make_op("rms_norm", x.shape(), std::move(out), {&x, &gain}, [n, d, inv = std::move(inv)](Node& self) {
    const auto& xv = self.parents[0]->value;
    const auto& gv = self.parents[1]->value;
    double* gx = grad_of(self, 0);
    double* gg = grad_of(self, 1);
    for (std::size_t r = 0; r < n; ++r) {
      const double* xr = xv.data() + r * d;
      const double* dy = self.grad.data() + r * d;
      if (gg)
        for (std::size_t c = 0; c < d; ++c) gg[c] += dy[c] * xr[c] * inv[r];
      if (gx) {
        double dot = 0.0;
        for (std::size_t c = 0; c < d; ++c) dot += dy[c] * gv[c] * xr[c] * inv[r];
        dot /= static_cast<double>(d);
        for (std::size_t c = 0; c < d; ++c) gx[r * d + c] += inv[r] * (dy[c] * gv[c] - xr[c] * inv[r] * dot);
      }
    }
  });
}

Tensor normalize_rows(const Tensor& x) {
  need(x, "normalize_rows");
  const std::size_t n = x.rows(), d = x.cols();
  const auto xv = x.values();
  std::vector<double> norms(n);
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < n; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += xv[r * d + c] * xv[r * d + c];
    norms[r] = std::max(std::sqrt(s), 1e-12);
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = xv[r * d + c] / norms[r];
  }
  return make_op("normalize_rows", x.shape(), std::move(out), {&x}, [n, d, norms = std::move(norms)](Node& self) {
    const auto& xv = self.parents[0]->value;
    if (double* g = grad_of(self, 0))
      for (std::size_t r = 0; r < n; ++r) {
        const double* dy = self.grad.data() + r * d;
        double dot = 0.0;
        for (std::size_t c = 0; c < d; ++c) dot += dy[c] * xv[r * d + c];
        dot /= norms[r] * norms[r];
        for (std::size_t c = 0; c < d; ++c) g[r * d + c] += (dy[c] - xv[r * d + c] * dot) / norms[r];
      }
  });
}

Tensor softmax_rows(const Tensor& x) {
  need(x, "softmax_rows");
  const std::size_t n = x.rows(), d = x.cols();
  const auto xv = x.values();
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < n; ++r) {
    const double* xr = xv.data() + r * d;
    const double mx = *std::max_element(xr, xr + d);
    double z = 0.0;
    for (std::size_t c = 0; c < d; ++c) z += (out[r * d + c] = std::exp(xr[c] - mx));
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] /= z;
  }
  auto probs = out;
  return make_op("softmax_rows", x.shape(), std::move(out), {&x}, [n, d, probs = std::move(probs)](Node& self) {
    if (double* g = grad_of(self, 0))
      for (std::size_t r = 0; r < n; ++r) {
        const double* p = probs.data() + r * d;
        const double* dy = self.grad.data() + r * d;
        double dot = 0.0;
        for (std::size_t c = 0; c < d; ++c) dot += dy[c] * p[c];
        for (std::size_t c = 0; c < d; ++c) g[r * d + c] += p[c] * (dy[c] - dot);
      }
  });
}

namespace {

void check_targets(std::size_t n, std::size_t v, std::span<const std::uint32_t> targets, const char* op) {
  if (targets.size() != n)
    throw DimensionError(std::string(op) + ": " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(n) + " rows");
  for (auto t : targets)
    if (t >= v)
      throw IndexError(std::string(op) + ": target " + std::to_string(t) + " out of range for " + std::to_string(v) +
                       " classes");
}

// Row-wise softmax over the included entries; excluded entries get 0.
void masked_softmax(std::span<const double> x, std::span<const std::uint8_t> mask, std::size_t n, std::size_t v,
                    std::vector<double>& probs, std::vector<double>& lse) {
  probs.assign(n * v, 0.0);
  lse.assign(n, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    const double* xr = x.data() + r * v;
    auto on = [&](std::size_t c) { return mask.empty() || mask[r * v + c] != 0; };
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < v; ++c)
      if (on(c)) mx = std::max(mx, xr[c]);
    double z = 0.0;
    for (std::size_t c = 0; c < v; ++c)
      if (on(c)) z += (probs[r * v + c] = std::exp(xr[c] - mx));
    for (std::size_t c = 0; c < v; ++c) probs[r * v + c] /= z;
    lse[r] = mx + std::log(z);
  }
}

}  // namespace

Tensor softmax_ce(const Tensor& logits, std::span<const std::uint32_t> targets, Reduction reduction,
                  std::span<const std::uint8_t> mask) {
  need(logits, "softmax_ce");
  const std::size_t n = logits.rows(), v = logits.cols();
  check_targets(n, v, targets, "softmax_ce");
  if (!mask.empty() && mask.size() != logits.size()) throw DimensionError("softmax_ce: mask size mismatch");
  for (std::size_t r = 0; r < n && !mask.empty(); ++r)
    if (!mask[r * v + targets[r]]) throw ContractError("softmax_ce: target excluded by mask");
  std::vector<double> probs, lse;
  masked_softmax(logits.values(), mask, n, v, probs, lse);
  double total = 0.0;
  const auto xv = logits.values();
  for (std::size_t r = 0; r < n; ++r) total += lse[r] - xv[r * v + targets[r]];
  const double w = reduction == Reduction::mean ? 1.0 / static_cast<double>(n) : 1.0;
  std::vector<std::uint32_t> tgt(targets.begin(), targets.end());
  return make_op("softmax_ce", {1}, {total * w}, {&logits},
                 [n, v, w, probs = std::move(probs), tgt = std::move(tgt)](Node& self) {
                   if (double* g = grad_of(self, 0)) {
                     const double up = self.grad[0] * w;
                     for (std::size_t r = 0; r < n; ++r) {
                       for (std::size_t c = 0; c < v; ++c) g[r * v + c] += up * probs[r * v + c];
                       g[r * v + tgt[r]] -= up;
                     }
                   }
                 });
}

Tensor log_softmax_pick(const Tensor& logits, std::span<const std::uint32_t> targets) {
  need(logits, "log_softmax_pick");
  const std::size_t n = logits.rows(), v = logits.cols();
  check_targets(n, v, targets, "log_softmax_pick");
  std::vector<double> probs, lse;
  masked_softmax(logits.values(), {}, n, v, probs, lse);
  std::vector<double> out(n);
  const auto xv = logits.values();
  for (std::size_t r = 0; r < n; ++r) out[r] = xv[r * v + targets[r]] - lse[r];
  std::vector<std::uint32_t> tgt(targets.begin(), targets.end());
  return make_op("log_softmax_pick", {n}, std::move(out), {&logits},
                 [n, v, probs = std::move(probs), tgt = std::move(tgt)](Node& self) {
                   if (double* g = grad_of(self, 0))
                     for (std::size_t r = 0; r < n; ++r) {
                       const double up = self.grad[r];
                       for (std::size_t c = 0; c < v; ++c) g[r * v + c] -= up * probs[r * v + c];
                       g[r * v + tgt[r]] += up;
                     }
                 });
}

Tensor log_odds(const Tensor& log_prob, double eps) {
  need(log_prob, "log_odds");
  const auto lp = log_prob.values();
  std::vector<double> out(lp.size());
  std::vector<double> slope(lp.size());
  for (std::size_t i = 0; i < lp.size(); ++i) {
    const double p = std::exp(lp[i]);
    if (p < eps || p > 1.0 - eps) {
      const double pc = std::clamp(p, eps, 1.0 - eps);
      out[i] = std::log(pc) - std::log1p(-pc);
      slope[i] = 0.0;
    } else {
      // 1 − π computed as −expm1(log π) keeps precision near π → 1.
      const double q = -std::expm1(lp[i]);
      out[i] = lp[i] - std::log(q);
      slope[i] = 1.0 / q;
    }
  }
  return make_op("log_odds", log_prob.shape(), std::move(out), {&log_prob}, [slope = std::move(slope)](Node& self) {
    if (double* g = grad_of(self, 0))
      for (std::size_t i = 0; i < slope.size(); ++i) g[i] += self.grad[i] * slope[i];
  });
}

// ---------------------------------------------------------------------------
// Attention

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads, bool causal) {
  if (causal && need(q, "attention").rows() != need(k, "attention").rows())
    throw ContractError("attention: causal mask requires equal query and key lengths, got " +
                        std::to_string(q.rows()) + " and " + std::to_string(k.rows()));
  return attention(q, k, v, n_heads, causal ? kernels::AttentionMask::causal() : kernels::AttentionMask::none());
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads,
                 const kernels::AttentionMask& mask) {
  need(q, "attention");
  need(k, "attention");
  need(v, "attention");
  require_2d(q, "attention");
  require_2d(k, "attention");
  require_same(k, v, "attention(k,v)");
  const std::size_t lq = q.dim(0), lk = k.dim(0), dm = q.dim(1);
  if (k.dim(1) != dm)
    throw DimensionError("attention: head dimension mismatch " + shape_string(q.shape()) + " vs " +
                         shape_string(k.shape()));
  if (n_heads == 0 || dm % n_heads != 0)
    throw ContractError("attention: model width " + std::to_string(dm) + " not divisible by " +
                        std::to_string(n_heads) + " heads");
  using Kind = kernels::AttentionMask::Kind;
  if (mask.kind == Kind::causal && mask.query_offset + lq != lk)
    throw ContractError("attention: causal mask needs offset + query length == key length");
  if (mask.kind == Kind::block_causal && (lq != lk || mask.block == 0 || lq % mask.block != 0))
    throw ContractError("attention: block-causal mask needs equal lengths divisible by the block size");
  if (mask.kind == Kind::ranges && (!mask.bounds || mask.bounds->size() != 2 * lq))
    throw ContractError("attention: range mask needs one [first, last) pair per query row");
  auto offsets = mask.prob_offsets(lq, lk);
  for (std::size_t i = 0; i < lq; ++i)
    if (offsets[i + 1] == offsets[i]) throw ContractError("attention: query row " + std::to_string(i) + " sees no keys");
  std::vector<double> out(lq * dm, 0.0);
  std::vector<double> probs(n_heads * offsets[lq], 0.0);
  kernels::attention(q.values(), k.values(), v.values(), out, probs, lq, lk, dm, n_heads, mask);
  return make_op(
      "attention", {lq, dm}, std::move(out), {&q, &k, &v},
      [lq, lk, dm, n_heads, mask, offsets = std::move(offsets), probs = std::move(probs)](Node& self) {
        const auto& qv = self.parents[0]->value;
        const auto& kv = self.parents[1]->value;
        const auto& vv = self.parents[2]->value;
        double* gq = grad_of(self, 0);
        double* gk = grad_of(self, 1);
        double* gv = grad_of(self, 2);
        const std::size_t dh = dm / n_heads;
        const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
        std::vector<double> ds(lk);
        for (std::size_t h = 0; h < n_heads; ++h)
          for (std::size_t i = 0; i < lq; ++i) {
            std::size_t first = 0, last = 0;
            mask.key_range(i, lk, first, last);
            const double* p = probs.data() + h * offsets[lq] + offsets[i];
            const double* go = self.grad.data() + i * dm + h * dh;
            double dot = 0.0;
            for (std::size_t j = first; j < last; ++j) {
              const double* vj = vv.data() + j * dm + h * dh;
              double dp = 0.0;
              for (std::size_t t = 0; t < dh; ++t) dp += go[t] * vj[t];
              ds[j] = dp;
              dot += dp * p[j - first];
              if (gv)
                for (std::size_t t = 0; t < dh; ++t) gv[j * dm + h * dh + t] += p[j - first] * go[t];
            }
            for (std::size_t j = first; j < last; ++j) {
              const double s = p[j - first] * (ds[j] - dot) * sc;
              if (gq)
                for (std::size_t t = 0; t < dh; ++t) gq[i * dm + h * dh + t] += s * kv[j * dm + h * dh + t];
              if (gk)
                for (std::size_t t = 0; t < dh; ++t) gk[j * dm + h * dh + t] += s * qv[i * dm + h * dh + t];
            }
          }
      });
}

// ---------------------------------------------------------------------------
// Structural

Tensor gather_rows(const Tensor& table, std::span<const std::uint32_t> indices) {
  need(table, "gather_rows");
  const std::size_t v = table.rows(), d = table.cols();
  if (indices.empty()) throw DimensionError("gather_rows: no indices");
  std::vector<double> out(indices.size() * d);
  const auto tv = table.values();
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= v)
      throw IndexError("gather_rows: index " + std::to_string(indices[r]) + " out of range for " + std::to_string(v) +
                       " rows");
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(indices[r] * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(r * d));
  }
  std::vector<std::uint32_t> idx(indices.begin(), indices.end());
  return make_op("gather_rows", {indices.size(), d}, std::move(out), {&table}, [d, idx = std::move(idx)](Node& self) {
    if (double* g = grad_of(self, 0))
      for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::size_t c = 0; c < d; ++c) g[idx[r] * d + c] += self.grad[r * d + c];
  });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: nothing to concatenate");
  const std::size_t d = need(parts[0], "concat_rows").cols();
  std::size_t n = 0;
  for (const auto& p : parts) {
    if (need(p, "concat_rows").cols() != d)
      throw DimensionError("concat_rows: column mismatch " + shape_string(parts[0].shape()) + " vs " +
                           shape_string(p.shape()));
    n += p.rows();
  }
  std::vector<double> out;
  out.reserve(n * d);
  for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  auto n_parts = parts.size();
  bool rg = false;
  for (const auto& p : parts) rg = rg || p.requires_grad();
  // make_op takes a fixed input list; wire parents by hand for the variadic case.
  Tensor result = make_op("concat_rows", {n, d}, std::move(out), {}, {});
  if (rg && grad_enabled()) {
    Node* node = result.node();
    node->requires_grad = true;
    for (const auto& p : parts) node->parents.push_back(p.node_ptr());
    node->backward = [n_parts](Node& self) {
      std::size_t off = 0;
      for (std::size_t i = 0; i < n_parts; ++i) {
        const std::size_t len = self.parents[i]->value.size();
        if (double* g = grad_of(self, i))
          for (std::size_t t = 0; t < len; ++t) g[t] += self.grad[off + t];
        off += len;
      }
    };
  }
  return result;
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count) {
  need(x, "slice_rows");
  const std::size_t d = x.cols();
  if (count == 0 || begin + count > x.rows())
    throw IndexError("slice_rows: rows [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                     ") out of range for " + shape_string(x.shape()));
  const auto xv = x.values();
  std::vector<double> out(xv.begin() + static_cast<std::ptrdiff_t>(begin * d),
                          xv.begin() + static_cast<std::ptrdiff_t>((begin + count) * d));
  return make_op("slice_rows", {count, d}, std::move(out), {&x}, [begin, d](Node& self) {
    if (double* g = grad_of(self, 0))
      for (std::size_t t = 0; t < self.grad.size(); ++t) g[begin * d + t] += self.grad[t];
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  need(x, "reshape");
  check_shape(shape);
  if (product(shape) != x.size())
    throw DimensionError("reshape: " + shape_string(x.shape()) + " -> " + shape_string(shape));
  std::vector<double> out(x.values().begin(), x.values().end());
  return make_op("reshape", std::move(shape), std::move(out), {&x}, [](Node& self) {
    if (double* g = grad_of(self, 0))
      for (std::size_t t = 0; t < self.grad.size(); ++t) g[t] += self.grad[t];
  });
}

Tensor stop_gradient(const Tensor& x) { return need(x, "stop_gradient").clone(false); }

}  // namespace slategen
