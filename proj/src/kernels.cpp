// SPDX-License-Identifier: Apache-2.0
#include "slategen/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace slategen::kernels {

namespace {

// Below this many multiply-adds the fork/join overhead dominates.
constexpr std::size_t kParallelWork = std::size_t{1} << 16;

bool use_parallel(std::size_t work) { return max_workers() > 1 && work >= kParallelWork; }

inline void nn_row(const double* a, const double* b, double* c, std::size_t k, std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const double av = a[p];
    const double* brow = b + p * n;
    for (std::size_t j = 0; j < n; ++j) c[j] += av * brow[j];
  }
}

inline void nt_row(const double* a, const double* b, double* c, std::size_t k, std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) {
    const double* brow = b + j * k;
    double acc = c[j];
    for (std::size_t p = 0; p < k; ++p) acc += a[p] * brow[p];
    c[j] = acc;
  }
}

// Row i of aᵀ·b: sum over p of a[p][i] * b[p][:].
inline void tn_row(const double* a, const double* b, double* c, std::size_t i, std::size_t m, std::size_t k,
                   std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const double av = a[p * m + i];
    const double* brow = b + p * n;
    for (std::size_t j = 0; j < n; ++j) c[j] += av * brow[j];
  }
}

// Rows [r0, r1) of c += a·b, four rows at a time so each row of b is loaded
// once per block. Every c[i][j] still accumulates over p in increasing order,
// which keeps this bitwise equal to nn_row.
void nn_rows_blocked(const double* a, const double* b, double* c, std::size_t r0, std::size_t r1, std::size_t k,
                     std::size_t n) {
  std::size_t i = r0;
  for (; i + 4 <= r1; i += 4) {
    double* __restrict c0 = c + i * n;
    double* __restrict c1 = c0 + n;
    double* __restrict c2 = c1 + n;
    double* __restrict c3 = c2 + n;
    const double* a0 = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double v0 = a0[p], v1 = a0[k + p], v2 = a0[2 * k + p], v3 = a0[3 * k + p];
      const double* __restrict brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        const double bv = brow[j];
        c0[j] += v0 * bv;
        c1[j] += v1 * bv;
        c2[j] += v2 * bv;
        c3[j] += v3 * bv;
      }
    }
  }
  for (; i < r1; ++i) nn_row(a + i * k, b, c + i * n, k, n);
}

// [rows×cols] -> [cols×rows]
std::vector<double> transposed(const double* x, std::size_t rows, std::size_t cols) {
  std::vector<double> t(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t q = 0; q < cols; ++q) t[q * rows + r] = x[r * cols + q];
  return t;
}

constexpr std::size_t kRowBlock = 16;

void nn_fast(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n, bool parallel) {
  if (!parallel) {
    nn_rows_blocked(a, b, c, 0, m, k, n);
    return;
  }
  const auto blocks = static_cast<std::ptrdiff_t>((m + kRowBlock - 1) / kRowBlock);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t t = 0; t < blocks; ++t) {
    const std::size_t r0 = static_cast<std::size_t>(t) * kRowBlock;
    nn_rows_blocked(a, b, c, r0, std::min(m, r0 + kRowBlock), k, n);
  }
}

void attention_row(const double* q, const double* k, const double* v, double* out, double* probs,
                   const std::size_t* offsets, std::size_t i, std::size_t h, std::size_t lq, std::size_t lk,
                   std::size_t dm, std::size_t dh, const AttentionMask& mask) {
  std::size_t first = 0;
  std::size_t last = 0;
  mask.key_range(i, lk, first, last);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const double* qi = q + i * dm + h * dh;
  double* p = probs + h * offsets[lq] + offsets[i];
  double* o = out + i * dm + h * dh;
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = first; j < last; ++j) {
    const double* kj = k + j * dm + h * dh;
    double s = 0.0;
    for (std::size_t t = 0; t < dh; ++t) s += qi[t] * kj[t];
    s *= scale;
    p[j - first] = s;
    mx = std::max(mx, s);
  }
  double denom = 0.0;
  for (std::size_t j = first; j < last; ++j) {
    p[j - first] = std::exp(p[j - first] - mx);
    denom += p[j - first];
  }
  for (std::size_t j = first; j < last; ++j) p[j - first] /= denom;
  for (std::size_t j = first; j < last; ++j) {
    const double* vj = v + j * dm + h * dh;
    const double w = p[j - first];
    for (std::size_t t = 0; t < dh; ++t) o[t] += w * vj[t];
  }
}

std::uint32_t nearest_one(const double* x, const double* codebook, std::size_t k, std::size_t dim) {
  std::uint32_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < k; ++c) {
    const double* e = codebook + c * dim;
    double d = 0.0;
    for (std::size_t t = 0; t < dim; ++t) {
      const double diff = x[t] - e[t];
      d += diff * diff;
    }
    if (d < best_d) {
      best_d = d;
      best = static_cast<std::uint32_t>(c);
    }
  }
  return best;
}

}  // namespace

int max_workers() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void set_workers(int n) {
#ifdef _OPENMP
  omp_set_num_threads(std::max(1, n));
#else
  (void)n;
#endif
}

void AttentionMask::key_range(std::size_t i, std::size_t n_keys, std::size_t& first, std::size_t& last) const {
  switch (kind) {
    case Kind::none:
      first = 0;
      last = n_keys;
      break;
    case Kind::causal:
      first = 0;
      last = std::min(n_keys, query_offset + i + 1);
      break;
    case Kind::block_causal:
      first = (i / block) * block;
      last = std::min(n_keys, i + 1);
      break;
    case Kind::ranges:
      first = std::min<std::size_t>((*bounds)[2 * i], n_keys);
      last = std::clamp<std::size_t>((*bounds)[2 * i + 1], first, n_keys);
      break;
  }
}

std::vector<std::size_t> AttentionMask::prob_offsets(std::size_t lq, std::size_t lk) const {
  std::vector<std::size_t> off(lq + 1, 0);
  for (std::size_t i = 0; i < lq; ++i) {
    std::size_t first = 0, last = 0;
    key_range(i, lk, first, last);
    off[i + 1] = off[i] + (last - first);
  }
  return off;
}

void matmul_nn_serial(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
                      std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) nn_row(a.data() + i * k, b.data(), c.data() + i * n, k, n);
}

void matmul_nn_parallel(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
                        std::size_t k, std::size_t n) {
  nn_fast(a.data(), b.data(), c.data(), m, k, n, true);
}

void matmul_nn(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
               std::size_t k, std::size_t n) {
  nn_fast(a.data(), b.data(), c.data(), m, k, n, use_parallel(m * k * n));
}

void matmul_nt_serial(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
                      std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) nt_row(a.data() + i * k, b.data(), c.data() + i * n, k, n);
}

void matmul_nt_parallel(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
                        std::size_t k, std::size_t n) {
  const auto bt = transposed(b.data(), n, k);
  nn_fast(a.data(), bt.data(), c.data(), m, k, n, true);
}

void matmul_nt(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
               std::size_t k, std::size_t n) {
  const auto bt = transposed(b.data(), n, k);
  nn_fast(a.data(), bt.data(), c.data(), m, k, n, use_parallel(m * k * n));
}

void matmul_tn_serial(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
                      std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) tn_row(a.data(), b.data(), c.data() + i * n, i, m, k, n);
}

void matmul_tn_parallel(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
                        std::size_t k, std::size_t n) {
  const auto at = transposed(a.data(), k, m);
  nn_fast(at.data(), b.data(), c.data(), m, k, n, true);
}

void matmul_tn(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
               std::size_t k, std::size_t n) {
  const auto at = transposed(a.data(), k, m);
  nn_fast(at.data(), b.data(), c.data(), m, k, n, use_parallel(m * k * n));
}

void attention_serial(std::span<const double> q, std::span<const double> k, std::span<const double> v,
                      std::span<double> out, std::span<double> probs, std::size_t lq, std::size_t lk, std::size_t dm,
                      std::size_t heads, const AttentionMask& mask) {
  const std::size_t dh = dm / heads;
  const auto off = mask.prob_offsets(lq, lk);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < lq; ++i)
      attention_row(q.data(), k.data(), v.data(), out.data(), probs.data(), off.data(), i, h, lq, lk, dm, dh, mask);
}

void attention_parallel(std::span<const double> q, std::span<const double> k, std::span<const double> v,
                        std::span<double> out, std::span<double> probs, std::size_t lq, std::size_t lk,
                        std::size_t dm, std::size_t heads, const AttentionMask& mask) {
  const std::size_t dh = dm / heads;
  const auto off = mask.prob_offsets(lq, lk);
  const auto total = static_cast<std::ptrdiff_t>(heads * lq);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t t = 0; t < total; ++t) {
    const auto h = static_cast<std::size_t>(t) / lq;
    const auto i = static_cast<std::size_t>(t) % lq;
    attention_row(q.data(), k.data(), v.data(), out.data(), probs.data(), off.data(), i, h, lq, lk, dm, dh, mask);
  }
}

void attention(std::span<const double> q, std::span<const double> k, std::span<const double> v,
               std::span<double> out, std::span<double> probs, std::size_t lq, std::size_t lk, std::size_t dm,
               std::size_t heads, const AttentionMask& mask) {
  if (use_parallel(lq * lk * dm))
    attention_parallel(q, k, v, out, probs, lq, lk, dm, heads, mask);
  else
    attention_serial(q, k, v, out, probs, lq, lk, dm, heads, mask);
}

std::vector<std::uint32_t> nearest_codeword_serial(std::span<const double> points, std::span<const double> codebook,
                                                   std::size_t n, std::size_t k, std::size_t dim) {
  std::vector<std::uint32_t> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = nearest_one(points.data() + i * dim, codebook.data(), k, dim);
  return out;
}

std::vector<std::uint32_t> nearest_codeword_parallel(std::span<const double> points,
                                                     std::span<const double> codebook, std::size_t n, std::size_t k,
                                                     std::size_t dim) {
  std::vector<std::uint32_t> out(n);
  const auto rows = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < rows; ++i) {
    const auto r = static_cast<std::size_t>(i);
    out[r] = nearest_one(points.data() + r * dim, codebook.data(), k, dim);
  }
  return out;
}

std::vector<std::uint32_t> nearest_codeword(std::span<const double> points, std::span<const double> codebook,
                                            std::size_t n, std::size_t k, std::size_t dim) {
  if (use_parallel(n * k * dim)) return nearest_codeword_parallel(points, codebook, n, k, dim);
  return nearest_codeword_serial(points, codebook, n, k, dim);
}

}  // namespace slategen::kernels
