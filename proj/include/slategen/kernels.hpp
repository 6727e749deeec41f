// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <vector>

// Dense inner-loop kernels. Every kernel exists as a serial reference and an
// OpenMP variant. The variants partition work by output row and accumulate each
// output element over the inner dimension in the same order, so they are
// bitwise identical to the reference. The undecorated entry points run the
// row-blocked variant, threaded once the problem is large enough.
namespace slategen::kernels {

/// c[m×n] += a[m×k] · b[k×n]
void matmul_nn_serial(std::span<const double> a, std::span<const double> b, std::span<double> c,
                      std::size_t m, std::size_t k, std::size_t n);
void matmul_nn_parallel(std::span<const double> a, std::span<const double> b, std::span<double> c,
                        std::size_t m, std::size_t k, std::size_t n);
void matmul_nn(std::span<const double> a, std::span<const double> b, std::span<double> c,
               std::size_t m, std::size_t k, std::size_t n);

/// c[m×n] += a[m×k] · b[n×k]ᵀ
void matmul_nt_serial(std::span<const double> a, std::span<const double> b, std::span<double> c,
                      std::size_t m, std::size_t k, std::size_t n);
void matmul_nt_parallel(std::span<const double> a, std::span<const double> b, std::span<double> c,
                        std::size_t m, std::size_t k, std::size_t n);
void matmul_nt(std::span<const double> a, std::span<const double> b, std::span<double> c,
               std::size_t m, std::size_t k, std::size_t n);

/// c[m×n] += a[k×m]ᵀ · b[k×n]
void matmul_tn_serial(std::span<const double> a, std::span<const double> b, std::span<double> c,
                      std::size_t m, std::size_t k, std::size_t n);
void matmul_tn_parallel(std::span<const double> a, std::span<const double> b, std::span<double> c,
                        std::size_t m, std::size_t k, std::size_t n);
void matmul_tn(std::span<const double> a, std::span<const double> b, std::span<double> c,
               std::size_t m, std::size_t k, std::size_t n);

/// Which keys a query row may see.
struct AttentionMask {
  enum class Kind { none, causal, block_causal, ranges };
  Kind kind = Kind::none;
  // Global position of query row 0 (causal only). Used by incremental decoding.
  std::size_t query_offset = 0;
  // Sequence length of each independent block (block_causal only).
  std::size_t block = 0;
  // Explicit [first, last) pair per query row (ranges only). Lets several
  // sequences share one batched call.
  std::shared_ptr<const std::vector<std::uint32_t>> bounds;

  static AttentionMask none() { return {}; }
  static AttentionMask causal(std::size_t offset = 0) { return {Kind::causal, offset, 0, nullptr}; }
  static AttentionMask block_causal(std::size_t block) { return {Kind::block_causal, 0, block, nullptr}; }
  static AttentionMask ranges(std::vector<std::uint32_t> first_last) {
    return {Kind::ranges, 0, 0, std::make_shared<const std::vector<std::uint32_t>>(std::move(first_last))};
  }

  /// Half-open key range [first, last) visible to query row i.
  void key_range(std::size_t i, std::size_t n_keys, std::size_t& first, std::size_t& last) const;

  /// Prefix sums of visible-key counts, size lq+1. Probabilities are stored
  /// compactly: head h, row i, key j lives at h*back() + offsets[i] + (j - first).
  std::vector<std::size_t> prob_offsets(std::size_t lq, std::size_t lk) const;
};

/// Multi-head scaled dot-product attention forward.
/// q: [lq×dm], k,v: [lk×dm], out: [lq×dm], probs: heads × prob_offsets().back() in the
/// compact layout described on AttentionMask.
void attention_serial(std::span<const double> q, std::span<const double> k, std::span<const double> v,
                      std::span<double> out, std::span<double> probs, std::size_t lq, std::size_t lk,
                      std::size_t dm, std::size_t heads, const AttentionMask& mask);
void attention_parallel(std::span<const double> q, std::span<const double> k, std::span<const double> v,
                        std::span<double> out, std::span<double> probs, std::size_t lq, std::size_t lk,
                        std::size_t dm, std::size_t heads, const AttentionMask& mask);
void attention(std::span<const double> q, std::span<const double> k, std::span<const double> v,
               std::span<double> out, std::span<double> probs, std::size_t lq, std::size_t lk,
               std::size_t dm, std::size_t heads, const AttentionMask& mask);

/// Index of the nearest codeword (squared L2, lowest index wins ties) for each point.
std::vector<std::uint32_t> nearest_codeword_serial(std::span<const double> points, std::span<const double> codebook,
                                                   std::size_t n, std::size_t k, std::size_t dim);
std::vector<std::uint32_t> nearest_codeword_parallel(std::span<const double> points,
                                                     std::span<const double> codebook, std::size_t n,
                                                     std::size_t k, std::size_t dim);
std::vector<std::uint32_t> nearest_codeword(std::span<const double> points, std::span<const double> codebook,
                                            std::size_t n, std::size_t k, std::size_t dim);

/// Number of OpenMP workers the dispatching kernels may use (1 when built without OpenMP).
int max_workers();
void set_workers(int n);

}  // namespace slategen::kernels
