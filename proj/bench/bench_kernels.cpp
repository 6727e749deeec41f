// SPDX-License-Identifier: Apache-2.0
// Serial reference kernels against their OpenMP variants.
#include <benchmark/benchmark.h>

#include <vector>

#include "slategen/kernels.hpp"
#include "slategen/random.hpp"

namespace kn = slategen::kernels;

namespace {

std::vector<double> random_vec(std::size_t n, std::uint64_t seed) {
  slategen::Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

template <auto Kernel>
void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  auto a = random_vec(n * n, 1), b = random_vec(n * n, 2);
  std::vector<double> c(n * n);
  for (auto _ : state) {
    std::fill(c.begin(), c.end(), 0.0);
    Kernel(a, b, c, n, n, n);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n * n * n));
}

template <auto Kernel>
void BM_Attention(benchmark::State& state) {
  const auto len = static_cast<std::size_t>(state.range(0));
  const std::size_t dm = 64, heads = 4;
  auto q = random_vec(len * dm, 3), k = random_vec(len * dm, 4), v = random_vec(len * dm, 5);
  std::vector<double> out(len * dm), probs(heads * len * len);
  for (auto _ : state) {
    std::fill(out.begin(), out.end(), 0.0);
    Kernel(q, k, v, out, probs, len, len, dm, heads, kn::AttentionMask::causal());
    benchmark::DoNotOptimize(out.data());
  }
}

template <auto Kernel>
void BM_NearestCodeword(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const std::size_t k = 256, dim = 64;
  auto pts = random_vec(n * dim, 6), cb = random_vec(k * dim, 7);
  for (auto _ : state) benchmark::DoNotOptimize(Kernel(pts, cb, n, k, dim));
}

}  // namespace

BENCHMARK(BM_Matmul<kn::matmul_nn_serial>)->Arg(64)->Arg(256);
BENCHMARK(BM_Matmul<kn::matmul_nn_parallel>)->Arg(64)->Arg(256);
BENCHMARK(BM_Attention<kn::attention_serial>)->Arg(16)->Arg(128);
BENCHMARK(BM_Attention<kn::attention_parallel>)->Arg(16)->Arg(128);
BENCHMARK(BM_NearestCodeword<kn::nearest_codeword_serial>)->Arg(1024);
BENCHMARK(BM_NearestCodeword<kn::nearest_codeword_parallel>)->Arg(1024);

BENCHMARK_MAIN();
