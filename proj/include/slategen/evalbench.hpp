// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "slategen/gsbi.hpp"

// Ranking metrics over generated slates and the decoding throughput benchmark.
namespace slategen::evalbench {

using ItemSet = std::vector<std::uint32_t>;  // sorted, unique

struct EvalRecord {
  std::vector<std::uint32_t> predicted;
  ItemSet truth_effective;
  ItemSet truth_impressed;
};

/// Metrics of one ranked prediction against a truth set. k must not exceed the
/// prediction length and the truth must be non-empty (ContractError).
double hit_at_k(std::span<const std::uint32_t> predicted, const ItemSet& truth, std::size_t k);
double recall_at_k(std::span<const std::uint32_t> predicted, const ItemSet& truth, std::size_t k);
/// Binary gains, rank r discounted by 1/log₂(r+1).
double ndcg_at_k(std::span<const std::uint32_t> predicted, const ItemSet& truth, std::size_t k);

struct MetricRow {
  std::string truth;  // "effective" or "impressed"
  std::string metric;  // "hit", "recall", "ndcg"
  std::size_t k = 0;
  double value = 0.0;
  std::size_t records = 0;  // records averaged
  std::size_t skipped = 0;  // records with an empty truth set
};

/// Macro averages over records for every truth kind, metric and k.
std::vector<MetricRow> aggregate(const std::vector<EvalRecord>& records, std::span<const std::size_t> ks);
std::string metrics_csv(const std::vector<MetricRow>& rows);
double metric_value(const std::vector<MetricRow>& rows, const std::string& truth, const std::string& metric,
                    std::size_t k);

/// One held-out user: the context of their first test session and the union of
/// items over all their test sessions.
struct EvalUser {
  std::uint32_t user_id = 0;
  hsd::UserContext context;
  ItemSet effective;
  ItemSet impressed;
};

/// Users with test samples, in user id order. Throws DataError when there are none.
std::vector<EvalUser> eval_users(const std::vector<SlateSample>& samples);

using SlateFn = std::function<std::vector<std::uint32_t>(const hsd::UserContext&)>;

/// Generates a grounded slate per user; users are spread over `workers` threads.
std::vector<EvalRecord> predict_records(const std::vector<EvalUser>& users, const SlateFn& generate,
                                        std::size_t workers = 1);

struct BenchCase {
  std::string mode = "gsbi";  // "gsbi" or "flat"
  std::size_t slate_size = 5;
  std::size_t beam = 5;
  bool kv_cache = true;
};

struct BenchResult {
  BenchCase config;
  std::size_t users = 0;
  double wall_seconds = 0.0;
  double samples_per_minute = 0.0;
  std::size_t recall_k = 0;
  double recall = 0.0;  // effective-view recall@min(5, M)
  // Per-sample means of the decode ledgers.
  double planner_steps = 0.0;
  double generator_steps = 0.0;
  double hypothesis_rows = 0.0;
  double attention_flops = 0.0;
  double peak_cache_bytes = 0.0;
};

/// Times each case over the users on the calling thread. A case whose mode has
/// no model throws ContractError.
std::vector<BenchResult> bench_efficiency(const hsd::HierarchicalDecoder* hierarchical, const hsd::FlatDecoder* flat,
                                          const std::vector<EvalUser>& users, const gsbi::SidIndex& index,
                                          const std::vector<BenchCase>& cases);
std::string bench_csv(const std::vector<BenchResult>& results);

}  // namespace slategen::evalbench
