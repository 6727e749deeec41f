// SPDX-License-Identifier: Apache-2.0
#include "slategen/evalbench.hpp"

#include <omp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <exception>
#include <map>
#include <sstream>

#include "slategen/io.hpp"

namespace slategen::evalbench {

namespace {

void check_args(std::span<const std::uint32_t> predicted, const ItemSet& truth, std::size_t k) {
  if (k == 0 || k > predicted.size())
    throw ContractError("k=" + std::to_string(k) + " outside [1, " + std::to_string(predicted.size()) + "]");
  if (truth.empty()) throw ContractError("empty truth set");
}

bool relevant(const ItemSet& truth, std::uint32_t item) { return std::binary_search(truth.begin(), truth.end(), item); }

ItemSet as_set(std::vector<std::uint32_t> v) {
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  return v;
}

}  // namespace

double hit_at_k(std::span<const std::uint32_t> predicted, const ItemSet& truth, std::size_t k) {
  check_args(predicted, truth, k);
  for (std::size_t r = 0; r < k; ++r)
    if (relevant(truth, predicted[r])) return 1.0;
  return 0.0;
}

double recall_at_k(std::span<const std::uint32_t> predicted, const ItemSet& truth, std::size_t k) {
  check_args(predicted, truth, k);
  // Each relevant item counts once even if the prediction repeats it.
  ItemSet found;
  for (std::size_t r = 0; r < k; ++r)
    if (relevant(truth, predicted[r])) found.push_back(predicted[r]);
  return static_cast<double>(as_set(found).size()) / static_cast<double>(truth.size());
}

double ndcg_at_k(std::span<const std::uint32_t> predicted, const ItemSet& truth, std::size_t k) {
  check_args(predicted, truth, k);
  double dcg = 0.0, idcg = 0.0;
  ItemSet seen;
  for (std::size_t r = 0; r < k; ++r) {
    const std::uint32_t item = predicted[r];
    if (relevant(truth, item) && std::find(seen.begin(), seen.end(), item) == seen.end()) {
      dcg += 1.0 / std::log2(static_cast<double>(r) + 2.0);
      seen.push_back(item);
    }
  }
  for (std::size_t r = 0; r < std::min(k, truth.size()); ++r) idcg += 1.0 / std::log2(static_cast<double>(r) + 2.0);
  return dcg / idcg;
}

std::vector<MetricRow> aggregate(const std::vector<EvalRecord>& records, std::span<const std::size_t> ks) {
  if (records.empty()) throw DataError("no evaluation records");
  std::vector<MetricRow> rows;
  using Fn = double (*)(std::span<const std::uint32_t>, const ItemSet&, std::size_t);
  const std::pair<const char*, Fn> metrics[] = {{"hit", hit_at_k}, {"recall", recall_at_k}, {"ndcg", ndcg_at_k}};
  for (const char* truth : {"effective", "impressed"})
    for (const auto& [name, fn] : metrics)
      for (auto k : ks) {
        MetricRow row{truth, name, k, 0.0, 0, 0};
        for (const auto& rec : records) {
          const ItemSet& t = std::string(truth) == "effective" ? rec.truth_effective : rec.truth_impressed;
          if (t.empty()) {
            ++row.skipped;
            continue;
          }
          row.value += fn(rec.predicted, t, k);
          ++row.records;
        }
        if (row.records) row.value /= static_cast<double>(row.records);
        rows.push_back(row);
      }
  return rows;
}

std::string metrics_csv(const std::vector<MetricRow>& rows) {
  std::ostringstream out;
  out << "truth,metric,k,value,records,skipped_empty\n";
  char buf[64];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.10f", r.value);
    out << r.truth << ',' << r.metric << ',' << r.k << ',' << buf << ',' << r.records << ',' << r.skipped << '\n';
  }
  return out.str();
}

double metric_value(const std::vector<MetricRow>& rows, const std::string& truth, const std::string& metric,
                    std::size_t k) {
  for (const auto& r : rows)
    if (r.truth == truth && r.metric == metric && r.k == k) return r.value;
  throw ContractError("no metric " + truth + "/" + metric + "@" + std::to_string(k));
}

std::vector<EvalUser> eval_users(const std::vector<SlateSample>& samples) {
  std::map<std::uint32_t, EvalUser> by_user;
  for (const auto& s : samples) {
    if (!s.test) continue;
    auto [it, fresh] = by_user.try_emplace(s.user_id);
    EvalUser& u = it->second;
    if (fresh) {
      u.user_id = s.user_id;
      u.context = hsd::context_of(s);
    }
    for (std::size_t i = 0; i < s.item_ids.size(); ++i) {
      u.impressed.push_back(s.item_ids[i]);
      if (i < s.effective.size() && s.effective[i]) u.effective.push_back(s.item_ids[i]);
    }
  }
  if (by_user.empty()) throw DataError("no test-split samples to evaluate");
  std::vector<EvalUser> out;
  for (auto& [id, u] : by_user) {
    u.effective = as_set(std::move(u.effective));
    u.impressed = as_set(std::move(u.impressed));
    out.push_back(std::move(u));
  }
  return out;
}

std::vector<EvalRecord> predict_records(const std::vector<EvalUser>& users, const SlateFn& generate,
                                        std::size_t workers) {
  std::vector<EvalRecord> out(users.size());
  std::exception_ptr failure;
  const long n = static_cast<long>(users.size());
#pragma omp parallel for schedule(dynamic) num_threads(std::max<std::size_t>(workers, 1))
  for (long i = 0; i < n; ++i) {
    try {
      const auto& u = users[static_cast<std::size_t>(i)];
      out[static_cast<std::size_t>(i)] = {generate(u.context), u.effective, u.impressed};
    } catch (...) {
#pragma omp critical
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);
  return out;
}

// ---------------------------------------------------------------------------

std::vector<BenchResult> bench_efficiency(const hsd::HierarchicalDecoder* hierarchical, const hsd::FlatDecoder* flat,
                                          const std::vector<EvalUser>& users, const gsbi::SidIndex& index,
                                          const std::vector<BenchCase>& cases) {
  if (users.empty()) throw DataError("bench: no users");
  std::vector<BenchResult> out;
  for (const auto& bc : cases) {
    if (bc.mode == "gsbi" ? hierarchical == nullptr : bc.mode == "flat" ? flat == nullptr : true)
      throw ContractError("bench: no model for mode '" + bc.mode + "'");
    gsbi::DecodeOptions opt;
    opt.beam = bc.beam;
    opt.kv_cache = bc.kv_cache;
    opt.index = &index;
    opt.prefix_fallback = true;
    opt.slate_size = bc.slate_size;
    BenchResult res;
    res.config = bc;
    res.users = users.size();
    res.recall_k = std::min<std::size_t>(5, bc.slate_size);
    gsbi::CostLedger total;
    std::size_t scored = 0;
    const auto start = std::chrono::steady_clock::now();
    for (const auto& u : users) {
      const auto slate =
          bc.mode == "gsbi" ? gsbi::gsbi_generate(*hierarchical, u.context, opt) : gsbi::flat_generate(*flat, u.context, opt);
      total += slate.ledger;
      if (!u.effective.empty()) {
        res.recall += recall_at_k(slate.items, u.effective, res.recall_k);
        ++scored;
      }
    }
    res.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    res.samples_per_minute = 60.0 * static_cast<double>(users.size()) / std::max(res.wall_seconds, 1e-9);
    if (scored) res.recall /= static_cast<double>(scored);
    const double n = static_cast<double>(users.size());
    res.planner_steps = static_cast<double>(total.planner_steps) / n;
    res.generator_steps = static_cast<double>(total.generator_steps) / n;
    res.hypothesis_rows = static_cast<double>(total.hypothesis_rows) / n;
    res.attention_flops = total.attention_flops / n;
    res.peak_cache_bytes = static_cast<double>(total.peak_cache_bytes);
    out.push_back(res);
  }
  return out;
}

std::string bench_csv(const std::vector<BenchResult>& results) {
  std::ostringstream out;
  out << "mode,slate_size,beam,kv_cache,users,wall_seconds,samples_per_minute,recall_k,recall,planner_steps,"
         "generator_steps,hypothesis_rows,attention_flops,peak_cache_bytes\n";
  for (const auto& r : results) {
    char buf[512];
    std::snprintf(buf, sizeof buf, "%s,%zu,%zu,%d,%zu,%.6f,%.3f,%zu,%.10f,%.3f,%.3f,%.3f,%.1f,%.0f\n",
                  r.config.mode.c_str(), r.config.slate_size, r.config.beam, r.config.kv_cache ? 1 : 0, r.users,
                  r.wall_seconds, r.samples_per_minute, r.recall_k, r.recall, r.planner_steps, r.generator_steps,
                  r.hypothesis_rows, r.attention_flops, r.peak_cache_bytes);
    out << buf;
  }
  return out.str();
}

}  // namespace slategen::evalbench
