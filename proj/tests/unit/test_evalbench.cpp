// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "slategen/evalbench.hpp"
#include "slategen/io.hpp"

using namespace slategen;
using namespace slategen::evalbench;

namespace {

// Straightforward reference versions over std::set.
double ref_hit(const std::vector<std::uint32_t>& p, const std::set<std::uint32_t>& t, std::size_t k) {
  for (std::size_t i = 0; i < k; ++i)
    if (t.count(p[i])) return 1;
  return 0;
}
double ref_recall(const std::vector<std::uint32_t>& p, const std::set<std::uint32_t>& t, std::size_t k) {
  std::set<std::uint32_t> hit;
  for (std::size_t i = 0; i < k; ++i)
    if (t.count(p[i])) hit.insert(p[i]);
  return static_cast<double>(hit.size()) / static_cast<double>(t.size());
}
double ref_ndcg(const std::vector<std::uint32_t>& p, const std::set<std::uint32_t>& t, std::size_t k) {
  std::set<std::uint32_t> seen;
  double dcg = 0, idcg = 0;
  for (std::size_t i = 0; i < k; ++i)
    if (t.count(p[i]) && seen.insert(p[i]).second) dcg += std::log(2.0) / std::log(i + 2.0);
  for (std::size_t i = 0; i < k && i < t.size(); ++i) idcg += std::log(2.0) / std::log(i + 2.0);
  return dcg / idcg;
}

ItemSet set_of(std::set<std::uint32_t> s) { return {s.begin(), s.end()}; }

}  // namespace

TEST(Metrics, HandCases) {
  const std::vector<std::uint32_t> p{7, 1, 2, 3, 4};
  EXPECT_EQ(hit_at_k(p, {7}, 5), 1.0);
  EXPECT_EQ(ndcg_at_k(p, {7}, 5), 1.0);
  EXPECT_EQ(recall_at_k(p, {7}, 5), 1.0);

  EXPECT_EQ(hit_at_k(p, {8, 9}, 5), 0.0);
  EXPECT_EQ(recall_at_k(p, {8, 9}, 5), 0.0);
  EXPECT_EQ(ndcg_at_k(p, {8, 9}, 5), 0.0);

  // Relevant at ranks 2 and 4, three relevant items overall.
  const ItemSet t{1, 3, 99};
  EXPECT_NEAR(recall_at_k(p, t, 5), 2.0 / 3.0, 1e-15);
  const double expect = (1 / std::log2(3.0) + 1 / std::log2(5.0)) / (1 + 1 / std::log2(3.0) + 1 / std::log2(4.0));
  EXPECT_NEAR(ndcg_at_k(p, t, 5), expect, 1e-15);
}

TEST(Metrics, Preconditions) {
  const std::vector<std::uint32_t> p{1, 2};
  EXPECT_THROW(hit_at_k(p, {1}, 3), ContractError);
  EXPECT_THROW(recall_at_k(p, {1}, 0), ContractError);
  EXPECT_THROW(ndcg_at_k(p, {}, 1), ContractError);
}

TEST(Metrics, MatchBruteForceOnRandomRecords) {
  Rng rng(1);
  for (int r = 0; r < 1000; ++r) {
    const std::size_t m = 1 + rng.index(8);
    std::vector<std::uint32_t> p;
    for (std::size_t i = 0; i < m; ++i) p.push_back(static_cast<std::uint32_t>(rng.index(20)));
    std::set<std::uint32_t> t;
    const std::size_t nt = 1 + rng.index(6);
    while (t.size() < nt) t.insert(static_cast<std::uint32_t>(rng.index(20)));
    const ItemSet ts = set_of(t);
    double prev_hit = 0, prev_recall = 0;
    for (std::size_t k = 1; k <= m; ++k) {
      const double h = hit_at_k(p, ts, k), rc = recall_at_k(p, ts, k), n = ndcg_at_k(p, ts, k);
      EXPECT_NEAR(h, ref_hit(p, t, k), 1e-9);
      EXPECT_NEAR(rc, ref_recall(p, t, k), 1e-9);
      EXPECT_NEAR(n, ref_ndcg(p, t, k), 1e-9);
      for (double v : {h, rc, n}) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0 + 1e-15);
      }
      EXPECT_GE(h, prev_hit);
      EXPECT_GE(rc, prev_recall);
      prev_hit = h;
      prev_recall = rc;
    }
  }
}

TEST(Metrics, IdealPermutationScoresOne) {
  Rng rng(2);
  for (int r = 0; r < 100; ++r) {
    std::vector<std::uint32_t> p{0, 1, 2, 3, 4};
    for (std::size_t i = 4; i > 0; --i) std::swap(p[i], p[rng.index(i + 1)]);
    EXPECT_EQ(ndcg_at_k(p, {0, 1, 2, 3, 4}, 5), 1.0);
    const ItemSet two{p[0], p[1]};
    EXPECT_EQ(ndcg_at_k(p, set_of({two.begin(), two.end()}), 5), 1.0);
  }
}

TEST(Aggregate, MacroAveragesAndSkipsEmptyTruth) {
  const std::size_t ks[] = {1, 5};
  const std::vector<EvalRecord> perfect{{{1, 2, 3, 4, 5}, {1, 2}, {1, 2, 3, 4, 5}}};
  for (const auto& row : aggregate(perfect, ks)) {
    if (row.k == 5) {
      EXPECT_EQ(row.value, 1.0) << row.truth << row.metric;
    }
  }
  std::vector<EvalRecord> recs{{{1, 2, 3}, {2}, {1, 2, 3}}, {{4, 5, 6}, {}, {9}}, {{7, 8, 9}, {9, 10}, {7}}};
  const std::size_t k3[] = {3};
  const auto rows = aggregate(recs, k3);
  EXPECT_NEAR(metric_value(rows, "effective", "recall", 3), (1.0 + 0.5) / 2.0, 1e-15);
  EXPECT_NEAR(metric_value(rows, "impressed", "hit", 3), 2.0 / 3.0, 1e-15);
  for (const auto& r : rows)
    if (r.truth == "effective") {
      EXPECT_EQ(r.records, 2u);
      EXPECT_EQ(r.skipped, 1u);
    }
  auto doubled = recs;
  doubled.insert(doubled.end(), recs.begin(), recs.end());
  const auto rows2 = aggregate(doubled, k3);
  for (std::size_t i = 0; i < rows.size(); ++i) EXPECT_NEAR(rows[i].value, rows2[i].value, 1e-15);
  EXPECT_THROW(aggregate({}, k3), DataError);
  EXPECT_EQ(metrics_csv(rows).substr(0, metrics_csv(rows).find('\n')), "truth,metric,k,value,records,skipped_empty");
}

TEST(EvalUsers, UnionOverTestSessions) {
  std::vector<SlateSample> samples(4);
  samples[0] = {2, {0.1}, {{1, 1}}, {}, {10, 11}, {1, 0}, {1, 0}, {}, true};
  samples[1] = {2, {0.2}, {{2, 2}}, {}, {12, 10}, {1, 1}, {0, 1}, {}, true};
  samples[2] = {1, {0.3}, {}, {}, {13}, {1}, {1}, {}, false};
  samples[3] = {1, {0.4}, {}, {}, {14}, {0}, {0}, {}, true};
  const auto users = eval_users(samples);
  ASSERT_EQ(users.size(), 2u);
  EXPECT_EQ(users[0].user_id, 1u);
  EXPECT_TRUE(users[0].effective.empty());
  EXPECT_EQ(users[1].context.features, std::vector<double>{0.1});
  EXPECT_EQ(users[1].effective, (ItemSet{10}));
  EXPECT_EQ(users[1].impressed, (ItemSet{10, 11, 12}));
  samples[0].test = samples[1].test = samples[3].test = false;
  EXPECT_THROW(eval_users(samples), DataError);
}

TEST(PredictRecords, WorkerCountDoesNotChangeResults) {
  hsd::ModelConfig c;
  c.d_model = 8;
  c.d_ffn = 16;
  c.l_slate = 2;
  c.l_item = 1;
  c.l_ctx = 1;
  c.n_heads = 2;
  c.depth = 2;
  c.codebook_size = 4;
  c.slate_size = 3;
  c.d_user = 2;
  c.max_history = 4;
  Rng rng(3);
  hsd::HierarchicalDecoder model(c, rng);
  for (auto& p : model.params())
    if (p.name.rfind("head.", 0) == 0) {
      Tensor t = p.tensor;
      for (auto& v : t.mutable_values()) v = static_cast<float>(rng.normal(0.0, 1.0));
    }
  std::vector<SidEntry> entries;
  for (std::uint32_t i = 0; i < 16; ++i) entries.push_back({i, {i / 4, i % 4}});
  const gsbi::SidIndex index(entries, {});
  std::vector<EvalUser> users;
  for (std::uint32_t u = 0; u < 12; ++u) {
    EvalUser e;
    e.user_id = u;
    e.context.features = {rng.uniform(), rng.uniform()};
    e.context.history = {{u % 4, 1}};
    e.effective = {u};
    e.impressed = {u, u + 1};
    users.push_back(e);
  }
  gsbi::DecodeOptions opt;
  opt.index = &index;
  const SlateFn gen = [&](const hsd::UserContext& ctx) { return gsbi::gsbi_generate(model, ctx, opt).items; };
  const auto a = predict_records(users, gen, 1), b = predict_records(users, gen, 4);
  for (std::size_t i = 0; i < users.size(); ++i) EXPECT_EQ(a[i].predicted, b[i].predicted);

  hsd::FlatDecoder flat(c, rng);
  std::vector<BenchCase> cases{{"gsbi", 3, 5, true}, {"gsbi", 3, 5, false}, {"flat", 3, 5, true}};
  const auto res = bench_efficiency(&model, &flat, users, index, cases);
  ASSERT_EQ(res.size(), 3u);
  EXPECT_EQ(res[0].recall, res[1].recall);
  EXPECT_EQ(res[0].planner_steps, 3.0);
  EXPECT_EQ(res[0].generator_steps, 6.0);
  EXPECT_LT(res[0].attention_flops, res[2].attention_flops);
  EXPECT_GT(res[0].samples_per_minute, 0.0);
  EXPECT_THROW(bench_efficiency(&model, nullptr, users, index, cases), ContractError);
  const std::vector<BenchCase> too_long{{"gsbi", 4, 5, true}};
  EXPECT_THROW(bench_efficiency(&model, &flat, users, index, too_long), ContractError);
  const std::string csv = bench_csv(res);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
}
