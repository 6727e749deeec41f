// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "slategen/gradcheck.hpp"
#include "slategen/hsd.hpp"

using namespace slategen;
using namespace slategen::hsd;

namespace {

ModelConfig tiny() {
  ModelConfig c;
  c.d_model = 8;
  c.d_ffn = 16;
  c.l_slate = 2;
  c.l_item = 1;
  c.l_ctx = 1;
  c.n_heads = 2;
  c.depth = 2;
  c.codebook_size = 4;
  c.slate_size = 3;
  c.d_user = 3;
  c.max_history = 4;
  return c;
}

Sid random_sid(const ModelConfig& c, Rng& rng) {
  Sid s(c.depth);
  for (auto& x : s) x = static_cast<std::uint32_t>(rng.index(c.codebook_size));
  return s;
}

UserContext random_context(const ModelConfig& c, Rng& rng, std::size_t history) {
  UserContext u;
  for (std::size_t i = 0; i < c.d_user; ++i) u.features.push_back(static_cast<float>(rng.uniform()));
  for (std::size_t i = 0; i < history; ++i) u.history.push_back(random_sid(c, rng));
  return u;
}

std::vector<Sid> random_slate(const ModelConfig& c, Rng& rng) {
  std::vector<Sid> s;
  for (std::size_t m = 0; m < c.slate_size; ++m) s.push_back(random_sid(c, rng));
  return s;
}

// Heads start at zero; give them values so logits carry signal.
void randomize_heads(const SlateModel& model, Rng& rng) {
  for (auto& p : model.params())
    if (p.name.rfind("head.", 0) == 0) {
      Tensor t = p.tensor;
      for (auto& v : t.mutable_values()) v = static_cast<float>(rng.normal(0.0, 0.5));
    }
}

bool same_values(const Tensor& a, const Tensor& b) {
  return a.size() == b.size() && std::equal(a.values().begin(), a.values().end(), b.values().begin());
}

Tensor row_of(const Tensor& t, std::size_t r) { return slice_rows(t, r, 1); }

double log_softmax_at(const Tensor& logits, std::size_t row, std::uint32_t target) {
  const std::size_t k = logits.cols();
  double mx = -1e300;
  for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, logits.at(row, j));
  double z = 0.0;
  for (std::size_t j = 0; j < k; ++j) z += std::exp(logits.at(row, j) - mx);
  return logits.at(row, target) - mx - std::log(z);
}

// Reference teacher-forced log-probabilities for one sample through the
// unbatched planner and generator paths.
std::vector<double> reference_log_probs(const HierarchicalDecoder& m, const UserContext& ctx,
                                        const std::vector<Sid>& slate) {
  const auto& c = m.config();
  const auto prepared = m.prepare(ctx);
  std::vector<Tensor> inputs{m.bos()};
  for (std::size_t i = 0; i + 1 < c.slate_size; ++i) inputs.push_back(m.codes().items(std::span(&slate[i], 1)));
  const Tensor prefs = m.planner_forward(concat_rows(inputs), prepared);
  std::vector<double> out;
  for (std::size_t i = 0; i < c.slate_size; ++i) {
    const Sid& sid = slate[i];
    const Tensor logits =
        m.generator_forward(row_of(prefs, i), std::span<const std::uint32_t>(sid.data(), c.depth - 1), prepared);
    for (std::size_t d = 0; d < c.depth; ++d) out.push_back(log_softmax_at(logits, d, sid[d]));
  }
  return out;
}

}  // namespace

TEST(ModelConfig, Invariants) {
  ModelConfig c = tiny();
  c.l_slate = c.l_item;
  EXPECT_THROW(c.validate(), ContractError);
  c = tiny();
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), ContractError);
  EXPECT_NO_THROW(ModelConfig{}.validate());
}

TEST(ContextEncoder, EmptyHistoryIsSingleUserToken) {
  Rng rng(1);
  HierarchicalDecoder m(tiny(), rng);
  const Tensor c = m.encode_context(random_context(m.config(), rng, 0));
  EXPECT_EQ(c.rows(), 1u);
  EXPECT_EQ(c.cols(), 8u);
}

TEST(ContextEncoder, HistoryOrderMatters) {
  Rng rng(2);
  HierarchicalDecoder m(tiny(), rng);
  UserContext u = random_context(m.config(), rng, 3);
  u.history[0] = {0, 1};
  u.history[2] = {3, 2};
  UserContext swapped = u;
  std::swap(swapped.history[0], swapped.history[2]);
  EXPECT_FALSE(same_values(m.encode_context(u), m.encode_context(swapped)));
}

TEST(ContextEncoder, RejectsBadInputs) {
  Rng rng(3);
  HierarchicalDecoder m(tiny(), rng);
  UserContext u = random_context(m.config(), rng, 1);
  u.history[0] = {0, 4};
  EXPECT_THROW(m.encode_context(u), IndexError);
  u = random_context(m.config(), rng, 5);
  EXPECT_THROW(m.encode_context(u), ContractError);
  u = random_context(m.config(), rng, 1);
  u.features.pop_back();
  EXPECT_THROW(m.encode_context(u), DimensionError);
}

TEST(ContextEncoder, FiniteDifferenceGradient) {
  PrecisionScope f64(Precision::f64);
  Rng rng(4);
  HierarchicalDecoder m(tiny(), rng);
  const UserContext u = random_context(m.config(), rng, 2);
  std::vector<Tensor> inputs;
  for (const auto& p : m.params())
    if (p.name.rfind("ctx", 0) == 0 || p.name.rfind("codes", 0) == 0) inputs.push_back(p.tensor);
  auto r = grad_check([&] { return sum_squares(m.encode_context(u)); }, inputs);
  EXPECT_LE(r.max_rel_error, 1e-4);
}

TEST(Planner, FutureInputsDoNotLeak) {
  Rng rng(5);
  HierarchicalDecoder m(tiny(), rng);
  const auto& c = m.config();
  const Tensor ctx = m.encode_context(random_context(c, rng, 2));
  std::vector<double> in(c.slate_size * c.d_model);
  for (auto& v : in) v = static_cast<float>(rng.normal());
  const Tensor base = m.planner_forward(Tensor::from({c.slate_size, c.d_model}, in), ctx);
  for (std::size_t mp = 0; mp < c.slate_size; ++mp) {
    auto pert = in;
    for (std::size_t j = 0; j < c.d_model; ++j) pert[mp * c.d_model + j] += 1.0;
    const Tensor out = m.planner_forward(Tensor::from({c.slate_size, c.d_model}, pert), ctx);
    for (std::size_t row = 0; row < mp; ++row) EXPECT_TRUE(same_values(row_of(base, row), row_of(out, row)));
    EXPECT_FALSE(same_values(row_of(base, mp), row_of(out, mp)));
  }
}

TEST(Planner, SingleSlotSeesOnlyBosAndContext) {
  Rng rng(6);
  ModelConfig c = tiny();
  c.slate_size = 1;
  HierarchicalDecoder m(c, rng);
  const UserContext u = random_context(c, rng, 2);
  const Tensor a = m.planner_forward(m.bos(), m.encode_context(u));
  EXPECT_EQ(a.rows(), 1u);
  EXPECT_THROW(m.planner_forward(concat_rows(std::vector<Tensor>{m.bos(), m.bos()}), m.encode_context(u)),
               DimensionError);
}

TEST(Generator, LogitsIgnoreLaterCodes) {
  Rng rng(7);
  ModelConfig c = tiny();
  c.depth = 3;
  HierarchicalDecoder m(c, rng);
  randomize_heads(m, rng);
  const Tensor ctx = m.encode_context(random_context(c, rng, 2));
  const Tensor pref = row_of(m.encode_context(random_context(c, rng, 0)), 0);
  const std::vector<std::uint32_t> base{1, 2};
  const Tensor ref = m.generator_forward(pref, base, ctx);
  ASSERT_EQ(ref.rows(), 3u);
  for (std::size_t pos = 0; pos < 2; ++pos) {
    auto alt = base;
    alt[pos] = (alt[pos] + 1) % c.codebook_size;
    const Tensor out = m.generator_forward(pref, alt, ctx);
    for (std::size_t d = 0; d <= pos; ++d) EXPECT_TRUE(same_values(row_of(ref, d), row_of(out, d)));
    EXPECT_FALSE(same_values(row_of(ref, pos + 1), row_of(out, pos + 1)));
  }
  EXPECT_THROW(m.generator_forward(pref, std::vector<std::uint32_t>{1, 2, 3}, ctx), DimensionError);
}

TEST(Generator, SharedAcrossSlots) {
  Rng r1(8), r2(8);
  ModelConfig small = tiny(), large = tiny();
  large.slate_size = 7;
  HierarchicalDecoder a(small, r1), b(large, r2);
  EXPECT_EQ(a.generator_parameters(), b.generator_parameters());

  // Two slots with the same preference row, prefix and context decode alike.
  Rng rng(9);
  randomize_heads(a, rng);
  const auto prepared = a.prepare(random_context(small, rng, 1));
  const Tensor pref = row_of(a.encode_context(random_context(small, rng, 0)), 0);
  const Tensor prefs = concat_rows(std::vector<Tensor>{pref, pref});
  const std::vector<std::uint32_t> prefix{2};
  EXPECT_TRUE(same_values(a.generator_forward(row_of(prefs, 0), prefix, prepared),
                          a.generator_forward(row_of(prefs, 1), prefix, prepared)));
}

TEST(Preference, LookupSumMatchesGatherAdd) {
  Rng rng(10);
  ModelConfig c = tiny();
  c.depth = 3;
  HierarchicalDecoder m(c, rng);
  std::vector<Sid> sids;
  for (int i = 0; i < 12; ++i) sids.push_back(random_sid(c, rng));
  const Tensor batched = m.codes().items(sids);
  for (std::size_t i = 0; i < sids.size(); ++i)
    for (std::size_t j = 0; j < c.d_model; ++j) {
      float acc = static_cast<float>(m.codes().table(0).at(sids[i][0], j));
      for (std::size_t d = 1; d < c.depth; ++d) acc += static_cast<float>(m.codes().table(d).at(sids[i][d], j));
      EXPECT_EQ(batched.at(i, j), static_cast<double>(acc));
    }
}

TEST(SlateNll, UniformLogitsGiveMDLogK) {
  Rng rng(11);
  ModelConfig c = tiny();
  c.codebook_size = 256;
  c.depth = 3;
  c.slate_size = 5;
  HierarchicalDecoder m(c, rng);
  SlateBatch b;
  for (int i = 0; i < 3; ++i) {
    b.contexts.push_back(random_context(c, rng, static_cast<std::size_t>(i)));
    b.slates.push_back(random_slate(c, rng));
  }
  EXPECT_NEAR(slate_nll(m, b).item(), 5.0 * 3.0 * std::log(256.0), 1e-4);
  FlatDecoder f(c, rng);
  EXPECT_NEAR(slate_nll(f, b).item(), 5.0 * 3.0 * std::log(256.0), 1e-4);
}

TEST(SlateNll, BatchedMatchesPerSampleReference) {
  PrecisionScope f64(Precision::f64);
  Rng rng(12);
  HierarchicalDecoder m(tiny(), rng);
  randomize_heads(m, rng);
  SlateBatch b;
  for (std::size_t i = 0; i < 4; ++i) {
    b.contexts.push_back(random_context(m.config(), rng, i));
    b.slates.push_back(random_slate(m.config(), rng));
  }
  const Tensor lp = m.token_log_probs(b);
  const std::size_t md = m.config().slate_size * m.config().depth;
  double total = 0.0;
  for (std::size_t i = 0; i < 4; ++i) {
    const auto ref = reference_log_probs(m, b.contexts[i], b.slates[i]);
    for (std::size_t t = 0; t < md; ++t) {
      EXPECT_NEAR(lp.at(i, t), ref[t], 1e-10);
      total += ref[t];
    }
  }
  // Additivity: the loss is the sum of the per-item terms.
  EXPECT_NEAR(slate_nll(m, b).item(), -total / 4.0, 1e-10);
}

TEST(SlateNll, FiniteDifferenceGradient) {
  PrecisionScope f64(Precision::f64);
  Rng rng(13);
  HierarchicalDecoder m(tiny(), rng);
  randomize_heads(m, rng);
  SlateBatch b;
  for (std::size_t i = 0; i < 2; ++i) {
    b.contexts.push_back(random_context(m.config(), rng, i + 1));
    b.slates.push_back(random_slate(m.config(), rng));
  }
  std::vector<Tensor> inputs;
  for (const auto& p : m.params()) inputs.push_back(p.tensor);
  GradCheckOptions opt;
  opt.max_per_input = 12;
  auto r = grad_check([&] { return slate_nll(m, b); }, inputs, opt);
  EXPECT_LE(r.max_rel_error, 1e-4);
}

TEST(FlatDecoder, BatchedMatchesStreamForward) {
  PrecisionScope f64(Precision::f64);
  Rng rng(14);
  FlatDecoder f(tiny(), rng);
  randomize_heads(f, rng);
  SlateBatch b;
  for (std::size_t i = 0; i < 3; ++i) {
    b.contexts.push_back(random_context(f.config(), rng, i));
    b.slates.push_back(random_slate(f.config(), rng));
  }
  const Tensor lp = f.token_log_probs(b);
  for (std::size_t i = 0; i < 3; ++i) {
    std::vector<std::uint32_t> tokens;
    for (const auto& sid : b.slates[i]) tokens.insert(tokens.end(), sid.begin(), sid.end());
    const auto prepared = f.prepare(b.contexts[i]);
    const Tensor logits =
        f.forward(std::span<const std::uint32_t>(tokens.data(), tokens.size() - 1), prepared);
    for (std::size_t t = 0; t < tokens.size(); ++t) EXPECT_NEAR(lp.at(i, t), log_softmax_at(logits, t, tokens[t]), 1e-10);
  }
}

TEST(KvCache, StepsMatchFullForwardBitwise) {
  Rng rng(15);
  HierarchicalDecoder m(tiny(), rng);
  randomize_heads(m, rng);
  const auto& c = m.config();
  const auto prepared = m.prepare(random_context(c, rng, 2));
  const auto slate = random_slate(c, rng);

  std::vector<Tensor> inputs{m.bos()};
  for (std::size_t i = 0; i + 1 < c.slate_size; ++i) inputs.push_back(m.codes().items(std::span(&slate[i], 1)));
  const Tensor full = m.planner_forward(concat_rows(inputs), prepared);
  std::vector<nn::SelfKV> cache;
  for (std::size_t i = 0; i < c.slate_size; ++i) {
    const Tensor step = m.planner_step(inputs[i], i, prepared, cache);
    EXPECT_TRUE(same_values(step, row_of(full, i)));
  }

  const Tensor pref = row_of(full, 0);
  const Tensor logits = m.generator_forward(pref, std::span<const std::uint32_t>(slate[0].data(), 1), prepared);
  std::vector<nn::SelfKV> gcache;
  EXPECT_TRUE(same_values(m.generator_step(pref, 0, prepared, gcache), row_of(logits, 0)));
  const Tensor next = m.codes().layer(0, std::span<const std::uint32_t>(slate[0].data(), 1));
  EXPECT_TRUE(same_values(m.generator_step(next, 1, prepared, gcache), row_of(logits, 1)));
  EXPECT_EQ(gcache[0].length(), 2u);

  FlatDecoder f(c, rng);
  randomize_heads(f, rng);
  const auto fp = f.prepare(random_context(c, rng, 1));
  std::vector<std::uint32_t> tokens{1, 3, 0, 2};
  const Tensor ff = f.forward(tokens, fp);
  std::vector<nn::SelfKV> fcache;
  for (std::size_t p = 0; p <= tokens.size(); ++p)
    EXPECT_TRUE(same_values(f.step(tokens, p, fp, fcache), row_of(ff, p)));
}

// One planner block on a hand-sized instance against a straight-line rewrite:
// cross-attention to normalized context, causal self-attention, SiLU FFN.
TEST(DecoderBlock, MatchesStraightLineReference) {
  PrecisionScope f64(Precision::f64);
  Rng rng(16);
  const std::size_t d = 4, f = 6, lq = 3, lc = 2;
  nn::DecoderBlock block(nn::BlockShape{d, f, 1, true}, rng);
  nn::ParamList ps;
  block.collect("b", ps);
  std::map<std::string, Tensor> p;
  for (auto& np : ps) {
    Tensor t = np.tensor;
    if (np.name.find("norm") != std::string::npos)
      for (auto& v : t.mutable_values()) v = rng.uniform(0.5, 1.5);
    p[np.name.substr(2)] = t;
  }
  std::vector<double> hv(lq * d), cv(lc * d);
  for (auto& v : hv) v = rng.normal();
  for (auto& v : cv) v = rng.normal();
  const Tensor h = Tensor::from({lq, d}, hv), ctx = Tensor::from({lc, d}, cv);
  const nn::ContextKV kv = block.project_context(ctx);
  const Tensor out = block.forward(h, &kv, kernels::AttentionMask::causal());

  using Mat = std::vector<std::vector<double>>;
  auto mat = [](const Tensor& t) {
    Mat m(t.rows(), std::vector<double>(t.cols()));
    for (std::size_t i = 0; i < t.rows(); ++i)
      for (std::size_t j = 0; j < t.cols(); ++j) m[i][j] = t.at(i, j);
    return m;
  };
  auto mul = [](const Mat& a, const Mat& b) {
    Mat c(a.size(), std::vector<double>(b[0].size(), 0.0));
    for (std::size_t i = 0; i < a.size(); ++i)
      for (std::size_t k = 0; k < b.size(); ++k)
        for (std::size_t j = 0; j < b[0].size(); ++j) c[i][j] += a[i][k] * b[k][j];
    return c;
  };
  auto rms = [](const Mat& x, const Tensor& g) {
    Mat y = x;
    for (auto& row : y) {
      double ms = 0.0;
      for (double v : row) ms += v * v;
      const double inv = 1.0 / std::sqrt(ms / static_cast<double>(row.size()) + kRmsNormEps);
      for (std::size_t j = 0; j < row.size(); ++j) row[j] = row[j] * inv * g.at(j);
    }
    return y;
  };
  auto attend = [](const Mat& q, const Mat& k, const Mat& v, bool causal) {
    Mat o(q.size(), std::vector<double>(v[0].size(), 0.0));
    for (std::size_t i = 0; i < q.size(); ++i) {
      const std::size_t last = causal ? i + 1 : k.size();
      std::vector<double> s(last);
      double mx = -1e300;
      for (std::size_t j = 0; j < last; ++j) {
        s[j] = 0.0;
        for (std::size_t c = 0; c < q[i].size(); ++c) s[j] += q[i][c] * k[j][c];
        s[j] /= std::sqrt(static_cast<double>(q[i].size()));
        mx = std::max(mx, s[j]);
      }
      double z = 0.0;
      for (auto& x : s) z += (x = std::exp(x - mx));
      for (std::size_t j = 0; j < last; ++j)
        for (std::size_t c = 0; c < v[0].size(); ++c) o[i][c] += s[j] / z * v[j][c];
    }
    return o;
  };
  auto add = [](Mat a, const Mat& b) {
    for (std::size_t i = 0; i < a.size(); ++i)
      for (std::size_t j = 0; j < a[i].size(); ++j) a[i][j] += b[i][j];
    return a;
  };

  Mat x = mat(h);
  const Mat c = mat(ctx);
  x = add(x, mul(attend(mul(rms(x, p["cross.norm"]), mat(p["cross.wq"])), mul(rms(c, p["cross.norm_k"]), mat(p["cross.wk"])),
                        mul(rms(c, p["cross.norm_v"]), mat(p["cross.wv"])), false),
                 mat(p["cross.wo"])));
  const Mat n = rms(x, p["self.norm"]);
  x = add(x, mul(attend(mul(n, mat(p["self.wq"])), mul(n, mat(p["self.wk"])), mul(n, mat(p["self.wv"])), true),
                 mat(p["self.wo"])));
  Mat up = mul(rms(x, p["ffn.norm"]), mat(p["ffn.up"]));
  for (auto& row : up)
    for (auto& v : row) v = v / (1.0 + std::exp(-v));
  x = add(x, mul(up, mat(p["ffn.down"])));

  for (std::size_t i = 0; i < lq; ++i)
    for (std::size_t j = 0; j < d; ++j) EXPECT_NEAR(out.at(i, j), x[i][j], 1e-6);
}

TEST(Pretrain, LearnsAndIsDeterministic) {
  Rng data(17);
  ModelConfig c = tiny();
  c.codebook_size = 8;
  std::vector<SlateSample> samples;
  for (int i = 0; i < 16; ++i) {
    SlateSample s;
    const auto u = random_context(c, data, 1);
    s.user_features = u.features;
    s.history = u.history;
    s.slate = random_slate(c, data);
    samples.push_back(s);
  }
  TrainConfig t;
  t.steps = 150;
  t.batch_size = 8;
  t.lr = 3e-3;
  t.log_every = 10;
  auto run = [&](std::vector<double>& losses) {
    Rng rng(3);
    HierarchicalDecoder m(c, rng);
    pretrain(m, samples, t, [&](const TrainLogRow& r) { losses.push_back(r.loss); });
    return evaluate_nll(m, samples);
  };
  std::vector<double> a, b;
  const double fa = run(a), fb = run(b);
  EXPECT_EQ(fa, fb);
  EXPECT_EQ(a, b);
  const double uniform = static_cast<double>(c.slate_size * c.depth) * std::log(8.0);
  for (std::size_t i = 2; i < a.size(); ++i) EXPECT_LT(a[i], uniform);
  EXPECT_LT(fa, 0.8 * uniform);
}
