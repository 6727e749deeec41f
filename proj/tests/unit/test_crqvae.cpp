// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "slategen/crqvae.hpp"
#include "slategen/gradcheck.hpp"
#include "slategen/optim.hpp"

using namespace slategen;
using namespace slategen::crq;

namespace {

CrqConfig tiny_config(std::size_t depth = 3, std::size_t k = 8) {
  CrqConfig c;
  c.depth = depth;
  c.codebook_size = k;
  c.d_in = 6;
  c.d_z = 4;
  return c;
}

Tensor random_tensor(Shape shape, Rng& rng, bool requires_grad = false) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

void set_values(Tensor& t, const std::vector<double>& v) {
  auto dst = t.mutable_values();
  ASSERT_EQ(dst.size(), v.size());
  std::copy(v.begin(), v.end(), dst.begin());
}

std::vector<std::vector<double>> two_cluster_corpus(std::size_t per_cluster, std::size_t dim, double noise, Rng& rng) {
  std::vector<std::vector<double>> centers(2, std::vector<double>(dim, 0.0));
  centers[0][0] = 1.0;
  centers[1][1] = 1.0;
  std::vector<std::vector<double>> out;
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t i = 0; i < per_cluster; ++i) {
      auto v = centers[c];
      for (auto& x : v) x += noise * rng.normal();
      out.push_back(v);
    }
  return out;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

}  // namespace

TEST(Encode, ZeroInputGivesZeroLatent) {
  Rng rng(1);
  CrqVae m(tiny_config(), rng);
  const Tensor z = m.encode(Tensor::zeros({2, 6}));
  for (double v : z.values()) EXPECT_EQ(v, 0.0);
  const Tensor x = m.decode(Tensor::zeros({2, 4}));
  for (double v : x.values()) EXPECT_EQ(v, 0.0);
}

TEST(Encode, DeterministicForFixedSeed) {
  Rng r1(5), r2(5), data(6);
  CrqVae a(tiny_config(), r1), b(tiny_config(), r2);
  const Tensor x = random_tensor({3, 6}, data);
  const Tensor za = a.encode(x), zb = b.encode(x);
  EXPECT_TRUE(std::equal(za.values().begin(), za.values().end(), zb.values().begin()));
}

TEST(Encode, WidthMismatchIsDimensionError) {
  Rng rng(1);
  CrqVae m(tiny_config(), rng);
  EXPECT_THROW(m.encode(Tensor::zeros({1, 5})), DimensionError);
  EXPECT_THROW(m.decode(Tensor::zeros({1, 5})), DimensionError);
}

TEST(Encode, FiniteDifferenceGradient) {
  PrecisionScope f64(Precision::f64);
  Rng rng(2);
  CrqVae m(tiny_config(), rng);
  for (int i = 0; i < 20; ++i) {
    Tensor x = random_tensor({2, 6}, rng, true);
    std::vector<Tensor> inputs{x};
    for (const auto& p : m.params())
      if (p.name.rfind("encoder", 0) == 0) inputs.push_back(p.tensor);
    auto r = grad_check([&] { return sum_squares(m.encode(x)); }, inputs);
    EXPECT_LE(r.max_rel_error, 1e-4);
  }
}

TEST(Decode, ReconstructionGradient) {
  PrecisionScope f64(Precision::f64);
  Rng rng(3);
  CrqVae m(tiny_config(), rng);
  Tensor z = random_tensor({3, 4}, rng, true);
  const Tensor x = random_tensor({3, 6}, rng);
  std::vector<Tensor> inputs{z};
  for (const auto& p : m.params())
    if (p.name.rfind("decoder", 0) == 0) inputs.push_back(p.tensor);
  auto r = grad_check([&] { return recon_loss(m.decode(z), x); }, inputs);
  EXPECT_LE(r.max_rel_error, 1e-4);
}

TEST(Decode, OverfitsEightItemsWithoutQuantization) {
  Rng rng(4);
  CrqConfig cfg = tiny_config();
  cfg.d_in = 16;
  cfg.d_z = 8;
  CrqVae m(cfg, rng);
  const Tensor x = random_tensor({8, 16}, rng);
  nn::ParamList params;
  for (const auto& p : m.params())
    if (p.name.rfind("codebook", 0) != 0) params.push_back(p);
  AdamConfig acfg;
  acfg.lr = 3e-3;
  acfg.weight_decay = 0.0;
  Adam opt(params, acfg);
  double mse = 1.0;
  for (int step = 0; step < 3000; ++step) {
    opt.zero_grad();
    Tensor loss = recon_loss(m.decode(m.encode(x)), x);
    loss.backward();
    opt.step();
    mse = loss.item() / 16.0;
  }
  EXPECT_LE(mse, 1e-3);
}

TEST(ResidualQuantize, ExactCodewordMatch) {
  Rng rng(7);
  CrqVae m(tiny_config(3, 8), rng);
  const std::vector<double> z{0.5, -1.0, 2.0, 0.25};
  auto cb0 = m.codebook(0).mutable_values();
  std::copy(z.begin(), z.end(), cb0.begin() + 5 * 4);
  for (std::size_t d = 1; d < 3; ++d) {
    auto cb = m.codebook(d).mutable_values();
    std::fill(cb.begin() + 2 * 4, cb.begin() + 3 * 4, 0.0);
  }
  const auto t = m.residual_quantize(z);
  EXPECT_EQ(t.codes, (Sid{5, 2, 2}));
  for (double r : t.residuals.back()) EXPECT_NEAR(r, 0.0, 1e-12);
}

TEST(ResidualQuantize, MatchesPerLayerExhaustiveSearch) {
  Rng rng(8);
  CrqVae m(tiny_config(2, 3), rng);
  set_values(m.codebook(0), {1, 0, 0, 0, 0, 1, 0, 0, -1, -1, 0, 0});
  set_values(m.codebook(1), {0.1, 0, 0, 0, 0, 0.1, 0, 0, 0, 0, 0.3, 0.3});
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> z(4);
    for (auto& v : z) v = rng.normal();
    const auto t = m.residual_quantize(z);
    std::vector<double> r = z;
    for (std::size_t d = 0; d < 2; ++d) {
      const auto cb = m.codebook(d).values();
      std::uint32_t best = 0;
      double best_d = 1e300;
      for (std::uint32_t k = 0; k < 3; ++k) {
        double dist = 0.0;
        for (std::size_t j = 0; j < 4; ++j) dist += (r[j] - cb[k * 4 + j]) * (r[j] - cb[k * 4 + j]);
        if (dist < best_d) {
          best_d = dist;
          best = k;
        }
      }
      EXPECT_EQ(t.codes[d], best);
      for (std::size_t j = 0; j < 4; ++j) r[j] -= cb[best * 4 + j];
    }
  }
}

TEST(ResidualQuantize, ScaleInvariantCodes) {
  Rng rng(9);
  CrqVae a(tiny_config(), rng);
  Rng rng2(9);
  CrqVae b(tiny_config(), rng2);
  for (std::size_t d = 0; d < 3; ++d) {
    auto cb = b.codebook(d).mutable_values();
    for (auto& v : cb) v *= 4.0;
  }
  for (int i = 0; i < 50; ++i) {
    std::vector<double> z(4), z4(4);
    for (std::size_t j = 0; j < 4; ++j) z4[j] = 4.0 * (z[j] = rng.normal());
    EXPECT_EQ(a.residual_quantize(z).codes, b.residual_quantize(z4).codes);
  }
}

TEST(ResidualQuantize, TraceIdentityIsExact) {
  Rng rng(10);
  CrqVae m(tiny_config(), rng);
  for (int i = 0; i < 50; ++i) {
    std::vector<double> z(4);
    for (auto& v : z) v = rng.normal();
    const auto t = m.residual_quantize(z);
    std::vector<double> r = z;
    for (std::size_t d = 0; d < 3; ++d) {
      const auto cb = m.codebook(d).values();
      for (std::size_t j = 0; j < 4; ++j) r[j] -= cb[t.codes[d] * 4 + j];
      EXPECT_EQ(r, t.residuals[d + 1]);
    }
  }
}

TEST(ResidualQuantize, TiesGoToLowestIndex) {
  Rng rng(11);
  CrqVae m(tiny_config(2, 4), rng);
  set_values(m.codebook(0), {1, 0, 0, 0, -1, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 5});
  const auto t = m.residual_quantize(std::vector<double>{0, 0, 0, 0});
  EXPECT_EQ(t.codes[0], 0u);
}

TEST(ResidualQuantize, BatchMatchesSingle) {
  Rng rng(12);
  CrqVae m(tiny_config(), rng);
  const Tensor z = random_tensor({20, 4}, rng);
  const auto batch = m.quantize(z);
  for (std::size_t i = 0; i < 20; ++i)
    EXPECT_EQ(batch[i], m.residual_quantize(z.values().subspan(i * 4, 4)).codes);
}

TEST(LayerQuantLoss, ZeroOnExactMatch) {
  QuantizedBatch q;
  q.z = Tensor::from({1, 2}, {1.0, 2.0});
  q.inputs = {q.z, Tensor::from({1, 2}, {0.0, 0.0})};
  q.codewords = {Tensor::from({1, 2}, {1.0, 2.0}), Tensor::from({1, 2}, {0.0, 0.0})};
  EXPECT_EQ(layer_quant_loss(q, 0.1).item(), 0.0);
}

TEST(LayerQuantLoss, HandInstanceAndGradients) {
  PrecisionScope f64(Precision::f64);
  const double eta = 0.25;
  Tensor r = Tensor::from({1, 3}, {1.0, -2.0, 0.5}, true);
  Tensor e = Tensor::from({1, 3}, {0.5, 1.0, 0.0}, true);
  QuantizedBatch q;
  q.z = r;
  q.inputs = {r};
  q.codewords = {e};
  Tensor loss = layer_quant_loss(q, eta);
  const double sq = 0.25 + 9.0 + 0.25;
  EXPECT_NEAR(loss.item(), (1.0 + eta) * sq, 1e-12);
  loss.backward();
  for (std::size_t j = 0; j < 3; ++j) {
    const double diff = r.at(j) - e.at(j);
    EXPECT_NEAR(r.grad()[j], 2.0 * diff, 1e-12);
    EXPECT_NEAR(e.grad()[j], -2.0 * eta * diff, 1e-12);
  }
}

TEST(LayerQuantLoss, ZeroEtaStarvesCodebook) {
  Rng rng(13);
  CrqVae m(tiny_config(), rng);
  Tensor z = random_tensor({5, 4}, rng, true);
  auto q = quantize_batch(m, z);
  layer_quant_loss(q, 0.0).backward();
  for (std::size_t d = 0; d < 3; ++d) {
    const auto g = m.codebook(d).grad();
    for (double v : g) EXPECT_EQ(v, 0.0);
  }
}

TEST(GlobalQuantLoss, ZeroWhenEqualAndMatchesArithmetic) {
  Rng rng(14);
  Tensor z = random_tensor({3, 4}, rng);
  EXPECT_EQ(global_quant_loss(z, z, 0.1).item(), 0.0);
  PrecisionScope f64(Precision::f64);
  Tensor zh = random_tensor({3, 4}, rng);
  double sq = 0.0;
  for (std::size_t i = 0; i < 12; ++i) sq += (zh.at(i) - z.at(i)) * (zh.at(i) - z.at(i));
  EXPECT_NEAR(global_quant_loss(z, zh, 0.3).item(), (1.3 * sq) / 3.0, 1e-6);
}

TEST(GlobalQuantLoss, ZeroEtaRoutesGradientOnlyToCodewords) {
  Rng rng(15);
  CrqVae m(tiny_config(), rng);
  Tensor z = random_tensor({4, 4}, rng, true);
  auto q = quantize_batch(m, z);
  global_quant_loss(z, q.z_hat, 0.0).backward();
  for (double g : z.grad()) EXPECT_EQ(g, 0.0);
  double total = 0.0;
  for (std::size_t d = 0; d < 3; ++d)
    for (double g : m.codebook(d).grad()) total += std::abs(g);
  EXPECT_GT(total, 0.0);
}

TEST(MinePairs, DuplicatesPairOrthogonalDoNot) {
  std::vector<std::vector<double>> dup{{0.3, 0.4, 0.5}, {0.3, 0.4, 0.5}};
  const auto p = mine_pairs(dup, 1.0);
  EXPECT_EQ(p[0], (std::vector<std::uint32_t>{1}));
  std::vector<std::vector<double>> eye{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
  for (const auto& v : mine_pairs(eye, 0.8)) EXPECT_TRUE(v.empty());
}

TEST(MinePairs, TwoClustersMatchBruteForce) {
  Rng rng(16);
  const auto corpus = two_cluster_corpus(12, 5, 0.15, rng);
  const auto p = mine_pairs(corpus, 0.8);
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    std::vector<std::uint32_t> expect;
    for (std::size_t j = 0; j < corpus.size(); ++j)
      if (j != i && cosine(corpus[i], corpus[j]) >= 0.8) expect.push_back(static_cast<std::uint32_t>(j));
    EXPECT_EQ(p[i], expect);
    for (auto j : p[i]) EXPECT_EQ(i / 12, j / 12);
  }
}

TEST(Contrastive, SinglePairWithoutNegativesIsZero) {
  Rng rng(17);
  CrqVae m(tiny_config(), rng);
  Tensor z = random_tensor({2, 4}, rng, true);
  auto q = quantize_batch(m, z);
  const std::vector<std::uint32_t> items{0, 1};
  auto b = make_contrastive_batch({0}, {1}, items, {{1}, {0}});
  EXPECT_NEAR(prefix_contrastive_loss(q, b, m.config()).item(), 0.0, 1e-7);
}

TEST(Contrastive, HandComputedAntipodalNegatives) {
  PrecisionScope f64(Precision::f64);
  Rng rng(18);
  CrqConfig cfg = tiny_config(2, 2);
  cfg.tau = 1.0;
  CrqVae m(cfg, rng);
  set_values(m.codebook(0), {1, 0, 0, 0, -1, 0, 0, 0});
  const std::size_t negatives = 3;
  std::vector<Sid> codes{{0, 0}, {0, 0}};
  for (std::size_t i = 0; i < negatives; ++i) codes.push_back({1, 0});
  Tensor z = random_tensor({codes.size(), 4}, rng, true);
  auto q = quantize_batch(m, z, codes);
  std::vector<std::uint32_t> items(codes.size());
  std::iota(items.begin(), items.end(), 0u);
  std::vector<std::vector<std::uint32_t>> nb(codes.size());
  nb[0] = {1};
  nb[1] = {0};
  auto b = make_contrastive_batch({0}, {1}, items, nb);
  const double e = std::exp(1.0);
  const double expected = -std::log(e / (e + static_cast<double>(negatives) / e));
  EXPECT_NEAR(prefix_contrastive_loss(q, b, cfg).item(), expected, 1e-9);
}

TEST(Contrastive, GradientReachesLatentNotCodebooks) {
  Rng rng(19);
  CrqVae m(tiny_config(3, 4), rng);
  Tensor z = random_tensor({6, 4}, rng, true);
  auto q = quantize_batch(m, z);
  const std::vector<std::uint32_t> items{0, 1, 2, 3, 4, 5};
  auto b = make_contrastive_batch({0, 2}, {1, 3}, items, {{1}, {0}, {3}, {2}, {}, {}});
  prefix_contrastive_loss(q, b, m.config()).backward();
  for (std::size_t d = 0; d < 3; ++d)
    if (m.codebook(d).has_grad())
      for (double g : m.codebook(d).grad()) EXPECT_EQ(g, 0.0);
  double latent = 0.0;
  for (double g : z.grad()) latent += std::abs(g);
  EXPECT_GT(latent, 0.0);
  EXPECT_THROW(prefix_contrastive_loss(q, ContrastiveBatch{}, m.config()), ContractError);
}

TEST(CrqLoss, ReducesToReconstructionWhenWeightsVanish) {
  Rng rng(20);
  CrqConfig cfg = tiny_config();
  cfg.lambda_global = 0.0;
  cfg.lambda_contrast = 0.0;
  cfg.lambda_layer = 0.0;
  CrqVae m(cfg, rng);
  const Tensor x = random_tensor({4, 6}, rng);
  const std::vector<std::uint32_t> items{0, 1, 2, 3};
  auto b = make_contrastive_batch({0}, {1}, items, {{1}, {0}, {}, {}});
  auto parts = crqvae_loss(m, x, b);
  EXPECT_EQ(parts.total.item(), parts.recon.item());
}

TEST(CrqLoss, ComponentsSumToTotal) {
  Rng rng(21);
  CrqConfig cfg = tiny_config();
  CrqVae m(cfg, rng);
  const Tensor x = random_tensor({4, 6}, rng);
  const std::vector<std::uint32_t> items{0, 1, 2, 3};
  auto b = make_contrastive_batch({0}, {1}, items, {{1}, {0}, {}, {}});
  auto p = crqvae_loss(m, x, b);
  const double sum = p.recon.item() + cfg.lambda_global * p.global.item() + cfg.lambda_layer * p.layer.item() +
                     cfg.lambda_contrast * p.contrast.item();
  EXPECT_NEAR(p.total.item(), sum, 1e-6);
}

// Stop-gradients make encoder and codebook gradients differ from the value's
// derivative on purpose; the decoder sees only the reconstruction term.
TEST(CrqLoss, DecoderFiniteDifferenceWithFixedAssignments) {
  PrecisionScope f64(Precision::f64);
  Rng rng(22);
  CrqConfig cfg = tiny_config();
  CrqVae m(cfg, rng);
  for (int i = 0; i < 20; ++i) {
    const Tensor x = random_tensor({4, 6}, rng);
    const std::vector<std::uint32_t> items{0, 1, 2, 3};
    auto b = make_contrastive_batch({0, 2}, {1, 3}, items, {{1}, {0}, {3}, {2}});
    std::vector<Sid> codes;
    {
      NoGradScope ng;
      codes = m.quantize(m.encode(x));
    }
    std::vector<Tensor> inputs;
    for (const auto& p : m.params())
      if (p.name.rfind("decoder", 0) == 0) inputs.push_back(p.tensor);
    auto r = grad_check([&] { return crqvae_loss(m, x, b, codes).total; }, inputs);
    EXPECT_LE(r.max_rel_error, 1e-3);
  }
}

TEST(CrqTrain, ToyCorpusLossDecreases) {
  Rng rng(23);
  const auto corpus = two_cluster_corpus(8, 6, 0.1, rng);
  CrqConfig cfg = tiny_config(3, 4);
  CrqTrainConfig t;
  t.steps = 500;
  t.batch_size = 16;
  t.log_every = 10;
  std::vector<double> totals;
  train_crqvae(corpus, cfg, t, [&](const CrqLogRow& r) { totals.push_back(r.total); });
  ASSERT_GE(totals.size(), 10u);
  // Exponential smoothing removes jitter from reassignment and reseeding.
  std::vector<double> smooth;
  double s = totals[0];
  for (double v : totals) smooth.push_back(s = 0.7 * s + 0.3 * v);
  std::size_t down = 0;
  for (std::size_t i = 1; i < smooth.size(); ++i) down += smooth[i] < smooth[i - 1] ? 1 : 0;
  EXPECT_GE(static_cast<double>(down), 0.9 * static_cast<double>(smooth.size() - 1));
  EXPECT_LT(totals.back(), totals.front());
}

TEST(CrqTrain, SidAssignmentIsDeterministic) {
  Rng rng(24);
  const auto corpus = two_cluster_corpus(16, 6, 0.2, rng);
  CrqTrainConfig t;
  t.steps = 60;
  t.batch_size = 16;
  const auto a = train_crqvae(corpus, tiny_config(), t).assign(corpus);
  const auto b = train_crqvae(corpus, tiny_config(), t).assign(corpus);
  EXPECT_EQ(a, b);
}

TEST(CodebookMetrics, DistinctSidsHaveNoCollisions) {
  std::vector<Sid> sids{{0, 0}, {0, 1}, {1, 0}, {1, 1}};
  std::vector<std::vector<double>> emb{{1, 0}, {1, 0.01}, {0, 1}, {0.01, 1}};
  const auto m = codebook_metrics(sids, emb, 2, 0.8);
  EXPECT_EQ(m.collision, 0.0);
  EXPECT_EQ(m.consistency, 1.0);
  EXPECT_EQ(m.pairs, 2u);
  // Two codewords per layer are both needed to cover 90% of four items.
  EXPECT_EQ(m.concentration, 1.0);
}

TEST(CodebookMetrics, SharedSidsCountAsCollisions) {
  std::vector<Sid> sids{{0, 0}, {0, 0}, {1, 0}, {0, 1}};
  std::vector<std::vector<double>> emb{{1, 0}, {0, 1}, {1, 0.01}, {0.01, 1}};
  const auto m = codebook_metrics(sids, emb, 4, 0.8);
  EXPECT_DOUBLE_EQ(m.collision, 0.5);
  // Pairs (0,2) and (1,3): only the second shares its first code.
  EXPECT_DOUBLE_EQ(m.consistency, 0.5);
  EXPECT_THROW(codebook_metrics({}, {}, 4, 0.8), ContractError);
}
