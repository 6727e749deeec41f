// SPDX-License-Identifier: Apache-2.0
#include "slategen/crqvae.hpp"

#include <algorithm>
#include <set>
#include <cmath>
#include <map>
#include <numeric>

#include "slategen/optim.hpp"

namespace slategen::crq {

namespace {

std::vector<std::uint32_t> layer_codes(const std::vector<Sid>& codes, std::size_t d) {
  std::vector<std::uint32_t> out(codes.size());
  for (std::size_t i = 0; i < codes.size(); ++i) out[i] = codes[i][d];
  return out;
}

Tensor stack_rows(const std::vector<std::vector<double>>& rows, std::span<const std::uint32_t> pick) {
  const std::size_t d = rows.at(pick[0]).size();
  std::vector<double> v;
  v.reserve(pick.size() * d);
  for (auto i : pick) v.insert(v.end(), rows[i].begin(), rows[i].end());
  return Tensor::from({pick.size(), d}, std::move(v));
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  const double den = std::sqrt(aa) * std::sqrt(bb);
  return den > 0.0 ? ab / den : 0.0;
}

}  // namespace

void CrqConfig::validate() const {
  if (depth < 2) throw ContractError("crq: depth must be at least 2");
  if (codebook_size < 2) throw ContractError("crq: codebook_size must be at least 2");
  if (d_in == 0 || d_z == 0) throw ContractError("crq: dimensions must be positive");
  if (tau <= 0.0) throw ContractError("crq: tau must be positive");
  if (layer_weights.size() < depth - 1)
    throw ContractError("crq: need at least depth-1 layer weights, got " + std::to_string(layer_weights.size()));
  for (double w : layer_weights)
    if (w <= 0.0) throw ContractError("crq: layer weights must be positive");
  if (!(positive_threshold > 0.0 && positive_threshold <= 1.0))
    throw ContractError("crq: positive_threshold must lie in (0, 1]");
  if (eta < 0.0 || lambda_global < 0.0 || lambda_contrast < 0.0 || lambda_layer < 0.0)
    throw ContractError("crq: loss weights must be non-negative");
}

CrqVae::CrqVae(const CrqConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  encoder_ = nn::Mlp(cfg.d_in, 2 * cfg.d_z, cfg.d_z, rng);
  decoder_ = nn::Mlp(cfg.d_z, 2 * cfg.d_z, cfg.d_in, rng);
  for (std::size_t d = 0; d < cfg.depth; ++d) codebooks_.push_back(nn::normal_param(cfg.codebook_size, cfg.d_z, 0.1, rng));
}

Tensor CrqVae::encode(const Tensor& x) const {
  if (x.cols() != cfg_.d_in)
    throw DimensionError("crq encode: expected width " + std::to_string(cfg_.d_in) + ", got " +
                         shape_string(x.shape()));
  return encoder_.forward(x);
}

Tensor CrqVae::decode(const Tensor& z) const {
  if (z.cols() != cfg_.d_z)
    throw DimensionError("crq decode: expected width " + std::to_string(cfg_.d_z) + ", got " +
                         shape_string(z.shape()));
  return decoder_.forward(z);
}

QuantizationTrace CrqVae::residual_quantize(std::span<const double> z) const {
  if (z.size() != cfg_.d_z) throw DimensionError("residual_quantize: latent width mismatch");
  QuantizationTrace t;
  t.residuals.emplace_back(z.begin(), z.end());
  t.z_hat.assign(cfg_.d_z, 0.0);
  for (std::size_t d = 0; d < cfg_.depth; ++d) {
    const auto& r = t.residuals.back();
    const auto cb = codebooks_[d].values();
    const auto c = kernels::nearest_codeword_serial(r, cb, 1, cfg_.codebook_size, cfg_.d_z)[0];
    t.codes.push_back(c);
    std::vector<double> next(cfg_.d_z);
    for (std::size_t j = 0; j < cfg_.d_z; ++j) {
      const double e = cb[c * cfg_.d_z + j];
      next[j] = r[j] - e;
      t.z_hat[j] += e;
    }
    t.residuals.push_back(std::move(next));
  }
  return t;
}

std::vector<Sid> CrqVae::quantize(const Tensor& z) const {
  const std::size_t n = z.rows(), dz = cfg_.d_z;
  if (z.cols() != dz) throw DimensionError("quantize: latent width mismatch");
  std::vector<double> r(z.values().begin(), z.values().end());
  std::vector<Sid> out(n, Sid(cfg_.depth));
  for (std::size_t d = 0; d < cfg_.depth; ++d) {
    const auto cb = codebooks_[d].values();
    const auto codes = kernels::nearest_codeword(r, cb, n, cfg_.codebook_size, dz);
    for (std::size_t i = 0; i < n; ++i) {
      out[i][d] = codes[i];
      for (std::size_t j = 0; j < dz; ++j) r[i * dz + j] -= cb[codes[i] * dz + j];
    }
  }
  return out;
}

std::vector<Sid> CrqVae::assign(const std::vector<std::vector<double>>& embeddings) const {
  NoGradScope ng;
  std::vector<std::uint32_t> all(embeddings.size());
  std::iota(all.begin(), all.end(), 0u);
  return quantize(encode(stack_rows(embeddings, all)));
}

nn::ParamList CrqVae::params() const {
  nn::ParamList p;
  encoder_.collect("encoder", p);
  decoder_.collect("decoder", p);
  for (std::size_t d = 0; d < codebooks_.size(); ++d) p.push_back({"codebook." + std::to_string(d), codebooks_[d]});
  return p;
}

// ---------------------------------------------------------------------------

QuantizedBatch quantize_batch(const CrqVae& model, const Tensor& z) { return quantize_batch(model, z, model.quantize(z)); }

QuantizedBatch quantize_batch(const CrqVae& model, const Tensor& z, const std::vector<Sid>& codes) {
  const std::size_t depth = model.config().depth;
  if (codes.size() != z.rows()) throw DimensionError("quantize_batch: one code tuple per row required");
  QuantizedBatch q;
  q.z = z;
  q.codes = codes;
  Tensor r = z;
  for (std::size_t d = 0; d < depth; ++d) {
    const auto idx = layer_codes(codes, d);
    Tensor e = gather_rows(model.codebook(d), idx);
    q.inputs.push_back(r);
    q.codewords.push_back(e);
    q.z_hat = d == 0 ? e : q.z_hat + e;
    r = r - stop_gradient(e);
  }
  return q;
}

Tensor layer_quant_loss(const QuantizedBatch& q, double eta) {
  const double inv_n = 1.0 / static_cast<double>(q.z.rows());
  Tensor total;
  for (std::size_t d = 0; d < q.codewords.size(); ++d) {
    const Tensor& r = q.inputs[d];
    const Tensor& e = q.codewords[d];
    Tensor term = sum_squares(r - stop_gradient(e)) + eta * sum_squares(e - stop_gradient(r));
    total = d == 0 ? term : total + term;
  }
  return total * inv_n;
}

Tensor global_quant_loss(const Tensor& z, const Tensor& z_hat, double eta) {
  const double inv_n = 1.0 / static_cast<double>(z.rows());
  return (sum_squares(z_hat - stop_gradient(z)) + eta * sum_squares(z - stop_gradient(z_hat))) * inv_n;
}

Tensor recon_loss(const Tensor& x_hat, const Tensor& x) {
  return sum_squares(x_hat - x) * (1.0 / static_cast<double>(x.rows()));
}

std::vector<std::vector<std::uint32_t>> mine_pairs(const std::vector<std::vector<double>>& embeddings,
                                                   double threshold, std::size_t max_neighbors) {
  const std::size_t n = embeddings.size();
  std::vector<std::vector<std::uint32_t>> out(n);
  const auto rows = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t ii = 0; ii < rows; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    std::vector<std::pair<double, std::uint32_t>> hits;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const double c = cosine(embeddings[i], embeddings[j]);
      // Identical vectors can land a rounding error below 1.
      if (c >= threshold - 1e-12) hits.emplace_back(-c, static_cast<std::uint32_t>(j));
    }
    if (max_neighbors != 0 && hits.size() > max_neighbors) {
      std::partial_sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(max_neighbors), hits.end());
      hits.resize(max_neighbors);
    }
    for (const auto& h : hits) out[i].push_back(h.second);
    std::sort(out[i].begin(), out[i].end());
  }
  return out;
}

ContrastiveBatch make_contrastive_batch(std::vector<std::uint32_t> anchors, std::vector<std::uint32_t> positives,
                                        std::span<const std::uint32_t> row_items,
                                        const std::vector<std::vector<std::uint32_t>>& neighbors) {
  if (anchors.size() != positives.size()) throw DimensionError("contrastive batch: anchors and positives differ in length");
  const std::size_t n = row_items.size();
  ContrastiveBatch b;
  b.mask.assign(anchors.size() * n, 1);
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    const auto item = row_items[anchors[a]];
    const auto& nb = neighbors[item];
    for (std::size_t j = 0; j < n; ++j) {
      const bool same = row_items[j] == item || std::binary_search(nb.begin(), nb.end(), row_items[j]);
      if (j == anchors[a] || (same && j != positives[a])) b.mask[a * n + j] = 0;
    }
  }
  b.anchors = std::move(anchors);
  b.positives = std::move(positives);
  return b;
}

Tensor prefix_contrastive_loss(const QuantizedBatch& q, const ContrastiveBatch& batch, const CrqConfig& cfg) {
  if (batch.anchors.empty()) throw ContractError("prefix_contrastive_loss: no positive pairs in batch");
  Tensor total;
  for (std::size_t d = 0; d + 1 < cfg.depth; ++d) {
    const Tensor& r = q.inputs[d];
    // Value is exactly the matched codeword; the residual term only routes
    // gradient to the encoder.
    Tensor x = stop_gradient(q.codewords[d]) + (r - stop_gradient(r));
    Tensor unit = normalize_rows(x);
    Tensor sim = matmul_t(unit, unit) * (1.0 / cfg.tau);
    Tensor rows = gather_rows(sim, batch.anchors);
    Tensor term = cfg.layer_weights[d] * softmax_ce(rows, batch.positives, Reduction::mean, batch.mask);
    total = d == 0 ? term : total + term;
  }
  return total * (1.0 / static_cast<double>(cfg.depth - 1));
}

LossParts crqvae_loss(const CrqVae& model, const Tensor& x, const ContrastiveBatch& batch) {
  Tensor z = model.encode(x);
  std::vector<Sid> codes;
  {
    NoGradScope ng;
    codes = model.quantize(z);
  }
  return crqvae_loss(model, x, batch, codes);
}

LossParts crqvae_loss(const CrqVae& model, const Tensor& x, const ContrastiveBatch& batch,
                      const std::vector<Sid>& codes) {
  const auto& cfg = model.config();
  LossParts p;
  Tensor z = model.encode(x);
  QuantizedBatch q = quantize_batch(model, z, codes);
  // Straight-through: the decoder sees ẑ, gradients reach z unchanged.
  Tensor z_q = z + stop_gradient(q.z_hat - z);
  p.recon = recon_loss(model.decode(z_q), x);
  p.global = global_quant_loss(z, q.z_hat, cfg.eta);
  p.layer = layer_quant_loss(q, cfg.eta);
  p.total = p.recon + cfg.lambda_global * p.global + cfg.lambda_layer * p.layer;
  if (!batch.anchors.empty()) {
    p.contrast = prefix_contrastive_loss(q, batch, cfg);
    p.total = p.total + cfg.lambda_contrast * p.contrast;
  }
  return p;
}

// ---------------------------------------------------------------------------

std::vector<double> kmeans(std::span<const double> points, std::size_t n, std::size_t dim, std::size_t k,
                           std::size_t iters, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order.begin(), order.end());
  std::vector<double> centers(k * dim);
  for (std::size_t c = 0; c < k; ++c)
    std::copy_n(points.begin() + static_cast<std::ptrdiff_t>(order[c % n] * dim), dim,
                centers.begin() + static_cast<std::ptrdiff_t>(c * dim));
  for (std::size_t it = 0; it < iters; ++it) {
    const auto assign = kernels::nearest_codeword(points, centers, n, k, dim);
    std::vector<double> sums(k * dim, 0.0);
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++counts[assign[i]];
      for (std::size_t j = 0; j < dim; ++j) sums[assign[i] * dim + j] += points[i * dim + j];
    }
    for (std::size_t c = 0; c < k; ++c)
      if (counts[c] > 0)
        for (std::size_t j = 0; j < dim; ++j) centers[c * dim + j] = sums[c * dim + j] / static_cast<double>(counts[c]);
  }
  return centers;
}

CrqLogRow evaluate_crqvae(const CrqVae& model, const std::vector<std::vector<double>>& embeddings,
                          const std::vector<std::vector<std::uint32_t>>& neighbors) {
  NoGradScope ng;
  std::vector<std::uint32_t> rows(embeddings.size());
  std::iota(rows.begin(), rows.end(), 0u);
  std::vector<std::uint32_t> anchors, positives;
  for (std::uint32_t i = 0; i < rows.size(); ++i)
    if (!neighbors[i].empty()) {
      anchors.push_back(i);
      positives.push_back(neighbors[i][0]);
    }
  const auto batch = make_contrastive_batch(std::move(anchors), std::move(positives), rows, neighbors);
  const LossParts p = crqvae_loss(model, stack_rows(embeddings, rows), batch);
  return {0, p.total.item(), p.recon.item(), p.global.item(), p.layer.item(),
          p.contrast.defined() ? p.contrast.item() : 0.0};
}

CrqVae train_crqvae(const std::vector<std::vector<double>>& embeddings, const CrqConfig& cfg,
                    const CrqTrainConfig& tcfg, const std::function<void(const CrqLogRow&)>& on_log) {
  const std::size_t n = embeddings.size();
  if (n < 2) throw ContractError("train_crqvae: corpus needs at least 2 items");
  if (embeddings[0].size() != cfg.d_in)
    throw DimensionError("train_crqvae: corpus width " + std::to_string(embeddings[0].size()) + " differs from d_in " +
                         std::to_string(cfg.d_in));
  Rng rng(tcfg.seed);
  CrqVae model(cfg, rng);
  const std::size_t depth = cfg.depth, k = cfg.codebook_size, dz = cfg.d_z;

  // Codebook init: k-means on each layer's residuals of the whole corpus.
  {
    NoGradScope ng;
    std::vector<std::uint32_t> all(n);
    std::iota(all.begin(), all.end(), 0u);
    const Tensor z = model.encode(stack_rows(embeddings, all));
    std::vector<double> r(z.values().begin(), z.values().end());
    for (std::size_t d = 0; d < depth; ++d) {
      auto centers = kmeans(r, n, dz, k, tcfg.kmeans_iters, rng);
      auto cb = model.codebook(d).mutable_values();
      for (std::size_t i = 0; i < centers.size(); ++i) cb[i] = static_cast<double>(static_cast<float>(centers[i]));
      const auto codes = kernels::nearest_codeword(r, cb, n, k, dz);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < dz; ++j) r[i * dz + j] -= cb[codes[i] * dz + j];
    }
  }

  const auto neighbors = mine_pairs(embeddings, cfg.positive_threshold, cfg.max_positives);
  AdamConfig acfg;
  acfg.lr = tcfg.lr;
  acfg.weight_decay = tcfg.weight_decay;
  Adam opt(model.params(), acfg);
  std::vector<std::vector<std::size_t>> last_used(depth, std::vector<std::size_t>(k, 0));
  std::vector<std::uint32_t> pool(n);
  std::iota(pool.begin(), pool.end(), 0u);
  const std::size_t b = std::min(tcfg.batch_size, n);

  for (std::size_t step = 1; step <= tcfg.steps; ++step) {
    // Partial Fisher-Yates draw of the batch.
    for (std::size_t i = 0; i < b; ++i) std::swap(pool[i], pool[i + rng.index(n - i)]);
    std::vector<std::uint32_t> rows(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(b));
    std::vector<std::uint32_t> anchors, positives;
    for (std::size_t i = 0; i < b / 2; ++i) {
      const auto& nb = neighbors[rows[i]];
      if (nb.empty()) continue;
      anchors.push_back(static_cast<std::uint32_t>(i));
      positives.push_back(static_cast<std::uint32_t>(rows.size()));
      rows.push_back(nb[rng.index(nb.size())]);
    }
    const auto batch = make_contrastive_batch(std::move(anchors), std::move(positives), rows, neighbors);
    const Tensor x = stack_rows(embeddings, rows);

    opt.zero_grad();
    Tensor z;
    std::vector<Sid> codes;
    {
      NoGradScope ng;
      z = model.encode(x);
      codes = model.quantize(z);
    }
    LossParts parts = crqvae_loss(model, x, batch, codes);
    parts.total.backward();
    if (tcfg.cosine_decay) opt.set_lr(cosine_lr(tcfg.lr, step, tcfg.steps));
    opt.step();

    for (const auto& c : codes)
      for (std::size_t d = 0; d < depth; ++d) last_used[d][c[d]] = step;
    // Dead codewords move onto the worst-quantized residuals of this batch.
    {
      NoGradScope ng;
      QuantizedBatch q = quantize_batch(model, z, codes);
      for (std::size_t d = 0; d < depth; ++d) {
        auto cb = model.codebook(d).mutable_values();
        const auto rv = q.inputs[d].values();
        const auto ev = q.codewords[d].values();
        std::vector<std::pair<double, std::size_t>> err(rows.size());
        for (std::size_t i = 0; i < rows.size(); ++i) {
          double e = 0.0;
          for (std::size_t j = 0; j < dz; ++j) e += (rv[i * dz + j] - ev[i * dz + j]) * (rv[i * dz + j] - ev[i * dz + j]);
          err[i] = {-e, i};
        }
        std::sort(err.begin(), err.end());
        std::size_t next = 0;
        for (std::size_t c = 0; c < k && next < err.size(); ++c)
          if (step - last_used[d][c] >= tcfg.dead_after) {
            const std::size_t row = err[next++].second;
            for (std::size_t j = 0; j < dz; ++j) cb[c * dz + j] = rv[row * dz + j];
            last_used[d][c] = step;
          }
      }
    }

    if (on_log && (step % tcfg.log_every == 0 || step == tcfg.steps)) {
      CrqLogRow row = evaluate_crqvae(model, embeddings, neighbors);
      row.step = step;
      on_log(row);
    }
  }
  return model;
}

// ---------------------------------------------------------------------------

CodebookMetrics codebook_metrics(const std::vector<Sid>& sids, const std::vector<std::vector<double>>& embeddings,
                                 std::size_t codebook_size, double threshold, std::size_t max_neighbors) {
  if (sids.empty()) throw ContractError("codebook_metrics: empty corpus");
  if (sids.size() != embeddings.size()) throw DimensionError("codebook_metrics: SID and embedding counts differ");
  CodebookMetrics m;
  const std::size_t n = sids.size();
  std::map<Sid, std::size_t> freq;
  for (const auto& s : sids) ++freq[s];
  std::size_t shared = 0;
  for (const auto& s : sids) shared += freq[s] > 1 ? 1 : 0;
  m.collision = static_cast<double>(shared) / static_cast<double>(n);

  const std::size_t depth = sids[0].size();
  double conc = 0.0;
  for (std::size_t d = 0; d < depth; ++d) {
    std::vector<std::size_t> counts(codebook_size, 0);
    for (const auto& s : sids) ++counts.at(s[d]);
    std::sort(counts.begin(), counts.end(), std::greater<>());
    std::size_t covered = 0, used = 0;
    while (static_cast<double>(covered) < 0.9 * static_cast<double>(n)) covered += counts[used++];
    conc += static_cast<double>(used) / static_cast<double>(codebook_size);
  }
  m.concentration = conc / static_cast<double>(depth);

  const auto neighbors = mine_pairs(embeddings, threshold, max_neighbors);
  std::set<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t i = 0; i < n; ++i)
    for (auto j : neighbors[i]) pairs.emplace(std::min<std::size_t>(i, j), std::max<std::size_t>(i, j));
  std::size_t agree = 0;
  for (const auto& [i, j] : pairs) agree += sids[i][0] == sids[j][0] ? 1 : 0;
  m.pairs = pairs.size();
  m.consistency = m.pairs ? static_cast<double>(agree) / static_cast<double>(m.pairs) : 0.0;
  return m;
}

double layer_entropy(const std::vector<Sid>& sids, std::size_t layer, std::size_t codebook_size) {
  std::vector<double> counts(codebook_size, 0.0);
  for (const auto& s : sids) counts.at(s[layer]) += 1.0;
  double h = 0.0;
  for (double c : counts)
    if (c > 0.0) {
      const double p = c / static_cast<double>(sids.size());
      h -= p * std::log(p);
    }
  return h;
}

}  // namespace slategen::crq
