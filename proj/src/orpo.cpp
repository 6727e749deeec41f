// SPDX-License-Identifier: Apache-2.0
#include "slategen/orpo.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "slategen/config.hpp"
#include "slategen/io.hpp"
#include "slategen/optim.hpp"

namespace slategen::orpo {

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::permute:
      return "permute";
    case Strategy::replace:
      return "replace";
    case Strategy::anchor_repeat:
      return "anchor_repeat";
  }
  return "?";
}

Strategy parse_strategy(const std::string& name) {
  if (name == "permute") return Strategy::permute;
  if (name == "replace") return Strategy::replace;
  if (name == "anchor_repeat") return Strategy::anchor_repeat;
  throw ConfigError("unknown negative strategy '" + name + "'");
}

void NegativeMix::validate() const {
  if (permute < 0 || replace < 0 || anchor_repeat < 0) throw ConfigError("negative mix weights must be non-negative");
  if (std::abs(permute + replace + anchor_repeat - 1.0) > 1e-9)
    throw ConfigError("negative mix weights must sum to 1");
}

// ---------------------------------------------------------------------------

Tensor per_step_log_odds(const hsd::SlateModel& model, const hsd::SlateBatch& batch) {
  return log_odds(model.token_log_probs(batch), kOddsEps);
}

double per_step_log_odds(const hsd::SlateModel& model, const hsd::UserContext& ctx, const std::vector<Sid>& slate,
                         std::size_t t) {
  const auto& c = model.config();
  if (t < 1 || t > c.slate_size * c.depth)
    throw IndexError("token position " + std::to_string(t) + " outside [1, " + std::to_string(c.slate_size * c.depth) +
                     "]");
  NoGradScope ng;
  const Tensor lo = per_step_log_odds(model, hsd::SlateBatch{{ctx}, {slate}});
  return lo.at(0, t - 1);
}

Tensor slate_log_odds(const Tensor& token_log_probs) {
  const Tensor lo = log_odds(token_log_probs, kOddsEps);
  return matmul(lo, Tensor::full({lo.cols(), 1}, 1.0));
}

Tensor slate_log_odds(const hsd::SlateModel& model, const hsd::SlateBatch& batch) {
  return slate_log_odds(model.token_log_probs(batch));
}

OrpoTerms orpo_loss(const hsd::SlateModel& model, const hsd::SlateBatch& plus, const hsd::SlateBatch& minus,
                    double alpha) {
  if (plus.slates.size() != minus.slates.size())
    throw DimensionError("orpo_loss: " + std::to_string(plus.slates.size()) + " positives vs " +
                         std::to_string(minus.slates.size()) + " negatives");
  const Tensor lp_plus = model.token_log_probs(plus);
  const Tensor lp_minus = model.token_log_probs(minus);
  OrpoTerms out;
  const Tensor nll = hsd::nll_from_log_probs(lp_plus);
  const Tensor margin = slate_log_odds(lp_plus) - slate_log_odds(lp_minus);
  const Tensor penalty = mean(log_sigmoid(margin)) * -1.0;
  out.nll = nll.item();
  out.penalty = penalty.item();
  out.margins.assign(margin.values().begin(), margin.values().end());
  out.loss = alpha == 0.0 ? nll : nll + penalty * alpha;
  return out;
}

// ---------------------------------------------------------------------------

std::vector<Sid> build_positive(const SlateSample& sample) {
  if (sample.feedback.size() != sample.slate.size())
    throw DataError("sample has " + std::to_string(sample.feedback.size()) + " feedback values for " +
                    std::to_string(sample.slate.size()) + " slate items");
  std::vector<std::size_t> order(sample.slate.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return sample.feedback[a] > sample.feedback[b]; });
  std::vector<Sid> out;
  for (auto i : order) out.push_back(sample.slate[i]);
  return out;
}

SimilarityIndex::SimilarityIndex(const hsd::CodeEmbedding& codes, std::vector<Sid> candidates)
    : candidates_(std::move(candidates)) {
  std::sort(candidates_.begin(), candidates_.end());
  candidates_.erase(std::unique(candidates_.begin(), candidates_.end()), candidates_.end());
  if (candidates_.empty()) return;
  NoGradScope ng;
  const Tensor sums = codes.items(candidates_);
  const std::size_t d = sums.cols();
  for (std::size_t i = 0; i < candidates_.size(); ++i) {
    std::vector<double> v(sums.values().begin() + static_cast<std::ptrdiff_t>(i * d),
                          sums.values().begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
    double n = 0.0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    for (auto& x : v) x = n > 0.0 ? x / n : 0.0;
    unit_.push_back(std::move(v));
  }
}

std::vector<Sid> SimilarityIndex::neighbors(const Sid& anchor, std::size_t n) const {
  auto it = std::lower_bound(candidates_.begin(), candidates_.end(), anchor);
  if (it == candidates_.end() || *it != anchor) throw IndexError("anchor SID is not in the similarity index");
  const auto& a = unit_[static_cast<std::size_t>(it - candidates_.begin())];
  std::vector<std::pair<double, std::size_t>> scored;
  for (std::size_t i = 0; i < candidates_.size(); ++i) {
    if (candidates_[i] == anchor) continue;
    scored.emplace_back(std::inner_product(a.begin(), a.end(), unit_[i].begin(), 0.0), i);
  }
  const std::size_t keep = std::min(n, scored.size());
  // Candidates are sorted, so index order is lexicographic SID order.
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(keep), scored.end(),
                    [](const auto& x, const auto& y) { return x.first != y.first ? x.first > y.first : x.second < y.second; });
  std::vector<Sid> out;
  for (std::size_t i = 0; i < keep; ++i) out.push_back(candidates_[scored[i].second]);
  return out;
}

std::optional<std::vector<Sid>> build_negative(const std::vector<Sid>& y_plus, Strategy strategy,
                                               const NegativeResources& res, Rng& rng) {
  const std::size_t m = y_plus.size();
  switch (strategy) {
    case Strategy::permute: {
      if (m < 2) return std::nullopt;
      if (std::all_of(y_plus.begin(), y_plus.end(), [&](const Sid& s) { return s == y_plus[0]; })) return std::nullopt;
      std::vector<Sid> out = y_plus;
      do {
        for (std::size_t i = m - 1; i > 0; --i) std::swap(out[i], out[rng.index(i + 1)]);
      } while (out == y_plus);
      return out;
    }
    case Strategy::replace: {
      std::vector<Sid> pool;
      for (const auto& s : res.disliked)
        if (std::find(y_plus.begin(), y_plus.end(), s) == y_plus.end() &&
            std::find(pool.begin(), pool.end(), s) == pool.end())
          pool.push_back(s);
      if (pool.empty() || m == 0) return std::nullopt;
      const std::size_t k = 1 + rng.index(std::min(m, pool.size()));
      std::vector<std::size_t> slots(m);
      std::iota(slots.begin(), slots.end(), std::size_t{0});
      std::vector<Sid> out = y_plus;
      for (std::size_t i = 0; i < k; ++i) {
        std::swap(slots[i], slots[i + rng.index(m - i)]);
        std::swap(pool[i], pool[i + rng.index(pool.size() - i)]);
        out[slots[i]] = pool[i];
      }
      return out;
    }
    case Strategy::anchor_repeat: {
      if (res.similarity == nullptr || m == 0) return std::nullopt;
      auto near = res.similarity->neighbors(y_plus[0], m - 1);
      if (near.size() != m - 1) return std::nullopt;
      std::vector<Sid> out{y_plus[0]};
      out.insert(out.end(), near.begin(), near.end());
      if (out == y_plus) return std::nullopt;
      return out;
    }
  }
  return std::nullopt;
}

std::vector<PairRecord> build_pairs(const std::vector<SlateSample>& samples, const SimilarityIndex& similarity,
                                    const NegativeMix& mix, std::uint64_t seed) {
  mix.validate();
  std::map<std::uint32_t, std::vector<Sid>> disliked;
  for (const auto& s : samples)
    if (!s.test) {
      auto& pool = disliked[s.user_id];
      for (const auto& d : s.disliked)
        if (std::find(pool.begin(), pool.end(), d) == pool.end()) pool.push_back(d);
    }
  Rng rng(seed);
  const std::vector<double> weights{mix.permute, mix.replace, mix.anchor_repeat};
  const Strategy all[] = {Strategy::permute, Strategy::replace, Strategy::anchor_repeat};
  std::vector<PairRecord> out;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    if (s.test) continue;
    const auto y_plus = build_positive(s);
    NegativeResources res{disliked[s.user_id], &similarity};
    const double u = rng.uniform();
    double acc = 0.0;
    std::size_t first = 2;
    for (std::size_t k = 0; k < 3; ++k) {
      acc += weights[k];
      if (u < acc) {
        first = k;
        break;
      }
    }
    std::vector<Strategy> order{all[first]};
    for (auto st : all)
      if (st != all[first]) order.push_back(st);
    for (auto st : order) {
      if (auto neg = build_negative(y_plus, st, res, rng)) {
        out.push_back({i, y_plus, *neg, to_string(st)});
        break;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

std::pair<hsd::SlateBatch, hsd::SlateBatch> pair_batches(const std::vector<SlateSample>& samples,
                                                         const std::vector<PairRecord>& pairs,
                                                         std::span<const std::size_t> pick) {
  hsd::SlateBatch plus, minus;
  for (auto i : pick) {
    const auto& p = pairs.at(i);
    if (p.context_ref >= samples.size())
      throw DataError("pair context_ref " + std::to_string(p.context_ref) + " outside " +
                      std::to_string(samples.size()) + " samples");
    const auto ctx = hsd::context_of(samples[p.context_ref]);
    plus.contexts.push_back(ctx);
    plus.slates.push_back(p.y_plus);
    minus.contexts.push_back(ctx);
    minus.slates.push_back(p.y_minus);
  }
  return {std::move(plus), std::move(minus)};
}

void align(hsd::SlateModel& model, const std::vector<SlateSample>& samples, const std::vector<PairRecord>& pairs,
           const AlignConfig& cfg, const std::function<void(const AlignLogRow&)>& on_log) {
  if (pairs.empty()) throw ContractError("align: no preference pairs");
  if (cfg.alpha < 0.0) throw ConfigError("align: alpha must be non-negative");
  Rng rng(cfg.seed);
  AdamConfig acfg;
  acfg.lr = cfg.lr;
  acfg.weight_decay = cfg.weight_decay;
  Adam opt(model.params(), acfg);
  const std::size_t n = pairs.size(), b = std::min(cfg.batch_size, n);
  std::vector<std::size_t> pool(n);
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    for (std::size_t i = 0; i < b; ++i) std::swap(pool[i], pool[i + rng.index(n - i)]);
    const auto [plus, minus] = pair_batches(samples, pairs, std::span<const std::size_t>(pool.data(), b));
    opt.zero_grad();
    const std::size_t before = hsd::policy_forward_count();
    const OrpoTerms terms = orpo_loss(model, plus, minus, cfg.alpha);
    const std::size_t forwards = hsd::policy_forward_count() - before;
    terms.loss.backward();
    if (cfg.cosine_decay) opt.set_lr(cosine_lr(cfg.lr, step, cfg.steps));
    const double gnorm = opt.step();
    if (!std::isfinite(gnorm)) throw NumericError("align: non-finite gradient at step " + std::to_string(step));
    if (on_log && (step % cfg.log_every == 0 || step == cfg.steps)) {
      const double mm = std::accumulate(terms.margins.begin(), terms.margins.end(), 0.0) /
                        static_cast<double>(terms.margins.size());
      on_log({step, terms.loss.item(), terms.nll, terms.penalty, mm, gnorm, forwards});
    }
  }
}

double mean_margin(const hsd::SlateModel& model, const std::vector<SlateSample>& samples,
                   const std::vector<PairRecord>& pairs, std::size_t chunk) {
  if (pairs.empty()) throw ContractError("mean_margin: no pairs");
  NoGradScope ng;
  double total = 0.0;
  std::vector<std::size_t> idx(pairs.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < idx.size(); i += chunk) {
    const std::size_t len = std::min(chunk, idx.size() - i);
    const auto [plus, minus] = pair_batches(samples, pairs, std::span<const std::size_t>(idx.data() + i, len));
    const Tensor m = slate_log_odds(model, plus) - slate_log_odds(model, minus);
    for (double v : m.values()) total += v;
  }
  return total / static_cast<double>(pairs.size());
}

}  // namespace slategen::orpo
