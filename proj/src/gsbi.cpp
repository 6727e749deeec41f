// SPDX-License-Identifier: Apache-2.0
#include "slategen/gsbi.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>

namespace slategen::gsbi {

namespace {

using Clock = std::chrono::steady_clock;

std::vector<double> log_softmax_row(const Tensor& logits) {
  const auto v = logits.values();
  double mx = -std::numeric_limits<double>::infinity();
  for (double x : v) mx = std::max(mx, x);
  double z = 0.0;
  for (double x : v) z += std::exp(x - mx);
  const double lz = mx + std::log(z);
  std::vector<double> out(v.size());
  for (std::size_t j = 0; j < v.size(); ++j) out[j] = v[j] - lz;
  return out;
}

std::size_t slate_length(const hsd::ModelConfig& cfg, const DecodeOptions& options) {
  const std::size_t m = options.slate_size == 0 ? cfg.slate_size : options.slate_size;
  if (m > cfg.slate_size)
    throw ContractError("slate length " + std::to_string(m) + " exceeds the model's " + std::to_string(cfg.slate_size));
  return m;
}

Tensor last_row(const Tensor& t) { return slice_rows(t, t.rows() - 1, 1); }

std::size_t cache_bytes(const std::vector<nn::SelfKV>& cache) {
  std::size_t b = 0;
  for (const auto& c : cache) b += c.bytes();
  return b;
}

struct Live {
  std::vector<std::uint32_t> codes;
  double log_prob = 0.0;
  std::vector<nn::SelfKV> cache;
};

struct Candidate {
  double log_prob;
  std::size_t parent;
  std::uint32_t code;
};

// Keeps the best `beam` expansions: higher log-prob first, then lexicographic
// code order.
std::vector<Candidate> select_top(std::vector<Candidate> cands, const std::vector<Live>& live, std::size_t beam) {
  auto better = [&](const Candidate& a, const Candidate& b) {
    if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
    const auto& pa = live[a.parent].codes;
    const auto& pb = live[b.parent].codes;
    if (pa != pb) return std::lexicographical_compare(pa.begin(), pa.end(), pb.begin(), pb.end());
    return a.code < b.code;
  };
  const std::size_t keep = std::min(beam, cands.size());
  std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(), better);
  cands.resize(keep);
  return cands;
}

std::vector<Live> advance(const std::vector<Live>& live, const std::vector<std::vector<double>>& scores,
                          std::size_t beam) {
  std::vector<Candidate> cands;
  for (std::size_t h = 0; h < live.size(); ++h)
    for (std::size_t j = 0; j < scores[h].size(); ++j)
      cands.push_back({live[h].log_prob + scores[h][j], h, static_cast<std::uint32_t>(j)});
  std::vector<Live> next;
  for (const auto& c : select_top(std::move(cands), live, beam)) {
    Live child = live[c.parent];
    child.codes.push_back(c.code);
    child.log_prob = c.log_prob;
    next.push_back(std::move(child));
  }
  return next;
}

bool contains_sid(const std::vector<Sid>& sids, const Sid& s) { return std::find(sids.begin(), sids.end(), s) != sids.end(); }

bool is_used(const std::vector<std::uint32_t>& used, std::uint32_t item) {
  return std::find(used.begin(), used.end(), item) != used.end();
}

struct Choice {
  Sid sid;
  std::optional<std::size_t> beam;  // unset for a prefix fallback
  std::optional<std::uint32_t> item;
};

Choice choose(const std::vector<Hypothesis>& beams, const std::vector<Sid>& chosen,
              const std::vector<std::uint32_t>& used, const SidIndex* index, bool prefix_fallback) {
  if (beams.empty()) throw GenerationError("no beam hypotheses");
  if (index == nullptr) {
    for (std::size_t b = 0; b < beams.size(); ++b)
      if (!contains_sid(chosen, beams[b].codes)) return {beams[b].codes, b, std::nullopt};
    return {beams[0].codes, 0, std::nullopt};
  }
  // First pass avoids repeating a SID, second accepts a collision partner.
  for (int pass = 0; pass < 2; ++pass)
    for (std::size_t b = 0; b < beams.size(); ++b) {
      if (pass == 0 && contains_sid(chosen, beams[b].codes)) continue;
      for (auto item : index->items(beams[b].codes))
        if (!is_used(used, item)) return {beams[b].codes, b, item};
    }
  if (prefix_fallback)
    if (auto item = index->nearest(beams[0].codes, used)) return {index->sid_of(*item), std::nullopt, *item};
  throw GenerationError("no beam hypothesis grounds to an unused indexed item");
}

double sid_log_prob(const hsd::HierarchicalDecoder& model, const hsd::PreparedContext& ctx, const Tensor& pref,
                    const Sid& sid) {
  const Tensor logits = model.generator_forward(pref, std::span<const std::uint32_t>(sid.data(), sid.size() - 1), ctx);
  double lp = 0.0;
  for (std::size_t d = 0; d < sid.size(); ++d) lp += log_softmax_row(slice_rows(logits, d, 1))[sid[d]];
  return lp;
}

}  // namespace

CostLedger& CostLedger::operator+=(const CostLedger& o) {
  planner_steps += o.planner_steps;
  generator_steps += o.generator_steps;
  hypothesis_rows += o.hypothesis_rows;
  query_rows += o.query_rows;
  attention_flops += o.attention_flops;
  peak_cache_bytes = std::max(peak_cache_bytes, o.peak_cache_bytes);
  wall_seconds += o.wall_seconds;
  return *this;
}

double row_attention_flops(std::size_t d_model, std::size_t context_rows, std::size_t self_keys, bool cross) {
  const double d = static_cast<double>(d_model);
  return 2.0 * d * static_cast<double>(self_keys) + (cross ? 2.0 * d * static_cast<double>(context_rows) : 0.0);
}

// ---------------------------------------------------------------------------

std::map<std::uint32_t, double> historical_feedback(const std::vector<SlateSample>& samples) {
  std::map<std::uint32_t, std::pair<double, std::size_t>> acc;
  for (const auto& s : samples) {
    if (s.test) continue;
    for (std::size_t i = 0; i < s.item_ids.size() && i < s.feedback.size(); ++i) {
      auto& [sum, n] = acc[s.item_ids[i]];
      sum += s.feedback[i];
      ++n;
    }
  }
  std::map<std::uint32_t, double> out;
  for (const auto& [id, sn] : acc) out[id] = sn.first / static_cast<double>(sn.second);
  return out;
}

SidIndex::SidIndex(const std::vector<SidEntry>& entries, const std::map<std::uint32_t, double>& feedback)
    : feedback_(feedback) {
  for (const auto& e : entries) {
    by_sid_[e.codes].push_back(e.item_id);
    sid_of_[e.item_id] = e.codes;
  }
  auto fb = [&](std::uint32_t id) {
    auto it = feedback_.find(id);
    return it == feedback_.end() ? 0.0 : it->second;
  };
  for (auto& [sid, items] : by_sid_)
    std::sort(items.begin(), items.end(), [&](std::uint32_t a, std::uint32_t b) {
      if (fb(a) != fb(b)) return fb(a) > fb(b);
      return a < b;
    });
}

const std::vector<std::uint32_t>& SidIndex::items(const Sid& sid) const {
  static const std::vector<std::uint32_t> none;
  auto it = by_sid_.find(sid);
  return it == by_sid_.end() ? none : it->second;
}

const Sid& SidIndex::sid_of(std::uint32_t item) const {
  auto it = sid_of_.find(item);
  if (it == sid_of_.end()) throw GenerationError("item " + std::to_string(item) + " is not indexed");
  return it->second;
}

std::optional<std::uint32_t> SidIndex::nearest(const Sid& sid, const std::vector<std::uint32_t>& used) const {
  std::optional<std::uint32_t> best;
  std::size_t best_prefix = 0;
  double best_fb = 0.0;
  for (const auto& [codes, items] : by_sid_) {
    std::size_t prefix = 0;
    while (prefix < codes.size() && prefix < sid.size() && codes[prefix] == sid[prefix]) ++prefix;
    for (auto item : items) {
      if (is_used(used, item)) continue;
      auto it = feedback_.find(item);
      const double fb = it == feedback_.end() ? 0.0 : it->second;
      if (!best || prefix > best_prefix || (prefix == best_prefix && (fb > best_fb || (fb == best_fb && item < *best)))) {
        best = item;
        best_prefix = prefix;
        best_fb = fb;
      }
    }
  }
  return best;
}

std::vector<std::uint32_t> ground_slate(const std::vector<std::vector<Hypothesis>>& beams, const SidIndex& index,
                                        bool prefix_fallback) {
  std::vector<Sid> chosen;
  std::vector<std::uint32_t> used;
  for (const auto& slot : beams) {
    const Choice c = choose(slot, chosen, used, &index, prefix_fallback);
    chosen.push_back(c.sid);
    used.push_back(*c.item);
  }
  return used;
}

// ---------------------------------------------------------------------------

std::vector<Hypothesis> beam_decode_item(const hsd::HierarchicalDecoder& model, const hsd::PreparedContext& ctx,
                                         const Tensor& pref, std::size_t beam, bool kv_cache, CostLedger* ledger) {
  if (beam < 1) throw ContractError("beam width must be at least 1");
  const auto& cfg = model.config();
  const std::size_t lctx = ctx.context.rows();
  std::vector<Live> live(1);
  for (std::size_t d = 0; d < cfg.depth; ++d) {
    std::vector<std::vector<double>> scores;
    for (auto& h : live) {
      Tensor logits;
      if (kv_cache) {
        const Tensor input =
            d == 0 ? pref : model.codes().layer(d - 1, std::span<const std::uint32_t>(&h.codes.back(), 1));
        logits = model.generator_step(input, d, ctx, h.cache);
      } else {
        logits = last_row(model.generator_forward(pref, h.codes, ctx));
      }
      scores.push_back(log_softmax_row(logits));
    }
    if (ledger) {
      ledger->generator_steps += 1;
      ledger->hypothesis_rows += live.size();
      const std::size_t rows = kv_cache ? 1 : d + 1;
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t keys = kv_cache ? d + 1 : r + 1;
        ledger->attention_flops += static_cast<double>(live.size() * cfg.l_item) *
                                   row_attention_flops(cfg.d_model, lctx, keys, true);
      }
      ledger->query_rows += live.size() * rows * cfg.l_item;
      std::size_t bytes = 0;
      for (const auto& h : live) bytes += cache_bytes(h.cache);
      ledger->peak_cache_bytes = std::max(ledger->peak_cache_bytes, bytes);
    }
    live = advance(live, scores, beam);
  }
  std::vector<Hypothesis> out;
  for (auto& h : live) out.push_back({std::move(h.codes), h.log_prob});
  return out;
}

GeneratedSlate gsbi_generate(const hsd::HierarchicalDecoder& model, const hsd::UserContext& ctx,
                             const DecodeOptions& options) {
  NoGradScope ng;
  const auto start = Clock::now();
  const auto& cfg = model.config();
  GeneratedSlate out;
  CostLedger& ledger = out.ledger;
  const std::size_t slots = slate_length(cfg, options);
  const hsd::PreparedContext prepared = model.prepare(ctx);
  const std::size_t lctx = prepared.context.rows();
  std::vector<nn::SelfKV> planner_cache;
  std::vector<Tensor> inputs{model.bos()};
  for (std::size_t m = 0; m < slots; ++m) {
    Tensor pref;
    if (options.kv_cache) {
      pref = model.planner_step(inputs.back(), m, prepared, planner_cache);
      ledger.attention_flops += static_cast<double>(cfg.l_slate) * row_attention_flops(cfg.d_model, lctx, m + 1, true);
      ledger.query_rows += cfg.l_slate;
    } else {
      pref = last_row(model.planner_forward(concat_rows(inputs), prepared));
      for (std::size_t r = 0; r <= m; ++r)
        ledger.attention_flops += static_cast<double>(cfg.l_slate) * row_attention_flops(cfg.d_model, lctx, r + 1, true);
      ledger.query_rows += cfg.l_slate * (m + 1);
    }
    ledger.planner_steps += 1;
    const std::size_t before = ledger.peak_cache_bytes;
    ledger.peak_cache_bytes = 0;
    const auto beams = beam_decode_item(model, prepared, pref, options.beam, options.kv_cache, &ledger);
    ledger.peak_cache_bytes = std::max(before, ledger.peak_cache_bytes + cache_bytes(planner_cache));

    const Choice c = choose(beams, out.sids, out.items, options.index, options.prefix_fallback);
    out.sids.push_back(c.sid);
    out.log_probs.push_back(c.beam ? beams[*c.beam].log_prob : sid_log_prob(model, prepared, pref, c.sid));
    if (c.item) out.items.push_back(*c.item);
    if (m + 1 < slots) inputs.push_back(model.codes().items(std::span<const Sid>(&c.sid, 1)));
  }
  ledger.wall_seconds = std::chrono::duration<double>(Clock::now() - start).count();
  return out;
}

std::vector<Sid> greedy_reference(const hsd::HierarchicalDecoder& model, const hsd::UserContext& ctx) {
  NoGradScope ng;
  const auto& cfg = model.config();
  const hsd::PreparedContext prepared = model.prepare(ctx);
  std::vector<Tensor> inputs{model.bos()};
  std::vector<Sid> out;
  for (std::size_t m = 0; m < cfg.slate_size; ++m) {
    const Tensor pref = last_row(model.planner_forward(concat_rows(inputs), prepared));
    Sid sid;
    for (std::size_t d = 0; d < cfg.depth; ++d) {
      const Tensor logits = model.generator_forward(pref, sid, prepared);
      const Tensor last = slice_rows(logits, d, 1);
      const auto row = last.values();
      sid.push_back(static_cast<std::uint32_t>(std::max_element(row.begin(), row.end()) - row.begin()));
    }
    out.push_back(sid);
    inputs.push_back(model.codes().items(std::span<const Sid>(&sid, 1)));
  }
  return out;
}

GeneratedSlate flat_generate(const hsd::FlatDecoder& model, const hsd::UserContext& ctx, const DecodeOptions& options) {
  if (options.beam < 1) throw ContractError("beam width must be at least 1");
  NoGradScope ng;
  const auto start = Clock::now();
  const auto& cfg = model.config();
  const std::size_t slots = slate_length(cfg, options);
  const std::size_t len = slots * cfg.depth, layers = model.layers();
  GeneratedSlate out;
  CostLedger& ledger = out.ledger;
  const hsd::PreparedContext prepared = model.prepare(ctx);
  const std::size_t lctx = prepared.context.rows();
  std::vector<Live> live(1);
  for (std::size_t p = 0; p < len; ++p) {
    std::vector<std::vector<double>> scores;
    for (auto& h : live) {
      const Tensor logits = options.kv_cache ? model.step(h.codes, p, prepared, h.cache)
                                             : last_row(model.forward(h.codes, prepared));
      scores.push_back(log_softmax_row(logits));
    }
    ledger.generator_steps += 1;
    ledger.hypothesis_rows += live.size();
    const std::size_t rows = options.kv_cache ? 1 : p + 1;
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t keys = options.kv_cache ? p + 1 : r + 1;
      ledger.attention_flops +=
          static_cast<double>(live.size() * layers) * row_attention_flops(cfg.d_model, lctx, keys, true);
    }
    ledger.query_rows += live.size() * rows * layers;
    std::size_t bytes = 0;
    for (const auto& h : live) bytes += cache_bytes(h.cache);
    ledger.peak_cache_bytes = std::max(ledger.peak_cache_bytes, bytes);
    live = advance(live, scores, options.beam);
  }

  auto split = [&](const Live& h) {
    std::vector<Sid> sids;
    for (std::size_t m = 0; m < slots; ++m)
      sids.emplace_back(h.codes.begin() + static_cast<std::ptrdiff_t>(m * cfg.depth),
                        h.codes.begin() + static_cast<std::ptrdiff_t>((m + 1) * cfg.depth));
    return sids;
  };
  // First full sequence whose SIDs are distinct (and ground, with an index).
  for (const auto& h : live) {
    const auto sids = split(h);
    std::vector<Sid> seen;
    std::vector<std::uint32_t> items;
    bool ok = true;
    for (const auto& s : sids) {
      if (contains_sid(seen, s)) {
        ok = false;
        break;
      }
      seen.push_back(s);
      if (options.index) {
        const auto& cands = options.index->items(s);
        if (cands.empty()) {
          ok = false;
          break;
        }
        items.push_back(cands.front());
      }
    }
    if (!ok) continue;
    out.sids = sids;
    out.items = items;
    out.log_probs.assign(slots, h.log_prob / static_cast<double>(slots));
    break;
  }
  if (out.sids.empty()) {
    const auto sids = split(live.front());
    if (options.index) {
      std::vector<std::vector<Hypothesis>> slots;
      for (const auto& s : sids) slots.push_back({{s, 0.0}});
      out.items = ground_slate(slots, *options.index, options.prefix_fallback);
      for (auto item : out.items) out.sids.push_back(options.index->sid_of(item));
    } else {
      out.sids = sids;
    }
    out.log_probs.assign(slots, live.front().log_prob / static_cast<double>(slots));
  }
  ledger.wall_seconds = std::chrono::duration<double>(Clock::now() - start).count();
  return out;
}

}  // namespace slategen::gsbi
