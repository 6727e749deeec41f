// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <vector>

#include "slategen/hsd.hpp"

// Slate decoding: greedy chaining over slots, beam search inside each item's
// semantic ID, plus the flat token-stream baseline used for comparison.
namespace slategen::gsbi {

class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Hypothesis {
  Sid codes;
  double log_prob = 0.0;
};

/// Event counts of one decode. attention_flops counts, for every processed
/// query row in every layer, 2·d·(context rows) for cross-attention and
/// 2·d·(visible self keys) for self-attention.
struct CostLedger {
  std::size_t planner_steps = 0;
  std::size_t generator_steps = 0;  // token positions, independent of B
  std::size_t hypothesis_rows = 0;  // hypotheses advanced, summed over steps
  std::size_t query_rows = 0;       // rows pushed through decoder layers
  double attention_flops = 0.0;
  std::size_t peak_cache_bytes = 0;
  double wall_seconds = 0.0;

  CostLedger& operator+=(const CostLedger& o);
};

/// Full SID -> items, ranked by historical feedback (ties: lower item id).
class SidIndex {
 public:
  SidIndex() = default;
  SidIndex(const std::vector<SidEntry>& entries, const std::map<std::uint32_t, double>& feedback);

  /// Items sharing this SID, best first; empty when unindexed.
  const std::vector<std::uint32_t>& items(const Sid& sid) const;
  const Sid& sid_of(std::uint32_t item) const;
  bool contains(const Sid& sid) const { return by_sid_.count(sid) != 0; }
  std::size_t size() const { return by_sid_.size(); }
  const std::map<Sid, std::vector<std::uint32_t>>& entries() const { return by_sid_; }

  /// Unused item whose SID shares the longest prefix with sid (then feedback,
  /// then lower id). nullopt when every item is used.
  std::optional<std::uint32_t> nearest(const Sid& sid, const std::vector<std::uint32_t>& used) const;

 private:
  std::map<Sid, std::vector<std::uint32_t>> by_sid_;
  std::map<std::uint32_t, Sid> sid_of_;
  std::map<std::uint32_t, double> feedback_;
};

/// Mean logged feedback per item over training-split exposures.
std::map<std::uint32_t, double> historical_feedback(const std::vector<SlateSample>& samples);

struct DecodeOptions {
  std::size_t beam = 5;
  bool kv_cache = true;
  // When set, every slot must ground to an unused indexed item.
  const SidIndex* index = nullptr;
  bool prefix_fallback = false;
  // Slots to generate; 0 means the model's slate size.
  std::size_t slate_size = 0;
};

struct GeneratedSlate {
  std::vector<Sid> sids;
  std::vector<double> log_probs;
  std::vector<std::uint32_t> items;  // empty without an index
  CostLedger ledger;
};

/// Length-D beam search for one preference embedding; sorted by log-prob,
/// ties broken by lexicographic code order.
std::vector<Hypothesis> beam_decode_item(const hsd::HierarchicalDecoder& model, const hsd::PreparedContext& ctx,
                                         const Tensor& pref, std::size_t beam, bool kv_cache,
                                         CostLedger* ledger = nullptr);

/// Greedy over slots, beam within items. Each later slot conditions on the
/// SIDs actually chosen for earlier slots.
GeneratedSlate gsbi_generate(const hsd::HierarchicalDecoder& model, const hsd::UserContext& ctx,
                             const DecodeOptions& options);

/// Argmax chaining through uncached full forwards.
std::vector<Sid> greedy_reference(const hsd::HierarchicalDecoder& model, const hsd::UserContext& ctx);

/// Beam search over the whole M·D token stream of a flat decoder.
GeneratedSlate flat_generate(const hsd::FlatDecoder& model, const hsd::UserContext& ctx,
                             const DecodeOptions& options);

/// Picks, per slot, the first hypothesis that maps to an unused item; falls
/// back to the nearest indexed prefix when allowed.
std::vector<std::uint32_t> ground_slate(const std::vector<std::vector<Hypothesis>>& beams, const SidIndex& index,
                                        bool prefix_fallback);

/// Attention FLOPs of one query row per the ledger rule.
double row_attention_flops(std::size_t d_model, std::size_t context_rows, std::size_t self_keys, bool cross);

}  // namespace slategen::gsbi
