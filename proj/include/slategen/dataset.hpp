// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "slategen/synthdata.hpp"

// Line-delimited JSON record formats shared by the pipeline stages. Readers
// raise DataError with the file and line number on malformed input.
namespace slategen {

/// Semantic ID: one code per quantization layer, coarse to fine.
using Sid = std::vector<std::uint32_t>;

/// {"item_id": 3, "embedding": [...]}
struct CorpusItem {
  std::uint32_t item_id = 0;
  std::vector<double> embedding;
};

/// {"item_id": 3, "codes": [c1, ..., cD]}
struct SidEntry {
  std::uint32_t item_id = 0;
  Sid codes;
};

/// Tokenized slate sample:
/// {"user_id", "user_features", "history": [[D ints]...], "slate": [[D ints]×M],
///  "item_ids", "feedback", "effective_view", "disliked": [[D ints]...], "split"}
struct SlateSample {
  std::uint32_t user_id = 0;
  std::vector<double> user_features;
  std::vector<Sid> history;
  std::vector<Sid> slate;
  std::vector<std::uint32_t> item_ids;
  std::vector<double> feedback;
  std::vector<std::uint8_t> effective;
  std::vector<Sid> disliked;
  bool test = false;
};

/// {"context_ref": n, "y_plus": [[D ints]×M], "y_minus": [[D ints]×M], "strategy": "permute"}
/// context_ref indexes the tokenized training samples.
struct PairRecord {
  std::size_t context_ref = 0;
  std::vector<Sid> y_plus;
  std::vector<Sid> y_minus;
  std::string strategy;

  bool operator==(const PairRecord&) const = default;
};

std::string corpus_line(const CorpusItem& item);
std::vector<CorpusItem> read_corpus(const std::string& path);

std::string sid_line(const SidEntry& e);
std::vector<SidEntry> read_sid_map(const std::string& path);

/// Raw logged sessions (item ids, before tokenization).
std::string session_line(const synth::Session& s);
std::vector<synth::Session> read_sessions(const std::string& path);

std::string sample_line(const SlateSample& s);
std::vector<SlateSample> read_samples(const std::string& path);

/// Maps every item id of the sessions to its SID. Throws DataError on an item
/// missing from the map.
std::vector<SlateSample> tokenize_sessions(const std::vector<synth::Session>& sessions,
                                           const std::vector<SidEntry>& sid_map);

std::string pair_line(const PairRecord& p);
std::vector<PairRecord> read_pairs(const std::string& path);

}  // namespace slategen
