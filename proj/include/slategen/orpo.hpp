// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "slategen/hsd.hpp"

// Reference-free listwise alignment with the odds-ratio objective, plus the
// construction of (preferred, rejected) slate pairs from logged feedback.
namespace slategen::orpo {

inline constexpr double kOddsEps = 1e-7;

enum class Strategy { permute, replace, anchor_repeat };

std::string to_string(Strategy s);
/// Throws ConfigError on unknown names.
Strategy parse_strategy(const std::string& name);

struct NegativeMix {
  double permute = 0.4;
  double replace = 0.3;
  double anchor_repeat = 0.3;

  /// Throws ConfigError unless the weights are non-negative and sum to 1.
  void validate() const;
};

/// Token log-odds log(π/(1−π)) for every teacher-forced position, [B × M·D].
Tensor per_step_log_odds(const hsd::SlateModel& model, const hsd::SlateBatch& batch);
/// Log-odds of token t (1-based over the M·D stream) of one slate.
double per_step_log_odds(const hsd::SlateModel& model, const hsd::UserContext& ctx, const std::vector<Sid>& slate,
                         std::size_t t);
/// Σ_t of the token log-odds per slate, [B × 1].
Tensor slate_log_odds(const Tensor& token_log_probs);
Tensor slate_log_odds(const hsd::SlateModel& model, const hsd::SlateBatch& batch);

struct OrpoTerms {
  Tensor loss;
  double nll = 0.0;
  double penalty = 0.0;
  std::vector<double> margins;  // z⁺ − z⁻ per pair
};

/// Batch mean of −log π(y⁺) − α·log σ(z⁺ − z⁻); one policy forward per side.
OrpoTerms orpo_loss(const hsd::SlateModel& model, const hsd::SlateBatch& plus, const hsd::SlateBatch& minus,
                    double alpha);

/// The exposed slate reordered by feedback, highest first; ties keep exposure order.
std::vector<Sid> build_positive(const SlateSample& sample);

/// Cosine neighbours of SIDs under summed code embeddings, snapshotted at
/// construction.
class SimilarityIndex {
 public:
  SimilarityIndex(const hsd::CodeEmbedding& codes, std::vector<Sid> candidates);

  /// The n most similar candidates other than the anchor's own SID; ties go to
  /// the lexicographically smaller SID.
  std::vector<Sid> neighbors(const Sid& anchor, std::size_t n) const;

 private:
  std::vector<Sid> candidates_;
  std::vector<std::vector<double>> unit_;
};

struct NegativeResources {
  std::vector<Sid> disliked;  // the user's negative-feedback pool
  const SimilarityIndex* similarity = nullptr;
};

/// A rejected slate for y⁺, or nullopt when the strategy cannot produce one.
std::optional<std::vector<Sid>> build_negative(const std::vector<Sid>& y_plus, Strategy strategy,
                                               const NegativeResources& res, Rng& rng);

/// One pair per training sample: strategy drawn from the mix, falling back to
/// the other strategies in declaration order. Samples with no viable strategy
/// are skipped. context_ref indexes `samples`.
std::vector<PairRecord> build_pairs(const std::vector<SlateSample>& samples, const SimilarityIndex& similarity,
                                    const NegativeMix& mix, std::uint64_t seed);

struct AlignConfig {
  double alpha = 0.1;
  std::size_t steps = 500;
  std::size_t batch_size = 64;
  double lr = 1e-4;
  double weight_decay = 1e-4;
  bool cosine_decay = true;
  std::size_t log_every = 50;
  std::uint64_t seed = 1;
  NegativeMix mix;
};

struct AlignLogRow {
  std::size_t step = 0;
  double loss = 0.0;
  double nll = 0.0;
  double penalty = 0.0;
  double mean_margin = 0.0;
  double grad_norm = 0.0;
  std::size_t policy_forwards = 0;  // in this step
};

/// Pair batches of (context, y⁺) and (context, y⁻).
std::pair<hsd::SlateBatch, hsd::SlateBatch> pair_batches(const std::vector<SlateSample>& samples,
                                                         const std::vector<PairRecord>& pairs,
                                                         std::span<const std::size_t> pick);

/// Optimizes the combined objective over sampled pair minibatches. Throws
/// NumericError on a non-finite gradient.
void align(hsd::SlateModel& model, const std::vector<SlateSample>& samples, const std::vector<PairRecord>& pairs,
           const AlignConfig& cfg, const std::function<void(const AlignLogRow&)>& on_log = {});

/// Mean z⁺ − z⁻ over the pairs, without gradients.
double mean_margin(const hsd::SlateModel& model, const std::vector<SlateSample>& samples,
                   const std::vector<PairRecord>& pairs, std::size_t chunk = 64);

}  // namespace slategen::orpo
