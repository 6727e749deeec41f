// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "slategen/dataset.hpp"
#include "slategen/nn.hpp"

// Hierarchical slate decoder: a context encoder, a slate planner that emits one
// preference embedding per slot, and a shared item generator that expands each
// preference embedding into a semantic ID.
namespace slategen::hsd {

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t d_ffn = 256;
  std::size_t l_slate = 4;
  std::size_t l_item = 2;
  std::size_t l_ctx = 2;
  std::size_t n_heads = 4;
  std::size_t depth = 3;            // D
  std::size_t codebook_size = 256;  // K
  std::size_t slate_size = 5;       // M
  std::size_t beam = 5;             // B
  std::size_t d_user = 8;
  std::size_t max_history = 20;

  /// Throws ContractError when invariants fail.
  void validate() const;
};

struct UserContext {
  std::vector<double> features;
  std::vector<Sid> history;
};

UserContext context_of(const SlateSample& s);

/// Per-layer code embedding tables; an item is the sum of its codes' rows.
class CodeEmbedding {
 public:
  CodeEmbedding() = default;
  CodeEmbedding(std::size_t depth, std::size_t k, std::size_t d_model, Rng& rng);

  /// Embeddings of layer-d codes, [n×d_model].
  Tensor layer(std::size_t d, std::span<const std::uint32_t> codes) const;
  /// Σ_d table_d[sid_d] for each SID, [n×d_model].
  Tensor items(std::span<const Sid> sids) const;

  const Tensor& table(std::size_t d) const { return tables_[d]; }
  std::size_t depth() const { return tables_.size(); }
  void collect(const std::string& prefix, nn::ParamList& out) const;

 private:
  std::vector<Tensor> tables_;
  std::size_t k_ = 0;
};

/// Contexts of a batch stacked into one tensor; segment u spans rows
/// [offsets[u], offsets[u+1]).
struct EncodedContexts {
  Tensor rows;
  std::vector<std::uint32_t> offsets;
};

/// User token followed by history tokens, causal self-attention within each
/// user's segment.
class ContextEncoder {
 public:
  ContextEncoder() = default;
  ContextEncoder(const ModelConfig& cfg, Rng& rng);

  EncodedContexts encode(std::span<const UserContext> contexts, const CodeEmbedding& codes) const;
  void collect(const std::string& prefix, nn::ParamList& out) const;

 private:
  std::size_t d_user_ = 0;
  std::size_t max_history_ = 0;
  nn::Linear user_proj_;
  Tensor positions_;
  std::vector<nn::DecoderBlock> blocks_;
};

/// Checks a SID's length and code range; throws IndexError.
void check_sid(const Sid& sid, std::size_t depth, std::size_t k);

/// A list of (context, slate) pairs for teacher-forced evaluation.
struct SlateBatch {
  std::vector<UserContext> contexts;
  std::vector<std::vector<Sid>> slates;
};

SlateBatch batch_of(std::span<const SlateSample> samples);
SlateBatch batch_of(std::span<const SlateSample> samples, std::span<const std::size_t> pick);

/// Common surface of the hierarchical and the flat decoders.
class SlateModel {
 public:
  virtual ~SlateModel() = default;
  virtual const ModelConfig& config() const = 0;
  virtual nn::ParamList params() const = 0;
  /// Teacher-forced log-probability of every token, [batch × M·D] ordered by
  /// slot then layer.
  virtual Tensor token_log_probs(const SlateBatch& batch) const = 0;
};

/// Number of token_log_probs calls made so far, across all models.
std::size_t policy_forward_count();

/// Per-block cross-attention keys and values of one encoded context.
struct PreparedContext {
  Tensor context;
  std::vector<nn::ContextKV> planner;
  std::vector<nn::ContextKV> generator;
};

class HierarchicalDecoder final : public SlateModel {
 public:
  HierarchicalDecoder(const ModelConfig& cfg, Rng& rng);

  const ModelConfig& config() const override { return cfg_; }
  nn::ParamList params() const override;
  Tensor token_log_probs(const SlateBatch& batch) const override;

  const CodeEmbedding& codes() const { return codes_; }
  const Tensor& bos() const { return bos_; }

  /// C for one user, [(1+n)×d_model].
  Tensor encode_context(const UserContext& ctx) const;
  PreparedContext prepare(const UserContext& ctx) const;
  PreparedContext prepare_encoded(const Tensor& context) const;

  /// Planner over [BOS, i_1, …] rows; returns the normalized outputs Î.
  Tensor planner_forward(const Tensor& inputs, const Tensor& context) const;
  Tensor planner_forward(const Tensor& inputs, const PreparedContext& ctx) const;
  /// Generator over [î, s¹, …] for one slot; row d holds the logits of layer-(d+1) codes.
  Tensor generator_forward(const Tensor& pref, std::span<const std::uint32_t> prefix, const Tensor& context) const;
  Tensor generator_forward(const Tensor& pref, std::span<const std::uint32_t> prefix,
                           const PreparedContext& ctx) const;

  /// Incremental planner step for slot `position`; caches one entry per layer.
  Tensor planner_step(const Tensor& input, std::size_t position, const PreparedContext& ctx,
                      std::vector<nn::SelfKV>& cache) const;
  /// Incremental generator step for SID position `position`; returns [1×K] logits.
  Tensor generator_step(const Tensor& input, std::size_t position, const PreparedContext& ctx,
                        std::vector<nn::SelfKV>& cache) const;

  /// Parameter count of the item generator (blocks, norm, heads).
  std::size_t generator_parameters() const;

 private:
  Tensor generator_hidden(const Tensor& pref, std::span<const std::uint32_t> prefix, const PreparedContext& ctx) const;

  ModelConfig cfg_;
  CodeEmbedding codes_;
  ContextEncoder encoder_;
  Tensor bos_;
  Tensor planner_pos_;
  std::vector<nn::DecoderBlock> planner_;
  Tensor planner_norm_;
  Tensor generator_pos_;
  std::vector<nn::DecoderBlock> generator_;
  Tensor generator_norm_;
  std::vector<nn::Linear> heads_;
};

/// Single causal stream over all M·D tokens with l_slate + l_item layers.
class FlatDecoder final : public SlateModel {
 public:
  FlatDecoder(const ModelConfig& cfg, Rng& rng);

  const ModelConfig& config() const override { return cfg_; }
  nn::ParamList params() const override;
  Tensor token_log_probs(const SlateBatch& batch) const override;

  const CodeEmbedding& codes() const { return codes_; }
  std::size_t layers() const { return blocks_.size(); }

  PreparedContext prepare(const UserContext& ctx) const;
  /// Logits for every prefix position: row t predicts token t, [(1+len)×K].
  Tensor forward(std::span<const std::uint32_t> tokens, const PreparedContext& ctx) const;
  /// Incremental step for stream position `position`; returns [1×K] logits.
  Tensor step(std::span<const std::uint32_t> tokens, std::size_t position, const PreparedContext& ctx,
              std::vector<nn::SelfKV>& cache) const;

 private:
  Tensor input_rows(std::span<const std::uint32_t> tokens, std::size_t first, std::size_t count) const;

  ModelConfig cfg_;
  CodeEmbedding codes_;
  ContextEncoder encoder_;
  Tensor bos_;
  Tensor positions_;
  std::vector<nn::DecoderBlock> blocks_;
  Tensor norm_;
  std::vector<nn::Linear> heads_;
};

/// −Σ log π over all M·D tokens, averaged over the batch.
Tensor nll_from_log_probs(const Tensor& token_log_probs);
Tensor slate_nll(const SlateModel& model, const SlateBatch& batch);

struct TrainConfig {
  std::size_t steps = 2000;
  std::size_t batch_size = 64;
  double lr = 1e-4;
  double weight_decay = 1e-4;
  bool cosine_decay = true;
  std::size_t log_every = 50;
  std::uint64_t seed = 1;
};

struct TrainLogRow {
  std::size_t step = 0;
  double loss = 0.0;
  double grad_norm = 0.0;
};

/// Teacher-forced NLL training over the samples; on_log sees the minibatch loss
/// every log_every steps and after the last step.
void pretrain(SlateModel& model, const std::vector<SlateSample>& samples, const TrainConfig& cfg,
              const std::function<void(const TrainLogRow&)>& on_log = {});

/// Mean slate NLL over all samples, evaluated in chunks without gradients.
double evaluate_nll(const SlateModel& model, const std::vector<SlateSample>& samples, std::size_t chunk = 64);

}  // namespace slategen::hsd
