// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "slategen/dataset.hpp"
#include "slategen/nn.hpp"

// Residual-quantized auto-encoder that turns item embeddings into semantic IDs.
namespace slategen::crq {

struct CrqConfig {
  std::size_t depth = 3;
  std::size_t codebook_size = 256;
  std::size_t d_in = 128;
  std::size_t d_z = 64;
  double eta = 0.1;
  double lambda_global = 0.1;
  double lambda_contrast = 0.01;
  // Weight of the per-layer commitment term kept next to the three terms above.
  double lambda_layer = 1.0;
  double tau = 0.5;
  // One weight per layer; only the first depth-1 enter the contrastive loss.
  std::vector<double> layer_weights{1.0, 0.1, 0.01};
  double positive_threshold = 0.8;
  // Cap on mined positives per item, most similar first; 0 keeps all.
  std::size_t max_positives = 5;

  /// Throws ContractError when invariants fail.
  void validate() const;
};

struct QuantizationTrace {
  Sid codes;
  // residuals[0] = z, residuals[d] = residuals[d-1] - e^d_{c^d}.
  std::vector<std::vector<double>> residuals;
  std::vector<double> z_hat;
};

class CrqVae {
 public:
  CrqVae(const CrqConfig& cfg, Rng& rng);

  const CrqConfig& config() const { return cfg_; }

  /// [n×d_in] -> [n×d_z]
  Tensor encode(const Tensor& x) const;
  /// [n×d_z] -> [n×d_in]
  Tensor decode(const Tensor& z) const;

  /// Greedy nearest-codeword descent for one latent.
  QuantizationTrace residual_quantize(std::span<const double> z) const;
  /// Codes for every row of a latent batch; row-parallel.
  std::vector<Sid> quantize(const Tensor& z) const;
  /// Encode and quantize raw embeddings without recording gradients.
  std::vector<Sid> assign(const std::vector<std::vector<double>>& embeddings) const;

  /// Layer d's [K×d_z] codeword table.
  const Tensor& codebook(std::size_t d) const { return codebooks_[d]; }
  Tensor& codebook(std::size_t d) { return codebooks_[d]; }

  nn::ParamList params() const;

 private:
  CrqConfig cfg_;
  nn::Mlp encoder_;
  nn::Mlp decoder_;
  std::vector<Tensor> codebooks_;
};

/// Differentiable view of one quantized batch.
struct QuantizedBatch {
  Tensor z;
  // inputs[d] = r^{d}, the residual entering layer d+1 (inputs[0] = z).
  std::vector<Tensor> inputs;
  // codewords[d] = e^{d+1}_{c}, gathered per row.
  std::vector<Tensor> codewords;
  Tensor z_hat;
  std::vector<Sid> codes;
};

/// Codes are fixed from the current values; gradients flow through z and the
/// gathered codewords.
QuantizedBatch quantize_batch(const CrqVae& model, const Tensor& z);
/// Same, with externally fixed codes.
QuantizedBatch quantize_batch(const CrqVae& model, const Tensor& z, const std::vector<Sid>& codes);

/// Σ_d ‖r^{d-1} − sg(e)‖² + η‖e − sg(r^{d-1})‖², averaged over rows.
Tensor layer_quant_loss(const QuantizedBatch& q, double eta);
/// ‖ẑ − sg(z)‖² + η‖z − sg(ẑ)‖², averaged over rows.
Tensor global_quant_loss(const Tensor& z, const Tensor& z_hat, double eta);
/// ‖x̂ − x‖², averaged over rows.
Tensor recon_loss(const Tensor& x_hat, const Tensor& x);

/// For each item, the other items whose cosine similarity reaches threshold,
/// keeping the max_neighbors most similar (0 keeps all). Sorted ascending.
std::vector<std::vector<std::uint32_t>> mine_pairs(const std::vector<std::vector<double>>& embeddings,
                                                   double threshold, std::size_t max_neighbors = 0);

/// Anchor/positive rows inside a batch plus the negatives each anchor sees.
struct ContrastiveBatch {
  std::vector<std::uint32_t> anchors;
  std::vector<std::uint32_t> positives;
  // anchors.size() × batch rows; 1 marks the positive and every negative.
  std::vector<std::uint8_t> mask;
};

/// Every row except the anchor itself is a candidate; rows whose item is a
/// mined positive of the anchor (other than the designated positive) are not
/// used as negatives. row_items maps batch rows to corpus item ids.
ContrastiveBatch make_contrastive_batch(std::vector<std::uint32_t> anchors, std::vector<std::uint32_t> positives,
                                        std::span<const std::uint32_t> row_items,
                                        const std::vector<std::vector<std::uint32_t>>& neighbors);

/// Temperature-scaled InfoNCE over the matched codewords of layers 1..D-1.
Tensor prefix_contrastive_loss(const QuantizedBatch& q, const ContrastiveBatch& batch, const CrqConfig& cfg);

struct LossParts {
  Tensor total;
  Tensor recon;
  Tensor global;
  Tensor layer;
  Tensor contrast;  // undefined when the batch has no anchors
};

/// L = recon + λ1·global + λ2·contrast + λ_layer·layer.
LossParts crqvae_loss(const CrqVae& model, const Tensor& x, const ContrastiveBatch& batch);
/// Same loss with the quantizer assignment held fixed.
LossParts crqvae_loss(const CrqVae& model, const Tensor& x, const ContrastiveBatch& batch,
                      const std::vector<Sid>& codes);

struct CrqTrainConfig {
  std::size_t steps = 1500;
  std::size_t batch_size = 64;
  double lr = 1e-3;
  double weight_decay = 0.0;
  bool cosine_decay = true;
  // Codewords unused for this many steps are reseeded.
  std::size_t dead_after = 200;
  std::size_t kmeans_iters = 20;
  std::size_t log_every = 50;
  std::uint64_t seed = 1;
};

struct CrqLogRow {
  std::size_t step = 0;
  double total = 0, recon = 0, global = 0, layer = 0, contrast = 0;
};

/// Loss parts over the whole corpus; each item with neighbors anchors on its
/// first neighbor.
CrqLogRow evaluate_crqvae(const CrqVae& model, const std::vector<std::vector<double>>& embeddings,
                          const std::vector<std::vector<std::uint32_t>>& neighbors);

/// Trains a fresh model. on_log receives a full-corpus evaluation every
/// log_every steps and after the last step.
CrqVae train_crqvae(const std::vector<std::vector<double>>& embeddings, const CrqConfig& cfg,
                    const CrqTrainConfig& tcfg, const std::function<void(const CrqLogRow&)>& on_log = {});

struct CodebookMetrics {
  double collision = 0.0;
  double concentration = 0.0;
  double consistency = 0.0;
  std::size_t pairs = 0;
};

/// collision: share of items whose full SID is shared with another item.
/// concentration: per layer, the number of codewords (most used first) needed
/// to cover 90% of items, divided by K; averaged over layers.
/// consistency: share of mined positive pairs (unordered) with the same first code.
CodebookMetrics codebook_metrics(const std::vector<Sid>& sids, const std::vector<std::vector<double>>& embeddings,
                                 std::size_t codebook_size, double threshold, std::size_t max_neighbors = 0);

/// Shannon entropy (nats) of the code distribution at one layer.
double layer_entropy(const std::vector<Sid>& sids, std::size_t layer, std::size_t codebook_size);

/// k-means clusters of points [n×dim]; returns K×dim centroids.
std::vector<double> kmeans(std::span<const double> points, std::size_t n, std::size_t dim, std::size_t k,
                           std::size_t iters, Rng& rng);

}  // namespace slategen::crq
