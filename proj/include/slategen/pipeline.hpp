// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "slategen/config.hpp"
#include "slategen/crqvae.hpp"
#include "slategen/hsd.hpp"
#include "slategen/orpo.hpp"
#include "slategen/synthdata.hpp"

// Pipeline stages over a run directory:
//
//   <run>/config.resolved
//   <run>/data/        corpus, sessions, sid_map, samples, pairs (jsonl)
//   <run>/checkpoints/ crq, hsd_pretrain, flat_pretrain, hsd_aligned (.ckpt)
//   <run>/metrics/     one csv per stage
//
// A stage whose outputs all exist is skipped unless forced; a run directory
// created under a different configuration is refused.
namespace slategen::pipeline {

struct EvalSection {
  std::vector<std::size_t> ks{1, 5};
  bool kv_cache = true;
  bool prefix_fallback = true;
};

struct BenchSection {
  std::vector<std::size_t> slate_sizes{2, 5};
  std::vector<std::size_t> beams{1, 5};
  bool compare_kv = true;
  std::size_t max_users = 0;  // 0 = every evaluation user
};

struct RunConfig {
  std::size_t seed = 1;
  synth::WorldConfig world;
  crq::CrqConfig crq;
  crq::CrqTrainConfig crq_train;
  hsd::ModelConfig model;
  hsd::TrainConfig pretrain;
  bool train_flat = true;
  orpo::AlignConfig align;
  std::size_t align_holdout_every = 10;  // every n-th pair is held out
  EvalSection eval;
  BenchSection bench;

  /// Binds every user-settable key. Derived fields (model depth, vocabulary,
  /// slate size, user width; crq input width) are filled by finalize().
  void bind(ConfigSchema& schema);
  /// Copies derived fields and seeds, then validates. Throws ConfigError.
  void finalize();
  /// model section, as stored in hsd checkpoints for compatibility checks.
  std::string model_signature() const;
};

struct RunOptions {
  std::string run_dir;
  std::size_t workers = 1;
  bool force = false;
  // infer / eval
  std::string checkpoint;  // checkpoint stem under checkpoints/, empty = default
  std::string mode = "gsbi";
  std::size_t slate_size = 0;
  std::size_t beam = 0;
  bool kv_cache = true;
  std::ostream* out = nullptr;  // infer output; stdout when null
  std::ostream* log = nullptr;  // progress lines; stderr when null
};

/// Parses the config file (may be empty) then `key=value` overrides, applies
/// the seed override when non-zero, and finalizes.
RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides, std::uint64_t seed);
std::string resolved_text(RunConfig cfg);

/// Creates the layout and writes config.resolved, or checks it against an
/// existing one. Throws ConfigError on mismatch unless forced.
void open_run_dir(const RunConfig& cfg, const RunOptions& opt);

void gen_data(const RunConfig& cfg, const RunOptions& opt);
void train_crq(const RunConfig& cfg, const RunOptions& opt);
void tokenize(const RunConfig& cfg, const RunOptions& opt);
void pretrain(const RunConfig& cfg, const RunOptions& opt);
void align(const RunConfig& cfg, const RunOptions& opt);
void infer(const RunConfig& cfg, const RunOptions& opt);
void evaluate(const RunConfig& cfg, const RunOptions& opt);
void bench(const RunConfig& cfg, const RunOptions& opt);

/// Every artifact stage in order, gen-data through eval.
void run_all(const RunConfig& cfg, const RunOptions& opt);

/// Path helpers.
std::string data_path(const RunOptions& opt, const std::string& name);
std::string checkpoint_path(const RunOptions& opt, const std::string& stem);
std::string metrics_path(const RunOptions& opt, const std::string& name);

/// Builds models from the config and restores checkpoints.
crq::CrqVae load_crq(const RunConfig& cfg, const RunOptions& opt);
hsd::HierarchicalDecoder load_hierarchical(const RunConfig& cfg, const RunOptions& opt, const std::string& stem);
hsd::FlatDecoder load_flat(const RunConfig& cfg, const RunOptions& opt, const std::string& stem);

}  // namespace slategen::pipeline
