// SPDX-License-Identifier: Apache-2.0
#include "slategen/pipeline.hpp"

#include <omp.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <json.hpp>
#include <sstream>

#include "slategen/evalbench.hpp"
#include "slategen/gsbi.hpp"
#include "slategen/io.hpp"

namespace fs = std::filesystem;

namespace slategen::pipeline {

namespace {

std::ostream& log_of(const RunOptions& opt) { return opt.log ? *opt.log : std::cerr; }

void note(const RunOptions& opt, const std::string& stage, const std::string& msg) {
  log_of(opt) << "[" << stage << "] " << msg << '\n';
}

/// True when the stage can be skipped.
bool up_to_date(const RunOptions& opt, const std::string& stage, const std::vector<std::string>& outputs) {
  if (opt.force) return false;
  std::size_t present = 0;
  for (const auto& p : outputs) present += file_exists(p);
  if (present == outputs.size()) {
    note(opt, stage, "outputs present, skipping (use --force to recompute)");
    return true;
  }
  if (present > 0) note(opt, stage, "partial outputs found, recomputing the stage");
  return false;
}

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

void check_finite(double v, const std::string& what) {
  if (!std::isfinite(v)) throw NumericError(what + " is not finite");
}

template <class T>
std::string lines_of(const std::vector<T>& v, std::string (*fmt)(const T&)) {
  std::string out;
  for (const auto& x : v) out += fmt(x) + '\n';
  return out;
}

std::vector<std::vector<double>> embeddings_of(const std::vector<CorpusItem>& corpus) {
  std::vector<std::vector<double>> out;
  for (const auto& c : corpus) out.push_back(c.embedding);
  return out;
}

Checkpoint load_kind(const RunOptions& opt, const std::string& stem, const std::string& kind,
                     const std::string& signature) {
  const std::string path = checkpoint_path(opt, stem);
  if (!file_exists(path)) throw DataError("missing checkpoint '" + path + "'");
  Checkpoint ckpt = load_checkpoint(path);
  if (ckpt.kind != kind) throw DataError("checkpoint '" + path + "' holds a " + ckpt.kind + ", expected " + kind);
  if (ckpt.config != signature)
    throw ConfigError("checkpoint '" + path + "' was trained under a different " + kind + " configuration");
  return ckpt;
}

std::string crq_signature(const crq::CrqConfig& c) {
  std::ostringstream s;
  s << "depth=" << c.depth << " K=" << c.codebook_size << " d_in=" << c.d_in << " d_z=" << c.d_z;
  return s.str();
}

std::vector<SlateSample> split(const std::vector<SlateSample>& samples, bool test) {
  std::vector<SlateSample> out;
  for (const auto& s : samples)
    if (s.test == test) out.push_back(s);
  return out;
}

std::uint64_t stream_seed(const RunConfig& cfg, std::uint64_t stream) { return cfg.seed * 1000003ULL + stream; }

}  // namespace

// ---------------------------------------------------------------------------

void RunConfig::bind(ConfigSchema& s) {
  s.bind("run.seed", seed);

  s.bind("world.n_topics", world.n_topics);
  s.bind("world.n_items", world.n_items);
  s.bind("world.n_users", world.n_users);
  s.bind("world.d_in", world.d_in);
  s.bind("world.topic_concentration", world.topic_concentration);
  s.bind("world.max_user_topics", world.max_user_topics);
  s.bind("world.sessions_per_user", world.sessions_per_user);
  s.bind("world.test_sessions", world.test_sessions);
  s.bind("world.slate_size", world.slate_size);
  s.bind("world.max_history", world.max_history);
  s.bind("world.embedding_noise", world.embedding_noise);
  s.bind("world.view_noise", world.view_noise);
  s.bind("world.explore", world.explore);
  s.bind("world.feature_noise", world.feature_noise);
  s.bind("world.dislike_threshold", world.dislike_threshold);

  s.bind("crq.depth", crq.depth);
  s.bind("crq.codebook_size", crq.codebook_size);
  s.bind("crq.d_z", crq.d_z);
  s.bind("crq.eta", crq.eta);
  s.bind("crq.lambda_global", crq.lambda_global);
  s.bind("crq.lambda_contrast", crq.lambda_contrast);
  s.bind("crq.lambda_layer", crq.lambda_layer);
  s.bind("crq.tau", crq.tau);
  s.bind("crq.layer_weights", crq.layer_weights);
  s.bind("crq.positive_threshold", crq.positive_threshold);
  s.bind("crq.max_positives", crq.max_positives);
  s.bind("crq.steps", crq_train.steps);
  s.bind("crq.batch_size", crq_train.batch_size);
  s.bind("crq.lr", crq_train.lr);
  s.bind("crq.weight_decay", crq_train.weight_decay);
  s.bind("crq.cosine_decay", crq_train.cosine_decay);
  s.bind("crq.dead_after", crq_train.dead_after);
  s.bind("crq.kmeans_iters", crq_train.kmeans_iters);
  s.bind("crq.log_every", crq_train.log_every);

  s.bind("model.d_model", model.d_model);
  s.bind("model.d_ffn", model.d_ffn);
  s.bind("model.l_slate", model.l_slate);
  s.bind("model.l_item", model.l_item);
  s.bind("model.l_ctx", model.l_ctx);
  s.bind("model.n_heads", model.n_heads);
  s.bind("model.beam", model.beam);

  s.bind("pretrain.steps", pretrain.steps);
  s.bind("pretrain.batch_size", pretrain.batch_size);
  s.bind("pretrain.lr", pretrain.lr);
  s.bind("pretrain.weight_decay", pretrain.weight_decay);
  s.bind("pretrain.cosine_decay", pretrain.cosine_decay);
  s.bind("pretrain.log_every", pretrain.log_every);
  s.bind("pretrain.train_flat", train_flat);

  s.bind("align.alpha", align.alpha);
  s.bind("align.steps", align.steps);
  s.bind("align.batch_size", align.batch_size);
  s.bind("align.lr", align.lr);
  s.bind("align.weight_decay", align.weight_decay);
  s.bind("align.cosine_decay", align.cosine_decay);
  s.bind("align.log_every", align.log_every);
  s.bind("align.mix_permute", align.mix.permute);
  s.bind("align.mix_replace", align.mix.replace);
  s.bind("align.mix_anchor_repeat", align.mix.anchor_repeat);
  s.bind("align.holdout_every", align_holdout_every);

  s.bind("eval.ks", eval.ks);
  s.bind("eval.kv_cache", eval.kv_cache);
  s.bind("eval.prefix_fallback", eval.prefix_fallback);

  s.bind("bench.slate_sizes", bench.slate_sizes);
  s.bind("bench.beams", bench.beams);
  s.bind("bench.compare_kv", bench.compare_kv);
  s.bind("bench.max_users", bench.max_users);
}

void RunConfig::finalize() {
  world.seed = stream_seed(*this, 0);
  crq.d_in = world.d_in;
  crq_train.seed = stream_seed(*this, 1);
  model.depth = crq.depth;
  model.codebook_size = crq.codebook_size;
  model.slate_size = world.slate_size;
  model.d_user = world.n_topics;
  model.max_history = world.max_history;
  pretrain.seed = stream_seed(*this, 3);
  align.seed = stream_seed(*this, 5);
  try {
    crq.validate();
    model.validate();
  } catch (const ContractError& e) {
    throw ConfigError(e.what());
  }
  align.mix.validate();
  if (align.alpha < 0.0) throw ConfigError("align.alpha must be non-negative");
  if (align_holdout_every < 2) throw ConfigError("align.holdout_every must be at least 2");
  if (crq_train.steps == 0 || pretrain.steps == 0) throw ConfigError("training steps must be positive");
  if (crq_train.log_every == 0 || pretrain.log_every == 0 || align.log_every == 0)
    throw ConfigError("log_every must be positive");
  if (world.test_sessions >= world.sessions_per_user)
    throw ConfigError("world.test_sessions must be below world.sessions_per_user");
  for (auto k : eval.ks)
    if (k == 0 || k > world.slate_size) throw ConfigError("eval.ks entries must lie in [1, world.slate_size]");
  for (auto m : bench.slate_sizes)
    if (m == 0 || m > world.slate_size) throw ConfigError("bench.slate_sizes entries must lie in [1, world.slate_size]");
  for (auto b : bench.beams)
    if (b == 0) throw ConfigError("bench.beams entries must be positive");
}

std::string RunConfig::model_signature() const {
  const auto& m = model;
  std::ostringstream s;
  s << "d_model=" << m.d_model << " d_ffn=" << m.d_ffn << " l_slate=" << m.l_slate << " l_item=" << m.l_item
    << " l_ctx=" << m.l_ctx << " n_heads=" << m.n_heads << " depth=" << m.depth << " K=" << m.codebook_size
    << " M=" << m.slate_size << " d_user=" << m.d_user << " max_history=" << m.max_history;
  return s.str();
}

RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides, std::uint64_t seed) {
  RunConfig cfg;
  ConfigSchema schema;
  cfg.bind(schema);
  if (!path.empty()) {
    if (!file_exists(path)) throw ConfigError("config file '" + path + "' not found");
    schema.load_file(path);
  }
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + o + "' is not key=value");
    const std::string key = o.substr(0, eq);
    if (!schema.has(key)) throw ConfigError("unknown config key '" + key + "'");
    schema.set(key, o.substr(eq + 1));
  }
  if (seed != 0) cfg.seed = seed;
  cfg.finalize();
  return cfg;
}

std::string resolved_text(RunConfig cfg) {
  ConfigSchema schema;
  cfg.bind(schema);
  return schema.resolved();
}

std::string data_path(const RunOptions& opt, const std::string& name) { return opt.run_dir + "/data/" + name; }
std::string checkpoint_path(const RunOptions& opt, const std::string& stem) {
  return opt.run_dir + "/checkpoints/" + stem + ".ckpt";
}
std::string metrics_path(const RunOptions& opt, const std::string& name) { return opt.run_dir + "/metrics/" + name; }

void open_run_dir(const RunConfig& cfg, const RunOptions& opt) {
  if (opt.run_dir.empty()) throw ConfigError("--run-dir is required");
  const std::string text = resolved_text(cfg);
  const std::string path = opt.run_dir + "/config.resolved";
  if (file_exists(path) && read_file(path) != text) {
    if (!opt.force)
      throw ConfigError("run directory '" + opt.run_dir +
                        "' was created with a different configuration; use a fresh --run-dir or --force");
    note(opt, "run", "configuration changed, --force given: every stage recomputes");
  }
  std::error_code ec;
  for (const char* sub : {"data", "checkpoints", "metrics"}) {
    fs::create_directories(opt.run_dir + "/" + sub, ec);
    if (ec) throw DataError("cannot create '" + opt.run_dir + "/" + sub + "': " + ec.message());
  }
  write_file_atomic(path, text);
}

// ---------------------------------------------------------------------------

crq::CrqVae load_crq(const RunConfig& cfg, const RunOptions& opt) {
  const Checkpoint ckpt = load_kind(opt, "crq", "crqvae", crq_signature(cfg.crq));
  Rng rng(0);
  crq::CrqVae model(cfg.crq, rng);
  restore_params(ckpt, model.params());
  return model;
}

hsd::HierarchicalDecoder load_hierarchical(const RunConfig& cfg, const RunOptions& opt, const std::string& stem) {
  const Checkpoint ckpt = load_kind(opt, stem, "hierarchical", cfg.model_signature());
  Rng rng(0);
  hsd::HierarchicalDecoder model(cfg.model, rng);
  restore_params(ckpt, model.params());
  return model;
}

hsd::FlatDecoder load_flat(const RunConfig& cfg, const RunOptions& opt, const std::string& stem) {
  const Checkpoint ckpt = load_kind(opt, stem, "flat", cfg.model_signature());
  Rng rng(0);
  hsd::FlatDecoder model(cfg.model, rng);
  restore_params(ckpt, model.params());
  return model;
}

// ---------------------------------------------------------------------------

void gen_data(const RunConfig& cfg, const RunOptions& opt) {
  const std::vector<std::string> outputs{data_path(opt, "corpus.jsonl"), data_path(opt, "sessions.jsonl"),
                                         metrics_path(opt, "world.csv")};
  if (up_to_date(opt, "gen-data", outputs)) return;
  synth::World world;
  try {
    world = synth::generate_world(cfg.world);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("world: ") + e.what());
  }
  const auto sessions = synth::simulate_sessions(world);
  std::string corpus;
  for (const auto& item : world.items) corpus += corpus_line({item.id, item.embedding}) + '\n';
  std::string ses;
  std::size_t test = 0;
  for (const auto& s : sessions) {
    ses += session_line(s) + '\n';
    test += s.test;
  }
  write_file_atomic(outputs[0], corpus);
  write_file_atomic(outputs[1], ses);
  write_file_atomic(outputs[2], "items,users,sessions,test_sessions,topic_silhouette\n" +
                                    std::to_string(world.items.size()) + ',' + std::to_string(world.users.size()) +
                                    ',' + std::to_string(sessions.size()) + ',' + std::to_string(test) + ',' +
                                    num(synth::topic_silhouette(world)) + '\n');
  note(opt, "gen-data", std::to_string(world.items.size()) + " items, " + std::to_string(sessions.size()) + " sessions");
}

void train_crq(const RunConfig& cfg, const RunOptions& opt) {
  const std::vector<std::string> outputs{checkpoint_path(opt, "crq"), metrics_path(opt, "crq_train.csv")};
  if (up_to_date(opt, "train-crq", outputs)) return;
  const auto corpus = read_corpus(data_path(opt, "corpus.jsonl"));
  if (corpus.empty()) throw DataError("empty corpus");
  for (const auto& c : corpus)
    if (c.embedding.size() != cfg.crq.d_in)
      throw DataError("corpus embedding width " + std::to_string(c.embedding.size()) + " does not match crq d_in " +
                      std::to_string(cfg.crq.d_in));
  std::string csv = "step,total,recon,global,layer,contrast\n";
  const auto model = crq::train_crqvae(embeddings_of(corpus), cfg.crq, cfg.crq_train, [&](const crq::CrqLogRow& r) {
    check_finite(r.total, "crq loss at step " + std::to_string(r.step));
    csv += std::to_string(r.step) + ',' + num(r.total) + ',' + num(r.recon) + ',' + num(r.global) + ',' +
           num(r.layer) + ',' + num(r.contrast) + '\n';
  });
  save_checkpoint(outputs[0], make_checkpoint("crqvae", crq_signature(cfg.crq), model.params()));
  write_file_atomic(outputs[1], csv);
  note(opt, "train-crq", "trained " + std::to_string(cfg.crq_train.steps) + " steps");
}

void tokenize(const RunConfig& cfg, const RunOptions& opt) {
  const std::vector<std::string> outputs{data_path(opt, "sid_map.jsonl"), data_path(opt, "samples.jsonl"),
                                         metrics_path(opt, "codebook.csv")};
  if (up_to_date(opt, "tokenize", outputs)) return;
  const auto model = load_crq(cfg, opt);
  const auto corpus = read_corpus(data_path(opt, "corpus.jsonl"));
  const auto sessions = read_sessions(data_path(opt, "sessions.jsonl"));
  const auto emb = embeddings_of(corpus);
  const auto sids = model.assign(emb);
  std::vector<SidEntry> map;
  for (std::size_t i = 0; i < corpus.size(); ++i) map.push_back({corpus[i].item_id, sids[i]});
  const auto samples = tokenize_sessions(sessions, map);
  const auto m = crq::codebook_metrics(sids, emb, cfg.crq.codebook_size, cfg.crq.positive_threshold, cfg.crq.max_positives);
  std::string csv = "metric,value\n";
  csv += "collision," + num(m.collision) + '\n';
  csv += "concentration," + num(m.concentration) + '\n';
  csv += "consistency," + num(m.consistency) + '\n';
  csv += "positive_pairs," + std::to_string(m.pairs) + '\n';
  for (std::size_t d = 0; d < cfg.crq.depth; ++d)
    csv += "entropy_layer" + std::to_string(d + 1) + ',' + num(crq::layer_entropy(sids, d, cfg.crq.codebook_size)) + '\n';
  write_file_atomic(outputs[0], lines_of(map, &sid_line));
  write_file_atomic(outputs[1], lines_of(samples, &sample_line));
  write_file_atomic(outputs[2], csv);
  note(opt, "tokenize", std::to_string(samples.size()) + " samples, collision " + num(m.collision));
}

void pretrain(const RunConfig& cfg, const RunOptions& opt) {
  std::vector<std::string> outputs{checkpoint_path(opt, "hsd_pretrain"), metrics_path(opt, "pretrain.csv"),
                                   metrics_path(opt, "pretrain_summary.csv")};
  if (cfg.train_flat) {
    outputs.push_back(checkpoint_path(opt, "flat_pretrain"));
    outputs.push_back(metrics_path(opt, "pretrain_flat.csv"));
  }
  if (up_to_date(opt, "pretrain", outputs)) return;
  const auto samples = read_samples(data_path(opt, "samples.jsonl"));
  const auto train = split(samples, false), test = split(samples, true);
  if (train.empty()) throw DataError("no training samples");
  std::string summary = "model,parameters,train_nll,test_nll\n";

  auto fit = [&](hsd::SlateModel& model, const std::string& name, const std::string& csv_path) {
    std::string csv = "step,loss,grad_norm\n";
    hsd::pretrain(model, train, cfg.pretrain, [&](const hsd::TrainLogRow& r) {
      check_finite(r.loss, name + " loss at step " + std::to_string(r.step));
      csv += std::to_string(r.step) + ',' + num(r.loss) + ',' + num(r.grad_norm) + '\n';
    });
    const double train_nll = hsd::evaluate_nll(model, train);
    const double test_nll = test.empty() ? std::nan("") : hsd::evaluate_nll(model, test);
    check_finite(train_nll, name + " training NLL");
    summary += name + ',' + std::to_string(nn::count_parameters(model.params())) + ',' + num(train_nll) + ',' +
               num(test_nll) + '\n';
    write_file_atomic(csv_path, csv);
    note(opt, "pretrain", name + " train NLL " + num(train_nll));
  };

  Rng rng(stream_seed(cfg, 2));
  hsd::HierarchicalDecoder hier(cfg.model, rng);
  fit(hier, "hierarchical", outputs[1]);
  save_checkpoint(outputs[0], make_checkpoint("hierarchical", cfg.model_signature(), hier.params()));
  if (cfg.train_flat) {
    Rng frng(stream_seed(cfg, 4));
    hsd::FlatDecoder flat(cfg.model, frng);
    fit(flat, "flat", outputs[4]);
    save_checkpoint(outputs[3], make_checkpoint("flat", cfg.model_signature(), flat.params()));
  }
  write_file_atomic(outputs[2], summary);
}

void align(const RunConfig& cfg, const RunOptions& opt) {
  const std::vector<std::string> outputs{data_path(opt, "pairs.jsonl"), checkpoint_path(opt, "hsd_aligned"),
                                         metrics_path(opt, "align.csv"), metrics_path(opt, "align_summary.csv")};
  if (up_to_date(opt, "align", outputs)) return;
  auto model = load_hierarchical(cfg, opt, "hsd_pretrain");
  const auto samples = read_samples(data_path(opt, "samples.jsonl"));
  const auto sid_map = read_sid_map(data_path(opt, "sid_map.jsonl"));
  std::vector<Sid> candidates;
  for (const auto& e : sid_map) candidates.push_back(e.codes);
  const orpo::SimilarityIndex similarity(model.codes(), candidates);
  const auto pairs = orpo::build_pairs(samples, similarity, cfg.align.mix, stream_seed(cfg, 6));
  std::vector<PairRecord> train, held;
  for (std::size_t i = 0; i < pairs.size(); ++i) (i % cfg.align_holdout_every == 0 ? held : train).push_back(pairs[i]);
  if (train.empty() || held.empty()) throw DataError("too few preference pairs to align (" + std::to_string(pairs.size()) + ")");
  const auto test = split(samples, true);

  const double margin_before = orpo::mean_margin(model, samples, held);
  const double train_before = orpo::mean_margin(model, samples, train);
  const double nll_before = test.empty() ? std::nan("") : hsd::evaluate_nll(model, test);
  std::string csv = "step,loss,nll,penalty,mean_margin,grad_norm,policy_forwards\n";
  orpo::align(model, samples, train, cfg.align, [&](const orpo::AlignLogRow& r) {
    check_finite(r.loss, "alignment loss at step " + std::to_string(r.step));
    csv += std::to_string(r.step) + ',' + num(r.loss) + ',' + num(r.nll) + ',' + num(r.penalty) + ',' +
           num(r.mean_margin) + ',' + num(r.grad_norm) + ',' + std::to_string(r.policy_forwards) + '\n';
  });
  const double margin_after = orpo::mean_margin(model, samples, held);
  const double train_after = orpo::mean_margin(model, samples, train);
  const double nll_after = test.empty() ? std::nan("") : hsd::evaluate_nll(model, test);
  check_finite(margin_after, "held-out margin");

  std::map<std::string, std::size_t> kinds;
  for (const auto& p : pairs) ++kinds[p.strategy];
  std::string summary = "metric,before,after\n";
  summary += "heldout_margin," + num(margin_before) + ',' + num(margin_after) + '\n';
  summary += "train_margin," + num(train_before) + ',' + num(train_after) + '\n';
  summary += "test_nll," + num(nll_before) + ',' + num(nll_after) + '\n';
  for (const auto& [k, n] : kinds) summary += "pairs_" + k + ',' + std::to_string(n) + ',' + std::to_string(n) + '\n';

  write_file_atomic(outputs[0], lines_of(pairs, &pair_line));
  save_checkpoint(outputs[1], make_checkpoint("hierarchical", cfg.model_signature(), model.params()));
  write_file_atomic(outputs[2], csv);
  write_file_atomic(outputs[3], summary);
  note(opt, "align", "held-out margin " + num(margin_before) + " -> " + num(margin_after));
}

namespace {

gsbi::SidIndex build_index(const RunOptions& opt, const std::vector<SlateSample>& samples) {
  return gsbi::SidIndex(read_sid_map(data_path(opt, "sid_map.jsonl")), gsbi::historical_feedback(samples));
}

bool is_flat(const std::string& stem) { return stem.rfind("flat", 0) == 0; }

}  // namespace

void infer(const RunConfig& cfg, const RunOptions& opt) {
  if (opt.mode != "gsbi" && opt.mode != "flat") throw ConfigError("--mode must be gsbi or flat");
  std::string stem = opt.checkpoint;
  if (stem.empty())
    stem = opt.mode == "flat" ? "flat_pretrain"
                              : (file_exists(checkpoint_path(opt, "hsd_aligned")) ? "hsd_aligned" : "hsd_pretrain");
  if (is_flat(stem) != (opt.mode == "flat")) throw ConfigError("checkpoint '" + stem + "' does not fit mode " + opt.mode);
  const auto samples = read_samples(data_path(opt, "samples.jsonl"));
  const auto users = evalbench::eval_users(samples);
  const auto index = build_index(opt, samples);
  gsbi::DecodeOptions dopt;
  dopt.beam = opt.beam ? opt.beam : cfg.model.beam;
  dopt.kv_cache = opt.kv_cache;
  dopt.index = &index;
  dopt.prefix_fallback = cfg.eval.prefix_fallback;
  dopt.slate_size = opt.slate_size;
  if (dopt.slate_size > cfg.model.slate_size) throw ConfigError("--slate-size exceeds the trained slate size");

  std::ostream& out = opt.out ? *opt.out : std::cout;
  gsbi::CostLedger total;
  auto emit = [&](std::uint32_t user, const gsbi::GeneratedSlate& s) {
    nlohmann::json j{{"user_id", user}, {"sids", s.sids}, {"items", s.items}, {"log_probs", s.log_probs}};
    out << j.dump() << '\n';
    total += s.ledger;
  };
  if (opt.mode == "flat") {
    const auto model = load_flat(cfg, opt, stem);
    for (const auto& u : users) emit(u.user_id, gsbi::flat_generate(model, u.context, dopt));
  } else {
    const auto model = load_hierarchical(cfg, opt, stem);
    for (const auto& u : users) emit(u.user_id, gsbi::gsbi_generate(model, u.context, dopt));
  }
  nlohmann::json ledger{{"ledger",
                         {{"users", users.size()},
                          {"planner_steps", total.planner_steps},
                          {"generator_steps", total.generator_steps},
                          {"hypothesis_rows", total.hypothesis_rows},
                          {"attention_flops", total.attention_flops},
                          {"peak_cache_bytes", total.peak_cache_bytes},
                          {"wall_seconds", total.wall_seconds}}}};
  out << ledger.dump() << '\n';
}

void evaluate(const RunConfig& cfg, const RunOptions& opt) {
  const std::string csv_path = metrics_path(opt, opt.checkpoint.empty() ? "eval.csv" : "eval_" + opt.checkpoint + ".csv");
  if (up_to_date(opt, "eval", {csv_path})) return;
  std::vector<std::string> stems;
  if (!opt.checkpoint.empty()) {
    stems.push_back(opt.checkpoint);
  } else {
    for (const char* s : {"hsd_pretrain", "hsd_aligned", "flat_pretrain"})
      if (file_exists(checkpoint_path(opt, s))) stems.push_back(s);
    if (stems.empty()) throw DataError("no checkpoints to evaluate in '" + opt.run_dir + "/checkpoints'");
  }
  const auto samples = read_samples(data_path(opt, "samples.jsonl"));
  const auto users = evalbench::eval_users(samples);
  const auto index = build_index(opt, samples);
  gsbi::DecodeOptions dopt;
  dopt.beam = cfg.model.beam;
  dopt.kv_cache = cfg.eval.kv_cache;
  dopt.index = &index;
  dopt.prefix_fallback = cfg.eval.prefix_fallback;

  std::string csv = "checkpoint,truth,metric,k,value,records,skipped_empty\n";
  for (const auto& stem : stems) {
    std::vector<evalbench::EvalRecord> records;
    if (is_flat(stem)) {
      const auto model = load_flat(cfg, opt, stem);
      records = evalbench::predict_records(
          users, [&](const hsd::UserContext& c) { return gsbi::flat_generate(model, c, dopt).items; }, opt.workers);
    } else {
      const auto model = load_hierarchical(cfg, opt, stem);
      records = evalbench::predict_records(
          users, [&](const hsd::UserContext& c) { return gsbi::gsbi_generate(model, c, dopt).items; }, opt.workers);
    }
    const auto rows = evalbench::aggregate(records, cfg.eval.ks);
    const std::string body = evalbench::metrics_csv(rows);
    std::istringstream in(body);
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) csv += stem + ',' + line + '\n';
    note(opt, "eval", stem + " effective recall@" + std::to_string(cfg.eval.ks.back()) + " " +
                          num(evalbench::metric_value(rows, "effective", "recall", cfg.eval.ks.back())));
  }
  write_file_atomic(csv_path, csv);
}

void bench(const RunConfig& cfg, const RunOptions& opt) {
  const std::string csv_path = metrics_path(opt, "bench.csv");
  if (up_to_date(opt, "bench", {csv_path})) return;
  const auto samples = read_samples(data_path(opt, "samples.jsonl"));
  auto users = evalbench::eval_users(samples);
  if (cfg.bench.max_users && users.size() > cfg.bench.max_users) users.resize(cfg.bench.max_users);
  const auto index = build_index(opt, samples);
  const auto hier = load_hierarchical(cfg, opt, "hsd_pretrain");
  std::optional<hsd::FlatDecoder> flat;
  if (file_exists(checkpoint_path(opt, "flat_pretrain"))) flat.emplace(load_flat(cfg, opt, "flat_pretrain"));
  std::vector<evalbench::BenchCase> cases;
  for (const char* mode : {"gsbi", "flat"}) {
    if (std::string(mode) == "flat" && !flat) continue;
    for (auto m : cfg.bench.slate_sizes)
      for (auto b : cfg.bench.beams) {
        cases.push_back({mode, m, b, true});
        if (cfg.bench.compare_kv) cases.push_back({mode, m, b, false});
      }
  }
  // Timing runs on one thread.
  const int saved = omp_get_max_threads();
  omp_set_num_threads(1);
  std::vector<evalbench::BenchResult> results;
  try {
    results = evalbench::bench_efficiency(&hier, flat ? &*flat : nullptr, users, index, cases);
  } catch (...) {
    omp_set_num_threads(saved);
    throw;
  }
  omp_set_num_threads(saved);
  write_file_atomic(csv_path, evalbench::bench_csv(results));
  note(opt, "bench", std::to_string(results.size()) + " cases over " + std::to_string(users.size()) + " users");
}

void run_all(const RunConfig& cfg, const RunOptions& opt) {
  open_run_dir(cfg, opt);
  gen_data(cfg, opt);
  train_crq(cfg, opt);
  tokenize(cfg, opt);
  pretrain(cfg, opt);
  align(cfg, opt);
  evaluate(cfg, opt);
}

}  // namespace slategen::pipeline
