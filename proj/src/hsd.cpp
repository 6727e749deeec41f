// SPDX-License-Identifier: Apache-2.0
#include "slategen/hsd.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>

#include "slategen/optim.hpp"

namespace slategen::hsd {

namespace {

constexpr double kEmbedStd = 0.02;

std::atomic<std::size_t> g_policy_forwards{0};

std::vector<nn::DecoderBlock> make_blocks(std::size_t n, const ModelConfig& cfg, bool cross, Rng& rng) {
  std::vector<nn::DecoderBlock> out;
  for (std::size_t i = 0; i < n; ++i) out.emplace_back(nn::BlockShape{cfg.d_model, cfg.d_ffn, cfg.n_heads, cross}, rng);
  return out;
}

std::vector<nn::Linear> make_heads(const ModelConfig& cfg, Rng& rng) {
  std::vector<nn::Linear> heads;
  for (std::size_t d = 0; d < cfg.depth; ++d) {
    heads.emplace_back(cfg.d_model, cfg.codebook_size, true, rng);
    auto w = heads.back().weight.mutable_values();
    std::fill(w.begin(), w.end(), 0.0);
  }
  return heads;
}

void collect_blocks(const std::string& prefix, const std::vector<nn::DecoderBlock>& blocks, nn::ParamList& out) {
  for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(prefix + "." + std::to_string(i), out);
}

// Row r of every segment of length `len` sees its own segment up to and including r.
kernels::AttentionMask causal_segments(std::size_t segments, std::size_t len) {
  std::vector<std::uint32_t> b;
  b.reserve(2 * segments * len);
  for (std::size_t s = 0; s < segments; ++s)
    for (std::size_t r = 0; r < len; ++r) {
      b.push_back(static_cast<std::uint32_t>(s * len));
      b.push_back(static_cast<std::uint32_t>(s * len + r + 1));
    }
  return kernels::AttentionMask::ranges(std::move(b));
}

// Every `rows_per` consecutive query rows belong to one user's context segment.
kernels::AttentionMask context_ranges(const std::vector<std::uint32_t>& offsets, std::size_t rows_per) {
  std::vector<std::uint32_t> b;
  const std::size_t users = offsets.size() - 1;
  b.reserve(2 * users * rows_per);
  for (std::size_t u = 0; u < users; ++u)
    for (std::size_t r = 0; r < rows_per; ++r) {
      b.push_back(offsets[u]);
      b.push_back(offsets[u + 1]);
    }
  return kernels::AttentionMask::ranges(std::move(b));
}

void check_batch(const SlateBatch& batch, const ModelConfig& cfg) {
  if (batch.contexts.empty()) throw ContractError("empty slate batch");
  if (batch.contexts.size() != batch.slates.size()) throw DimensionError("slate batch: contexts and slates differ");
  for (const auto& slate : batch.slates) {
    if (slate.size() != cfg.slate_size)
      throw DimensionError("slate of length " + std::to_string(slate.size()) + ", expected " +
                           std::to_string(cfg.slate_size));
    for (const auto& sid : slate) check_sid(sid, cfg.depth, cfg.codebook_size);
  }
}

// Reorders per-layer logits [D][slots] into (slot, layer) order and picks the
// teacher-forced log-probabilities: [batch × M·D].
Tensor pick_tokens(const std::vector<Tensor>& per_layer, const SlateBatch& batch, const ModelConfig& cfg) {
  const std::size_t slots = batch.slates.size() * cfg.slate_size, depth = cfg.depth;
  std::vector<std::uint32_t> order(slots * depth), targets(slots * depth);
  for (std::size_t s = 0; s < slots; ++s)
    for (std::size_t d = 0; d < depth; ++d) {
      order[s * depth + d] = static_cast<std::uint32_t>(d * slots + s);
      targets[s * depth + d] = batch.slates[s / cfg.slate_size][s % cfg.slate_size][d];
    }
  const Tensor logits = gather_rows(concat_rows(per_layer), order);
  return reshape(log_softmax_pick(logits, targets), {batch.slates.size(), cfg.slate_size * depth});
}

std::vector<Sid> flatten_slates(const SlateBatch& batch) {
  std::vector<Sid> out;
  for (const auto& s : batch.slates) out.insert(out.end(), s.begin(), s.end());
  return out;
}

std::vector<std::uint32_t> layer_codes(const std::vector<Sid>& sids, std::size_t d) {
  std::vector<std::uint32_t> out(sids.size());
  for (std::size_t i = 0; i < sids.size(); ++i) out[i] = sids[i][d];
  return out;
}

}  // namespace

void ModelConfig::validate() const {
  if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0)
    throw ContractError("model: d_model " + std::to_string(d_model) + " must be a positive multiple of n_heads " +
                        std::to_string(n_heads));
  if (l_item < 1 || l_slate <= l_item)
    throw ContractError("model: need l_slate > l_item >= 1, got l_slate=" + std::to_string(l_slate) +
                        " l_item=" + std::to_string(l_item));
  if (depth < 1 || codebook_size < 2 || slate_size < 1 || beam < 1 || d_ffn == 0 || d_user == 0)
    throw ContractError("model: depth, slate_size, beam, d_ffn and d_user must be positive and codebook_size >= 2");
}

UserContext context_of(const SlateSample& s) { return {s.user_features, s.history}; }

void check_sid(const Sid& sid, std::size_t depth, std::size_t k) {
  if (sid.size() != depth)
    throw IndexError("SID of length " + std::to_string(sid.size()) + ", expected " + std::to_string(depth));
  for (auto c : sid)
    if (c >= k) throw IndexError("code " + std::to_string(c) + " outside vocabulary of size " + std::to_string(k));
}

SlateBatch batch_of(std::span<const SlateSample> samples) {
  SlateBatch b;
  for (const auto& s : samples) {
    b.contexts.push_back(context_of(s));
    b.slates.push_back(s.slate);
  }
  return b;
}

SlateBatch batch_of(std::span<const SlateSample> samples, std::span<const std::size_t> pick) {
  SlateBatch b;
  for (auto i : pick) {
    b.contexts.push_back(context_of(samples[i]));
    b.slates.push_back(samples[i].slate);
  }
  return b;
}

std::size_t policy_forward_count() { return g_policy_forwards.load(); }

// ---------------------------------------------------------------------------

CodeEmbedding::CodeEmbedding(std::size_t depth, std::size_t k, std::size_t d_model, Rng& rng) : k_(k) {
  for (std::size_t d = 0; d < depth; ++d) tables_.push_back(nn::normal_param(k, d_model, kEmbedStd, rng));
}

Tensor CodeEmbedding::layer(std::size_t d, std::span<const std::uint32_t> codes) const {
  return gather_rows(tables_.at(d), codes);
}

Tensor CodeEmbedding::items(std::span<const Sid> sids) const {
  std::vector<Sid> v(sids.begin(), sids.end());
  for (const auto& s : v) check_sid(s, tables_.size(), k_);
  Tensor acc = layer(0, layer_codes(v, 0));
  for (std::size_t d = 1; d < tables_.size(); ++d) acc = acc + layer(d, layer_codes(v, d));
  return acc;
}

void CodeEmbedding::collect(const std::string& prefix, nn::ParamList& out) const {
  for (std::size_t d = 0; d < tables_.size(); ++d) out.push_back({prefix + "." + std::to_string(d), tables_[d]});
}

// ---------------------------------------------------------------------------

ContextEncoder::ContextEncoder(const ModelConfig& cfg, Rng& rng)
    : d_user_(cfg.d_user),
      max_history_(cfg.max_history),
      user_proj_(cfg.d_user, cfg.d_model, true, rng),
      positions_(nn::normal_param(cfg.max_history + 1, cfg.d_model, kEmbedStd, rng)),
      blocks_(make_blocks(cfg.l_ctx, cfg, false, rng)) {}

EncodedContexts ContextEncoder::encode(std::span<const UserContext> contexts, const CodeEmbedding& codes) const {
  if (contexts.empty()) throw ContractError("encode: no contexts");
  const std::size_t users = contexts.size();
  std::vector<double> features;
  std::vector<Sid> history;
  EncodedContexts out;
  out.offsets.push_back(0);
  for (const auto& c : contexts) {
    if (c.features.size() != d_user_)
      throw DimensionError("user features of width " + std::to_string(c.features.size()) + ", expected " +
                           std::to_string(d_user_));
    if (c.history.size() > max_history_)
      throw ContractError("history of length " + std::to_string(c.history.size()) + " exceeds max_history " +
                          std::to_string(max_history_));
    features.insert(features.end(), c.features.begin(), c.features.end());
    history.insert(history.end(), c.history.begin(), c.history.end());
    out.offsets.push_back(out.offsets.back() + 1 + static_cast<std::uint32_t>(c.history.size()));
  }
  const Tensor user = user_proj_.forward(Tensor::from({users, d_user_}, std::move(features)));
  Tensor stacked = user;
  if (!history.empty()) {
    const Tensor parts[] = {user, codes.items(history)};
    stacked = concat_rows(parts);
  }
  // Interleave: user token, then that user's history.
  std::vector<std::uint32_t> order, pos;
  std::vector<std::uint32_t> bounds;
  std::uint32_t hist_row = static_cast<std::uint32_t>(users);
  for (std::size_t u = 0; u < users; ++u) {
    const std::uint32_t first = out.offsets[u];
    order.push_back(static_cast<std::uint32_t>(u));
    for (std::size_t j = 0; j < contexts[u].history.size(); ++j) order.push_back(hist_row++);
    for (std::uint32_t j = 0; j < out.offsets[u + 1] - first; ++j) {
      pos.push_back(j);
      bounds.push_back(first);
      bounds.push_back(first + j + 1);
    }
  }
  Tensor h = gather_rows(stacked, order) + gather_rows(positions_, pos);
  const auto mask = kernels::AttentionMask::ranges(std::move(bounds));
  for (const auto& b : blocks_) h = b.forward(h, nullptr, mask);
  out.rows = h;
  return out;
}

void ContextEncoder::collect(const std::string& prefix, nn::ParamList& out) const {
  user_proj_.collect(prefix + ".user", out);
  out.push_back({prefix + ".pos", positions_});
  collect_blocks(prefix + ".block", blocks_, out);
}

// ---------------------------------------------------------------------------

HierarchicalDecoder::HierarchicalDecoder(const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  codes_ = CodeEmbedding(cfg.depth, cfg.codebook_size, cfg.d_model, rng);
  encoder_ = ContextEncoder(cfg, rng);
  bos_ = nn::normal_param(1, cfg.d_model, kEmbedStd, rng);
  planner_pos_ = nn::normal_param(cfg.slate_size, cfg.d_model, kEmbedStd, rng);
  planner_ = make_blocks(cfg.l_slate, cfg, true, rng);
  planner_norm_ = nn::ones_param(cfg.d_model);
  generator_pos_ = nn::normal_param(cfg.depth, cfg.d_model, kEmbedStd, rng);
  generator_ = make_blocks(cfg.l_item, cfg, true, rng);
  generator_norm_ = nn::ones_param(cfg.d_model);
  heads_ = make_heads(cfg, rng);
}

nn::ParamList HierarchicalDecoder::params() const {
  nn::ParamList p;
  codes_.collect("codes", p);
  encoder_.collect("ctx", p);
  p.push_back({"bos", bos_});
  p.push_back({"planner.pos", planner_pos_});
  collect_blocks("planner", planner_, p);
  p.push_back({"planner.norm", planner_norm_});
  p.push_back({"generator.pos", generator_pos_});
  collect_blocks("generator", generator_, p);
  p.push_back({"generator.norm", generator_norm_});
  for (std::size_t d = 0; d < heads_.size(); ++d) heads_[d].collect("head." + std::to_string(d), p);
  return p;
}

std::size_t HierarchicalDecoder::generator_parameters() const {
  nn::ParamList p;
  p.push_back({"generator.pos", generator_pos_});
  collect_blocks("generator", generator_, p);
  p.push_back({"generator.norm", generator_norm_});
  for (std::size_t d = 0; d < heads_.size(); ++d) heads_[d].collect("head." + std::to_string(d), p);
  return nn::count_parameters(p);
}

Tensor HierarchicalDecoder::encode_context(const UserContext& ctx) const {
  return encoder_.encode(std::span<const UserContext>(&ctx, 1), codes_).rows;
}

PreparedContext HierarchicalDecoder::prepare_encoded(const Tensor& context) const {
  PreparedContext p;
  p.context = context;
  for (const auto& b : planner_) p.planner.push_back(b.project_context(context));
  for (const auto& b : generator_) p.generator.push_back(b.project_context(context));
  return p;
}

PreparedContext HierarchicalDecoder::prepare(const UserContext& ctx) const {
  return prepare_encoded(encode_context(ctx));
}

Tensor HierarchicalDecoder::planner_forward(const Tensor& inputs, const Tensor& context) const {
  return planner_forward(inputs, prepare_encoded(context));
}

Tensor HierarchicalDecoder::planner_forward(const Tensor& inputs, const PreparedContext& ctx) const {
  const std::size_t len = inputs.rows();
  if (len == 0 || len > cfg_.slate_size)
    throw DimensionError("planner: " + std::to_string(len) + " input rows for slate size " +
                         std::to_string(cfg_.slate_size));
  Tensor h = inputs + slice_rows(planner_pos_, 0, len);
  for (std::size_t l = 0; l < planner_.size(); ++l)
    h = planner_[l].forward(h, &ctx.planner[l], kernels::AttentionMask::causal());
  return rms_norm(h, planner_norm_);
}

Tensor HierarchicalDecoder::generator_hidden(const Tensor& pref, std::span<const std::uint32_t> prefix,
                                             const PreparedContext& ctx) const {
  if (prefix.size() >= cfg_.depth)
    throw DimensionError("generator: prefix of length " + std::to_string(prefix.size()) + " for depth " +
                         std::to_string(cfg_.depth));
  std::vector<Tensor> rows{pref};
  for (std::size_t d = 0; d < prefix.size(); ++d) {
    if (prefix[d] >= cfg_.codebook_size) throw IndexError("generator: code " + std::to_string(prefix[d]) + " out of range");
    rows.push_back(codes_.layer(d, std::span<const std::uint32_t>(&prefix[d], 1)));
  }
  Tensor h = concat_rows(rows) + slice_rows(generator_pos_, 0, rows.size());
  for (std::size_t l = 0; l < generator_.size(); ++l)
    h = generator_[l].forward(h, &ctx.generator[l], kernels::AttentionMask::causal());
  return rms_norm(h, generator_norm_);
}

Tensor HierarchicalDecoder::generator_forward(const Tensor& pref, std::span<const std::uint32_t> prefix,
                                              const Tensor& context) const {
  return generator_forward(pref, prefix, prepare_encoded(context));
}

Tensor HierarchicalDecoder::generator_forward(const Tensor& pref, std::span<const std::uint32_t> prefix,
                                              const PreparedContext& ctx) const {
  const Tensor h = generator_hidden(pref, prefix, ctx);
  std::vector<Tensor> logits;
  for (std::size_t d = 0; d < h.rows(); ++d) logits.push_back(heads_[d].forward(slice_rows(h, d, 1)));
  return concat_rows(logits);
}

Tensor HierarchicalDecoder::planner_step(const Tensor& input, std::size_t position, const PreparedContext& ctx,
                                         std::vector<nn::SelfKV>& cache) const {
  if (position >= cfg_.slate_size) throw DimensionError("planner_step: position beyond slate size");
  cache.resize(planner_.size());
  if (cache[0].length() != position) throw ContractError("planner_step: cache does not match position");
  Tensor h = input + slice_rows(planner_pos_, position, 1);
  for (std::size_t l = 0; l < planner_.size(); ++l) h = planner_[l].step(h, &ctx.planner[l], cache[l]);
  return rms_norm(h, planner_norm_);
}

Tensor HierarchicalDecoder::generator_step(const Tensor& input, std::size_t position, const PreparedContext& ctx,
                                           std::vector<nn::SelfKV>& cache) const {
  if (position >= cfg_.depth) throw DimensionError("generator_step: position beyond depth");
  cache.resize(generator_.size());
  if (cache[0].length() != position) throw ContractError("generator_step: cache does not match position");
  Tensor h = input + slice_rows(generator_pos_, position, 1);
  for (std::size_t l = 0; l < generator_.size(); ++l) h = generator_[l].step(h, &ctx.generator[l], cache[l]);
  return heads_[position].forward(rms_norm(h, generator_norm_));
}

Tensor HierarchicalDecoder::token_log_probs(const SlateBatch& batch) const {
  check_batch(batch, cfg_);
  ++g_policy_forwards;
  const std::size_t users = batch.slates.size(), m_len = cfg_.slate_size, depth = cfg_.depth;
  const std::size_t slots = users * m_len;
  const EncodedContexts enc = encoder_.encode(batch.contexts, codes_);
  const std::vector<Sid> sids = flatten_slates(batch);

  // Planner rows per user: [BOS, i_1, …, i_{M-1}].
  Tensor planner_in;
  {
    std::vector<std::uint32_t> order, pos;
    for (std::size_t u = 0; u < users; ++u)
      for (std::size_t m = 0; m < m_len; ++m) {
        order.push_back(m == 0 ? 0u : static_cast<std::uint32_t>(1 + u * m_len + m - 1));
        pos.push_back(static_cast<std::uint32_t>(m));
      }
    const Tensor parts[] = {bos_, codes_.items(sids)};
    planner_in = gather_rows(concat_rows(parts), order) + gather_rows(planner_pos_, pos);
  }
  const auto planner_self = causal_segments(users, m_len);
  const auto planner_cross = context_ranges(enc.offsets, m_len);
  Tensor h = planner_in;
  for (const auto& b : planner_) {
    const nn::ContextKV kv = b.project_context(enc.rows);
    h = b.forward(h, &kv, planner_self, planner_cross);
  }
  const Tensor prefs = rms_norm(h, planner_norm_);

  // Generator rows per slot: [î, s¹, …, s^{D-1}].
  std::vector<Tensor> parts{prefs};
  for (std::size_t d = 0; d + 1 < depth; ++d) parts.push_back(codes_.layer(d, layer_codes(sids, d)));
  std::vector<std::uint32_t> order, pos;
  for (std::size_t s = 0; s < slots; ++s)
    for (std::size_t d = 0; d < depth; ++d) {
      order.push_back(static_cast<std::uint32_t>(d * slots + s));
      pos.push_back(static_cast<std::uint32_t>(d));
    }
  Tensor g = gather_rows(concat_rows(parts), order) + gather_rows(generator_pos_, pos);
  const auto gen_cross = context_ranges(enc.offsets, m_len * depth);
  for (const auto& b : generator_) {
    const nn::ContextKV kv = b.project_context(enc.rows);
    g = b.forward(g, &kv, kernels::AttentionMask::block_causal(depth), gen_cross);
  }
  g = rms_norm(g, generator_norm_);

  std::vector<Tensor> per_layer;
  for (std::size_t d = 0; d < depth; ++d) {
    std::vector<std::uint32_t> rows(slots);
    for (std::size_t s = 0; s < slots; ++s) rows[s] = static_cast<std::uint32_t>(s * depth + d);
    per_layer.push_back(heads_[d].forward(gather_rows(g, rows)));
  }
  return pick_tokens(per_layer, batch, cfg_);
}

// ---------------------------------------------------------------------------

FlatDecoder::FlatDecoder(const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  codes_ = CodeEmbedding(cfg.depth, cfg.codebook_size, cfg.d_model, rng);
  encoder_ = ContextEncoder(cfg, rng);
  bos_ = nn::normal_param(1, cfg.d_model, kEmbedStd, rng);
  positions_ = nn::normal_param(cfg.slate_size * cfg.depth, cfg.d_model, kEmbedStd, rng);
  blocks_ = make_blocks(cfg.l_slate + cfg.l_item, cfg, true, rng);
  norm_ = nn::ones_param(cfg.d_model);
  heads_ = make_heads(cfg, rng);
}

nn::ParamList FlatDecoder::params() const {
  nn::ParamList p;
  codes_.collect("codes", p);
  encoder_.collect("ctx", p);
  p.push_back({"bos", bos_});
  p.push_back({"stream.pos", positions_});
  collect_blocks("stream", blocks_, p);
  p.push_back({"stream.norm", norm_});
  for (std::size_t d = 0; d < heads_.size(); ++d) heads_[d].collect("head." + std::to_string(d), p);
  return p;
}

PreparedContext FlatDecoder::prepare(const UserContext& ctx) const {
  PreparedContext p;
  p.context = encoder_.encode(std::span<const UserContext>(&ctx, 1), codes_).rows;
  for (const auto& b : blocks_) p.planner.push_back(b.project_context(p.context));
  return p;
}

Tensor FlatDecoder::input_rows(std::span<const std::uint32_t> tokens, std::size_t first, std::size_t count) const {
  std::vector<Tensor> rows;
  for (std::size_t p = first; p < first + count; ++p) {
    if (p == 0) {
      rows.push_back(bos_);
      continue;
    }
    const std::uint32_t code = tokens[p - 1];
    if (code >= cfg_.codebook_size) throw IndexError("flat: code " + std::to_string(code) + " out of range");
    rows.push_back(codes_.layer((p - 1) % cfg_.depth, std::span<const std::uint32_t>(&code, 1)));
  }
  return rows.size() == 1 ? rows[0] : concat_rows(rows);
}

Tensor FlatDecoder::forward(std::span<const std::uint32_t> tokens, const PreparedContext& ctx) const {
  const std::size_t len = tokens.size() + 1;
  if (len > cfg_.slate_size * cfg_.depth) throw DimensionError("flat: sequence longer than M·D");
  Tensor h = input_rows(tokens, 0, len) + slice_rows(positions_, 0, len);
  for (std::size_t l = 0; l < blocks_.size(); ++l)
    h = blocks_[l].forward(h, &ctx.planner[l], kernels::AttentionMask::causal());
  h = rms_norm(h, norm_);
  std::vector<Tensor> logits;
  for (std::size_t p = 0; p < len; ++p) logits.push_back(heads_[p % cfg_.depth].forward(slice_rows(h, p, 1)));
  return concat_rows(logits);
}

Tensor FlatDecoder::step(std::span<const std::uint32_t> tokens, std::size_t position, const PreparedContext& ctx,
                         std::vector<nn::SelfKV>& cache) const {
  if (position >= cfg_.slate_size * cfg_.depth) throw DimensionError("flat step: position beyond M·D");
  cache.resize(blocks_.size());
  if (cache[0].length() != position) throw ContractError("flat step: cache does not match position");
  Tensor h = input_rows(tokens, position, 1) + slice_rows(positions_, position, 1);
  for (std::size_t l = 0; l < blocks_.size(); ++l) h = blocks_[l].step(h, &ctx.planner[l], cache[l]);
  return heads_[position % cfg_.depth].forward(rms_norm(h, norm_));
}

Tensor FlatDecoder::token_log_probs(const SlateBatch& batch) const {
  check_batch(batch, cfg_);
  ++g_policy_forwards;
  const std::size_t users = batch.slates.size(), m_len = cfg_.slate_size, depth = cfg_.depth;
  const std::size_t slots = users * m_len, len = m_len * depth;
  const EncodedContexts enc = encoder_.encode(batch.contexts, codes_);
  const std::vector<Sid> sids = flatten_slates(batch);

  std::vector<Tensor> parts{bos_};
  for (std::size_t d = 0; d < depth; ++d) parts.push_back(codes_.layer(d, layer_codes(sids, d)));
  std::vector<std::uint32_t> order, pos;
  for (std::size_t u = 0; u < users; ++u)
    for (std::size_t p = 0; p < len; ++p) {
      if (p == 0) {
        order.push_back(0);
      } else {
        const std::size_t q = p - 1;
        order.push_back(static_cast<std::uint32_t>(1 + (q % depth) * slots + u * m_len + q / depth));
      }
      pos.push_back(static_cast<std::uint32_t>(p));
    }
  Tensor h = gather_rows(concat_rows(parts), order) + gather_rows(positions_, pos);
  const auto self_mask = causal_segments(users, len);
  const auto cross = context_ranges(enc.offsets, len);
  for (const auto& b : blocks_) {
    const nn::ContextKV kv = b.project_context(enc.rows);
    h = b.forward(h, &kv, self_mask, cross);
  }
  h = rms_norm(h, norm_);
  std::vector<Tensor> per_layer;
  for (std::size_t d = 0; d < depth; ++d) {
    std::vector<std::uint32_t> rows(slots);
    for (std::size_t s = 0; s < slots; ++s) rows[s] = static_cast<std::uint32_t>(s * depth + d);
    per_layer.push_back(heads_[d].forward(gather_rows(h, rows)));
  }
  return pick_tokens(per_layer, batch, cfg_);
}

// ---------------------------------------------------------------------------

Tensor nll_from_log_probs(const Tensor& token_log_probs) {
  return sum(token_log_probs) * (-1.0 / static_cast<double>(token_log_probs.dim(0)));
}

Tensor slate_nll(const SlateModel& model, const SlateBatch& batch) {
  return nll_from_log_probs(model.token_log_probs(batch));
}

void pretrain(SlateModel& model, const std::vector<SlateSample>& samples, const TrainConfig& cfg,
              const std::function<void(const TrainLogRow&)>& on_log) {
  if (samples.empty()) throw ContractError("pretrain: no training samples");
  Rng rng(cfg.seed);
  AdamConfig acfg;
  acfg.lr = cfg.lr;
  acfg.weight_decay = cfg.weight_decay;
  Adam opt(model.params(), acfg);
  const std::size_t n = samples.size(), b = std::min(cfg.batch_size, n);
  std::vector<std::size_t> pool(n);
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    for (std::size_t i = 0; i < b; ++i) std::swap(pool[i], pool[i + rng.index(n - i)]);
    const SlateBatch batch = batch_of(samples, std::span<const std::size_t>(pool.data(), b));
    opt.zero_grad();
    Tensor loss = slate_nll(model, batch);
    loss.backward();
    if (cfg.cosine_decay) opt.set_lr(cosine_lr(cfg.lr, step, cfg.steps));
    const double gnorm = opt.step();
    if (!std::isfinite(gnorm)) throw NumericError("pretrain: non-finite gradient at step " + std::to_string(step));
    if (on_log && (step % cfg.log_every == 0 || step == cfg.steps)) on_log({step, loss.item(), gnorm});
  }
}

double evaluate_nll(const SlateModel& model, const std::vector<SlateSample>& samples, std::size_t chunk) {
  if (samples.empty()) throw ContractError("evaluate_nll: no samples");
  NoGradScope ng;
  double total = 0.0;
  for (std::size_t i = 0; i < samples.size(); i += chunk) {
    const std::size_t len = std::min(chunk, samples.size() - i);
    const SlateBatch batch = batch_of(std::span<const SlateSample>(samples.data() + i, len));
    total += slate_nll(model, batch).item() * static_cast<double>(len);
  }
  return total / static_cast<double>(samples.size());
}

}  // namespace slategen::hsd
