// Copyright 2026 The modalkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "modalkv/kv_cache.hpp"
#include "modalkv/metrics.hpp"
#include "modalkv/model.hpp"
#include "modalkv/policies.hpp"
#include "modalkv/tensor.hpp"

namespace modalkv {

inline constexpr float kRmsNormEps = 1e-5f;

// Passed to observers after attention at one (layer, step). Step 0 is the
// prefill (last prompt position); `scores` is aligned with `used`.
struct AttentionEvent {
  std::size_t layer;
  std::size_t step;
  StepKind kind;
  const LayerKvCache& cache;
  const IndexSet& used;
  std::span<const float> scores;
  const Matrix& head_weights;
};

struct RunOptions {
  bool record_trace = false;
  // Keep per-head weights in the trace as well as the head mean.
  bool verbose_trace = false;
  GemmOptions gemm;
  std::function<void(const AttentionEvent&)> on_attention;
  // After the policy hook for (layer, step) has run.
  std::function<void(std::size_t layer, std::size_t step, const LayerKvCache&)> on_policy_applied;
};

struct PrefillLayerRecord {
  std::size_t vision_present = 0;  // before the policy hook
  std::size_t vision_stored = 0;   // after it
  std::size_t core = 0;
  std::size_t slots_stored = 0;
};

struct PrefillRecord {
  std::vector<PrefillLayerRecord> layers;
  // Vision ordinals kept for later layers when the policy pruned.
  std::optional<IndexSet> retained;
};

struct DecodeState {
  std::vector<LayerKvCache> caches;
  SessionInfo info;
  std::size_t prompt_len = 0;
  std::size_t steps_done = 0;
  SessionCounters counters;
  std::optional<AttentionTrace> trace;
};

struct PrefillResult {
  std::vector<float> logits;
  DecodeState state;
  PrefillRecord record;
};

namespace detail {

inline void rmsnorm_rows(Matrix& x, std::span<const float> gain) {
  const std::size_t d = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto row = x.row(r);
    float ss = 0.0f;
    for (float v : row) ss += v * v;
    const float inv = 1.0f / std::sqrt(ss / static_cast<float>(d) + kRmsNormEps);
    for (std::size_t c = 0; c < d; ++c) row[c] = row[c] * inv * gain[c];
  }
}

inline void add_into(Matrix& x, const Matrix& delta) {
  auto xs = x.data();
  auto ds = delta.data();
  for (std::size_t i = 0; i < xs.size(); ++i) xs[i] += ds[i];
}

inline void mlp_block(Matrix& x, const LayerWeights& lw) {
  Matrix h = x;
  rmsnorm_rows(h, lw.mlp_norm);
  Matrix f = matmul(h, lw.w1);
  for (float& v : f.data()) v = v / (1.0f + std::exp(-v));
  add_into(x, matmul(f, lw.w2));
}

struct AttentionOutput {
  std::vector<float> out;
  Matrix probs;  // heads x |used|
};

// Multi-head attention of one query over the `used` cache rows. Each head's
// query is embedded in a zero-padded d_model row so the indexed kernels can
// read the shared key/value matrices in place.
inline AttentionOutput attend(std::span<const float> q, const LayerKvCache& cache, const IndexSet& used,
                              std::size_t heads, GemmOptions gemm) {
  const std::size_t d = q.size();
  const std::size_t dh = d / heads;
  Matrix qm(heads, d);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) qm(h, c) = q[c];
  }
  AttentionOutput res;
  res.probs = indexed_gemm_rows(qm, cache.keys(), used, gemm);
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
  for (std::size_t h = 0; h < heads; ++h) {
    auto row = res.probs.row(h);
    for (float& v : row) v *= scale;
    softmax_inplace(row);
  }
  const Matrix o = indexed_gemm_inner(res.probs, cache.values(), used);
  res.out.resize(d);
  for (std::size_t c = 0; c < d; ++c) res.out[c] = o(c / dh, c);
  return res;
}

inline std::vector<float> output_logits(const DecoderWeights& w, std::span<const float> hidden) {
  Matrix h(1, hidden.size(), std::vector<float>(hidden.begin(), hidden.end()));
  rmsnorm_rows(h, w.final_norm);
  const Matrix logits = matmul_nt(h, w.token_embedding);
  return {logits.data().begin(), logits.data().end()};
}

inline void record_trace_entry(DecodeState& st, const RunOptions& opt, std::size_t layer, std::size_t step,
                               const LayerKvCache& cache, const IndexSet& used, const std::vector<float>& scores,
                               const Matrix& probs) {
  if (!st.trace) return;
  TraceEntry e;
  e.layer = layer;
  e.step = step;
  e.scores = scores;
  e.slots.reserve(used.size());
  for (std::size_t r : used) e.slots.push_back({cache.meta(r).original_position, cache.meta(r).segment});
  if (opt.verbose_trace) e.head_weights = probs;
  st.trace->entries.push_back(std::move(e));
}

inline void check_weights(const DecoderWeights& w) {
  const ModelConfig& c = w.config;
  c.validate();
  if (w.layers.size() != c.n_layers || w.token_embedding.rows() != c.vocab_size ||
      w.token_embedding.cols() != c.d_model || w.position_embedding.rows() != c.max_seq_len) {
    throw StateError("weights do not match their model config");
  }
}

}  // namespace detail

// Processes the whole prompt causally, layer by layer. After the second
// layer the policy may prune vision tokens for all later layers; after every
// layer it sees the last position's head-mean attention and may evict.
inline PrefillResult prefill(const DecoderWeights& w, const SegmentedPrompt& prompt, CachePolicy& policy,
                             const RunOptions& opt = {}) {
  detail::check_weights(w);
  const ModelConfig& cfg = w.config;
  prompt.validate(cfg);
  const std::size_t n = prompt.length();
  if (n < 2) throw PromptError("assembled prompt must hold at least 2 tokens");
  if (n > cfg.max_seq_len) throw PromptError("prompt longer than max_seq_len");
  const std::size_t d = cfg.d_model;
  const std::size_t n_sys = prompt.system_tokens.size();
  const std::size_t n_vis = prompt.vision_count();

  PrefillResult res;
  DecodeState& st = res.state;
  st.info = {cfg.n_layers, n_sys, n_vis, prompt.instruction_tokens.size(), cfg.max_text_tokens};
  st.prompt_len = n;
  if (opt.record_trace) st.trace.emplace();
  policy.begin(st.info);

  // Hidden states of the active positions, and their segments.
  std::vector<std::size_t> positions(n);
  std::vector<Segment> segments(n);
  Matrix x(n, d);
  for (std::size_t p = 0; p < n; ++p) {
    positions[p] = p;
    std::span<const float> src;
    if (p < n_sys) {
      segments[p] = Segment::System;
      src = w.token_embedding.row(prompt.system_tokens[p]);
    } else if (p < n_sys + n_vis) {
      segments[p] = Segment::Vision;
      src = prompt.vision_embeddings.row(p - n_sys);
    } else {
      segments[p] = Segment::Instruction;
      src = w.token_embedding.row(prompt.instruction_tokens[p - n_sys - n_vis]);
    }
    auto pe = w.position_embedding.row(p);
    auto dst = x.row(p);
    for (std::size_t c = 0; c < d; ++c) dst[c] = src[c] + pe[c];
  }

  st.caches.reserve(cfg.n_layers);
  res.record.layers.resize(cfg.n_layers);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const LayerWeights& lw = w.layers[l];
    const std::size_t rows = x.rows();
    Matrix h = x;
    detail::rmsnorm_rows(h, lw.attn_norm);
    const Matrix q = matmul(h, lw.wq);
    const Matrix k = matmul(h, lw.wk);
    const Matrix v = matmul(h, lw.wv);

    LayerKvCache cache(d);
    for (std::size_t r = 0; r < rows; ++r) cache.append(k.row(r), v.row(r), SlotMeta{positions[r], segments[r]});

    Matrix attn(rows, d);
    detail::AttentionOutput last;
    for (std::size_t r = 0; r < rows; ++r) {
      detail::AttentionOutput a = detail::attend(q.row(r), cache, IndexSet::range(r + 1), cfg.n_heads, opt.gemm);
      std::copy(a.out.begin(), a.out.end(), attn.row(r).begin());
      if (r + 1 == rows) last = std::move(a);
    }
    const std::vector<float> scores = attention_score(last.probs);
    const IndexSet all = IndexSet::range(rows);
    detail::record_trace_entry(st, opt, l, 0, cache, all, scores, last.probs);
    if (opt.on_attention) opt.on_attention({l, 0, StepKind::Normal, cache, all, scores, last.probs});

    detail::add_into(x, matmul(attn, lw.wo));
    detail::mlp_block(x, lw);

    if (l + 1 == kPruneFromLayer) {
      std::vector<float> vs;
      for (std::size_t r = 0; r < rows; ++r) {
        if (segments[r] == Segment::Vision) vs.push_back(scores[r]);
      }
      if (auto keep = policy.prune_vision(vs)) {
        std::vector<std::size_t> keep_rows;
        for (std::size_t r = 0; r < rows; ++r) {
          if (segments[r] != Segment::Vision || keep->contains(positions[r] - n_sys)) keep_rows.push_back(r);
        }
        Matrix nx(0, d);
        std::vector<std::size_t> np;
        std::vector<Segment> ns;
        for (std::size_t r : keep_rows) {
          nx.append_row(x.row(r));
          np.push_back(positions[r]);
          ns.push_back(segments[r]);
        }
        x = std::move(nx);
        positions = std::move(np);
        segments = std::move(ns);
        res.record.retained = std::move(keep);
      }
    }

    PrefillLayerRecord& rec = res.record.layers[l];
    rec.vision_present = cache.count(Segment::Vision);
    policy.after_prefill_layer(l, cache, scores);
    rec.vision_stored = cache.count(Segment::Vision);
    rec.slots_stored = cache.size();
    for (const auto& m : cache.meta()) rec.core += m.is_core;
    if (opt.on_policy_applied) opt.on_policy_applied(l, 0, cache);
    st.counters.evicted_slots += cache.evicted_total();
    st.caches.push_back(std::move(cache));
  }

  res.logits = detail::output_logits(w, x.row(x.rows() - 1));
  return res;
}

// Feeds `token` as generated step t (t = 1, 2, ...) and returns next-token
// logits. Attention reads exactly the policy's used set at every layer;
// policy updates computed here apply from step t + 1.
inline std::vector<float> decode_step(const DecoderWeights& w, DecodeState& st, CachePolicy& policy, TokenId token,
                                      std::size_t t, const RunOptions& opt = {}) {
  const ModelConfig& cfg = w.config;
  if (st.caches.size() != cfg.n_layers) throw StateError("cache has " + std::to_string(st.caches.size()) + " layers");
  for (const auto& c : st.caches) {
    if (c.width() != cfg.d_model) throw StateError("cache width does not match d_model");
  }
  if (t != st.steps_done + 1) {
    throw StateError("decode step " + std::to_string(t) + " after step " + std::to_string(st.steps_done));
  }
  if (token >= cfg.vocab_size) throw PromptError("token id " + std::to_string(token) + " outside vocabulary");
  const std::size_t pos = st.prompt_len + t - 1;
  if (pos >= cfg.max_seq_len) throw StateError("position " + std::to_string(pos) + " exceeds max_seq_len");

  const std::size_t d = cfg.d_model;
  Matrix x(1, d);
  {
    auto te = w.token_embedding.row(token);
    auto pe = w.position_embedding.row(pos);
    for (std::size_t c = 0; c < d; ++c) x(0, c) = te[c] + pe[c];
  }
  const StepKind kind = policy.step_kind(t);
  const std::uint64_t full_slots = st.prompt_len + t;
  const AttentionFlops full_flops = attention_flops(full_slots, d, cfg.n_heads);

  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const LayerWeights& lw = w.layers[l];
    LayerKvCache& cache = st.caches[l];
    Matrix h = x;
    detail::rmsnorm_rows(h, lw.attn_norm);
    const Matrix q = matmul(h, lw.wq);
    const Matrix k = matmul(h, lw.wk);
    const Matrix v = matmul(h, lw.wv);
    cache.append(k.row(0), v.row(0), SlotMeta{pos, Segment::Generated});

    const IndexSet used = policy.select_used(cache, kind);
    used.check_bound(cache.size());
    const detail::AttentionOutput a = detail::attend(q.row(0), cache, used, cfg.n_heads, opt.gemm);
    const std::vector<float> scores = attention_score(a.probs);

    StepRecord rec;
    rec.layer = l;
    rec.step = t;
    rec.full_slots = full_slots;
    rec.stored = cache.segment_counts();
    for (std::size_t r : used) ++rec.used[static_cast<std::size_t>(cache.meta(r).segment)];
    rec.attn_flops = attention_flops(used.size(), d, cfg.n_heads).total();
    rec.full_attn_flops = full_flops.total();
    st.counters.steps.push_back(rec);

    detail::record_trace_entry(st, opt, l, t, cache, used, scores, a.probs);
    if (opt.on_attention) opt.on_attention({l, t, kind, cache, used, scores, a.probs});

    Matrix attn(1, d, a.out);
    detail::add_into(x, matmul(attn, lw.wo));
    detail::mlp_block(x, lw);

    const std::size_t before = cache.evicted_total();
    policy.after_decode_layer(l, t, kind, cache, used, scores);
    st.counters.evicted_slots += cache.evicted_total() - before;
    if (opt.on_policy_applied) opt.on_policy_applied(l, t, cache);
  }
  st.steps_done = t;
  return detail::output_logits(w, x.row(0));
}

// Lowest id wins ties.
inline TokenId argmax(std::span<const float> logits) {
  if (logits.empty()) throw ShapeError("argmax of empty logits");
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = i;
  }
  return static_cast<TokenId>(best);
}

struct GenerateOptions {
  std::size_t max_new_tokens = 16;
  bool stop_at_end_token = true;
};

struct GenerationResult {
  std::vector<TokenId> tokens;
  SessionCounters counters;
  CacheStats stats;
  std::optional<AttentionTrace> trace;
  PrefillRecord prefill;
  // Logits after the final decode step.
  std::vector<float> final_logits;
};

// Greedy decoding. Each generated token is committed to the cache by one
// decode step, so decode steps == generated tokens.
inline GenerationResult generate(const DecoderWeights& w, const SegmentedPrompt& prompt, CachePolicy& policy,
                                 const GenerateOptions& gen, const RunOptions& opt = {}) {
  const ModelConfig& cfg = w.config;
  if (gen.max_new_tokens < 1) throw ConfigError("max_new_tokens must be >= 1");
  if (prompt.instruction_tokens.size() + gen.max_new_tokens > cfg.max_text_tokens) {
    throw ConfigError("instruction (" + std::to_string(prompt.instruction_tokens.size()) + ") + max_new_tokens (" +
                      std::to_string(gen.max_new_tokens) + ") exceeds max_text_tokens " +
                      std::to_string(cfg.max_text_tokens));
  }
  if (prompt.length() + gen.max_new_tokens > cfg.max_seq_len) {
    throw ConfigError("prompt + max_new_tokens exceeds max_seq_len");
  }
  PrefillResult pre = prefill(w, prompt, policy, opt);
  GenerationResult out;
  out.prefill = std::move(pre.record);
  DecodeState& st = pre.state;
  TokenId next = argmax(pre.logits);
  for (std::size_t t = 1; t <= gen.max_new_tokens; ++t) {
    out.tokens.push_back(next);
    out.final_logits = decode_step(w, st, policy, next, t, opt);
    if (gen.stop_at_end_token && next == cfg.end_token()) break;
    next = argmax(out.final_logits);
  }
  out.counters = std::move(st.counters);
  out.stats = collect_stats(out.counters);
  out.trace = std::move(st.trace);
  return out;
}

}  // namespace modalkv
