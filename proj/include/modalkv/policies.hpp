// Copyright 2026 The modalkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "modalkv/kv_cache.hpp"
#include "modalkv/metrics.hpp"

namespace modalkv {

// Number of leading decoder layers that always see every vision token;
// prefill pruning applies from this layer index on (0-based).
inline constexpr std::size_t kPruneFromLayer = 2;

struct AvlPolicyConfig {
  double S_pct = 45.0;  // secondary (stored) vision proportion
  double C_pct = 30.0;  // core (computed) vision proportion
  std::size_t K = 3;    // core refresh period in decode steps
  double P_pct = 90.0;  // vision tokens kept after the prefill prune
  double T_pct = 70.0;  // text window as a share of max_text_tokens

  void validate() const {
    if (!(C_pct > 0.0 && C_pct <= S_pct && S_pct <= 100.0)) {
      throw ConfigError("need 0 < C <= S <= 100 (got S=" + csv::format_number(S_pct) +
                        ", C=" + csv::format_number(C_pct) + ")");
    }
    if (K < 1) throw ConfigError("K must be >= 1");
    if (!(P_pct > 0.0 && P_pct <= 100.0)) throw ConfigError("P must be in (0, 100]");
    if (!(T_pct > 0.0 && T_pct <= 100.0)) throw ConfigError("T must be in (0, 100]");
  }
};

// Indices are positions in the candidate score list handed to classify_vision.
struct VisionClassification {
  IndexSet secondary;
  IndexSet core;
  IndexSet minor;
};

// Ranks candidates by score (ties to the lower ordinal). Set sizes are taken
// relative to `total_vision`, the vision count before any prefill prune, and
// clamped to the candidates actually present.
inline VisionClassification classify_vision(std::span<const float> scores, const AvlPolicyConfig& cfg,
                                            std::size_t total_vision) {
  if (scores.empty()) throw PolicyError("classify_vision on an empty score list");
  const std::size_t n_secondary = percent_count(cfg.S_pct, total_vision, scores.size());
  const std::size_t n_core = percent_count(cfg.C_pct, total_vision, n_secondary);
  VisionClassification c;
  c.secondary = top_k(scores, n_secondary);
  c.core = top_k(scores, n_core);
  std::vector<std::size_t> minor;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!c.secondary.contains(i)) minor.push_back(i);
  }
  c.minor = IndexSet(std::move(minor));
  return c;
}

inline VisionClassification classify_vision(std::span<const float> scores, const AvlPolicyConfig& cfg) {
  return classify_vision(scores, cfg, scores.size());
}

// Vision ordinals kept for layers kPruneFromLayer.. after the prefill.
inline IndexSet prefill_prune(std::span<const float> vision_scores, double keep_pct) {
  if (vision_scores.empty()) throw PolicyError("prefill_prune on an empty score list");
  return top_k(vision_scores, percent_count(keep_pct, vision_scores.size(), vision_scores.size()));
}

inline bool is_update_step(std::size_t t, std::size_t K) {
  if (t < 1) throw PolicyError("decode steps count from 1");
  if (K < 1) throw ConfigError("K must be >= 1");
  return t % K == 0;
}

// New core set on an update step: the `core_count` best of the secondary
// ordinals by this step's scores (`scores[i]` belongs to `secondary[i]`).
inline IndexSet update_core(const IndexSet& secondary, std::span<const float> scores, std::size_t core_count,
                            std::size_t t, std::size_t K) {
  if (!is_update_step(t, K)) {
    throw PolicyError("update_core called on non-update step " + std::to_string(t));
  }
  if (scores.size() != secondary.size()) throw ShapeError("update_core scores do not cover the secondary set");
  if (secondary.empty()) throw PolicyError("update_core with an empty secondary set");
  const IndexSet pick = top_k(scores, std::clamp<std::size_t>(core_count, 1, secondary.size()));
  std::vector<std::size_t> out;
  out.reserve(pick.size());
  for (std::size_t i : pick) out.push_back(secondary[i]);
  return IndexSet(std::move(out));
}

inline std::size_t text_window_size(double T_pct, std::size_t max_text_tokens) {
  return percent_count(T_pct, max_text_tokens, max_text_tokens);
}

// Text-window eviction. `accumulated` lists live text slots oldest to newest.
// When more than `window` are live, the excess with the lowest accumulated
// score is evicted (ties to the older slot). Candidates are the oldest
// live - ceil(W/2) - 1 slots, which is the oldest floor(W/2) when exactly one
// slot overflows; the newest ceil(W/2) are never candidates.
inline IndexSet text_step(std::span<const double> accumulated, std::size_t window) {
  if (window < 2) throw ConfigError("text window must hold at least 2 slots");
  const std::size_t live = accumulated.size();
  if (live <= window) return {};
  const std::size_t excess = live - window;
  const std::size_t candidates = live - (window + 1) / 2 - 1;
  std::vector<std::size_t> order(candidates);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return accumulated[a] < accumulated[b]; });
  order.resize(excess);
  return IndexSet::from_unsorted(std::move(order));
}

// ---- policy hooks --------------------------------------------------------

struct SessionInfo {
  std::size_t n_layers = 0;
  std::size_t system_count = 0;
  std::size_t vision_count = 0;
  std::size_t instruction_count = 0;
  std::size_t max_text_tokens = 0;
};

// Hook interface the decoder drives. One instance per session; all state
// beyond configuration lives in the caches' slot metadata.
class CachePolicy {
public:
  virtual ~CachePolicy() = default;
  virtual std::string name() const = 0;

  virtual void begin(const SessionInfo& info) { info_ = info; }

  // Called once with the layer kPruneFromLayer - 1 scores of the final prompt
  // position over all vision tokens. Returns the vision ordinals later layers
  // keep, or nullopt to keep everything.
  virtual std::optional<IndexSet> prune_vision(std::span<const float>) { return std::nullopt; }

  // After a layer has processed the whole prompt; `scores` is aligned with
  // the cache rows.
  virtual void after_prefill_layer(std::size_t /*layer*/, LayerKvCache& /*cache*/, std::span<const float>) {}

  virtual StepKind step_kind(std::size_t /*t*/) const { return StepKind::Normal; }

  virtual IndexSet select_used(const LayerKvCache& cache, StepKind) const { return IndexSet::range(cache.size()); }

  // After attention at decode step t; `scores` is aligned with `used`.
  // Changes made here affect step t + 1 onwards.
  virtual void after_decode_layer(std::size_t /*layer*/, std::size_t /*t*/, StepKind, LayerKvCache& /*cache*/,
                                  const IndexSet& /*used*/, std::span<const float>) {}

protected:
  SessionInfo info_;
};

class FullPolicy final : public CachePolicy {
public:
  std::string name() const override { return "full"; }
};

namespace detail {

inline std::vector<std::size_t> vision_ordinals(const LayerKvCache& cache, const IndexSet& rows,
                                                std::size_t system_count) {
  std::vector<std::size_t> out;
  out.reserve(rows.size());
  for (std::size_t r : rows) out.push_back(cache.meta(r).original_position - system_count);
  return out;
}

// Evicts live text slots beyond `window`.
inline void enforce_text_window(LayerKvCache& cache, std::size_t window) {
  const IndexSet text = cache.text_rows();
  std::vector<double> acc;
  acc.reserve(text.size());
  for (std::size_t r : text) acc.push_back(cache.meta(r).accumulated_score);
  const IndexSet drop = text_step(acc, window);
  if (drop.empty()) return;
  std::vector<std::size_t> rows;
  for (std::size_t i : drop) rows.push_back(text[i]);
  cache.evict(IndexSet(std::move(rows)));
}

}  // namespace detail

// Modality-aware policy: vision slots are split into core / secondary /
// minor per layer from the last prompt token's attention, only core slots
// are attended except every K-th step, and text slots live in a bounded
// window with accumulated-score eviction.
class AvlPolicy final : public CachePolicy {
public:
  explicit AvlPolicy(AvlPolicyConfig cfg) : cfg_(cfg) { cfg_.validate(); }

  std::string name() const override { return "avl"; }
  const AvlPolicyConfig& config() const noexcept { return cfg_; }
  std::size_t text_window() const noexcept { return window_; }

  void begin(const SessionInfo& info) override {
    CachePolicy::begin(info);
    window_ = text_window_size(cfg_.T_pct, info.max_text_tokens);
    if (window_ < 2) {
      throw ConfigError("text window " + std::to_string(window_) + " < 2 slots (T=" +
                        csv::format_number(cfg_.T_pct) + "%, max_text_tokens=" +
                        std::to_string(info.max_text_tokens) + ")");
    }
  }

  std::optional<IndexSet> prune_vision(std::span<const float> scores) override {
    return prefill_prune(scores, cfg_.P_pct);
  }

  void after_prefill_layer(std::size_t, LayerKvCache& cache, std::span<const float> scores) override {
    const IndexSet vision = cache.rows_of(Segment::Vision);
    if (!vision.empty()) {
      std::vector<float> vs;
      vs.reserve(vision.size());
      for (std::size_t r : vision) vs.push_back(scores[r]);
      const VisionClassification c = classify_vision(vs, cfg_, info_.vision_count);
      for (std::size_t i : c.core) cache.set_core(vision[i], true);
      std::vector<std::size_t> minor_rows;
      for (std::size_t i : c.minor) minor_rows.push_back(vision[i]);
      for (std::size_t r : cache.text_rows()) cache.add_score(r, scores[r]);
      cache.evict(IndexSet(std::move(minor_rows)));
    } else {
      for (std::size_t r : cache.text_rows()) cache.add_score(r, scores[r]);
    }
    detail::enforce_text_window(cache, window_);
  }

  StepKind step_kind(std::size_t t) const override {
    return is_update_step(t, cfg_.K) ? StepKind::Update : StepKind::Normal;
  }

  IndexSet select_used(const LayerKvCache& cache, StepKind kind) const override { return cache.used_set(kind); }

  void after_decode_layer(std::size_t, std::size_t t, StepKind kind, LayerKvCache& cache, const IndexSet& used,
                          std::span<const float> scores) override {
    if (kind == StepKind::Update) {
      const IndexSet vision = cache.rows_of(Segment::Vision);
      if (!vision.empty()) {
        std::vector<float> vs;
        vs.reserve(vision.size());
        std::size_t u = 0;
        for (std::size_t r : vision) {
          while (used[u] < r) ++u;
          vs.push_back(scores[u]);
        }
        const IndexSet secondary(detail::vision_ordinals(cache, vision, info_.system_count));
        const std::size_t n_core = percent_count(cfg_.C_pct, info_.vision_count, vision.size());
        const IndexSet core = update_core(secondary, vs, n_core, t, cfg_.K);
        for (std::size_t i = 0; i < vision.size(); ++i) cache.set_core(vision[i], core.contains(secondary[i]));
      }
    }
    for (std::size_t u = 0; u < used.size(); ++u) {
      if (is_text(cache.meta(used[u]).segment)) cache.add_score(used[u], scores[u]);
    }
    detail::enforce_text_window(cache, window_);
  }

private:
  AvlPolicyConfig cfg_;
  std::size_t window_ = 0;
};

// Heavy-hitter window over every non-system slot: the newest 75% of the
// window are kept, the rest of the window goes to the highest accumulated
// attention among older slots.
class H2oPolicy final : public CachePolicy {
public:
  explicit H2oPolicy(std::size_t window) : window_(window) {
    if (window_ < 1) throw ConfigError("h2o window must be >= 1");
    recent_ = (3 * window_ + 3) / 4;
    heavy_ = window_ - recent_;
  }

  std::string name() const override { return "h2o"; }
  std::size_t window() const noexcept { return window_; }
  std::size_t recent() const noexcept { return recent_; }
  std::size_t heavy() const noexcept { return heavy_; }

  void after_prefill_layer(std::size_t, LayerKvCache& cache, std::span<const float> scores) override {
    for (std::size_t r = 0; r < cache.size(); ++r) {
      if (cache.meta(r).segment != Segment::System) cache.add_score(r, scores[r]);
    }
    enforce(cache);
  }

  void after_decode_layer(std::size_t, std::size_t, StepKind, LayerKvCache& cache, const IndexSet& used,
                          std::span<const float> scores) override {
    for (std::size_t u = 0; u < used.size(); ++u) {
      if (cache.meta(used[u]).segment != Segment::System) cache.add_score(used[u], scores[u]);
    }
    enforce(cache);
  }

  void enforce(LayerKvCache& cache) const {
    std::vector<std::size_t> rows;
    for (std::size_t r = 0; r < cache.size(); ++r) {
      if (cache.meta(r).segment != Segment::System) rows.push_back(r);
    }
    if (rows.size() <= window_) return;
    const std::size_t older = rows.size() - recent_;
    std::vector<std::size_t> order(older);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return cache.meta(rows[a]).accumulated_score > cache.meta(rows[b]).accumulated_score;
    });
    std::vector<std::size_t> drop;
    for (std::size_t i = heavy_; i < older; ++i) drop.push_back(rows[order[i]]);
    cache.evict(IndexSet::from_unsorted(std::move(drop)));
  }

private:
  std::size_t window_;
  std::size_t recent_ = 0;
  std::size_t heavy_ = 0;
};

// Attention sinks plus a recent window. System slots are always kept.
class StreamingPolicy final : public CachePolicy {
public:
  StreamingPolicy(std::size_t sink, std::size_t recent) : sink_(sink), recent_(recent) {
    if (recent_ < 1) throw ConfigError("streaming recent window must be >= 1");
  }

  std::string name() const override { return "streaming"; }

  void after_prefill_layer(std::size_t, LayerKvCache& cache, std::span<const float>) override { enforce(cache); }
  void after_decode_layer(std::size_t, std::size_t, StepKind, LayerKvCache& cache, const IndexSet&,
                          std::span<const float>) override {
    enforce(cache);
  }

  void enforce(LayerKvCache& cache) const {
    const std::size_t n = cache.size();
    if (n <= sink_ + recent_) return;
    std::vector<std::size_t> drop;
    for (std::size_t r = sink_; r < n - recent_; ++r) {
      if (cache.meta(r).segment != Segment::System) drop.push_back(r);
    }
    cache.evict(IndexSet(std::move(drop)));
  }

private:
  std::size_t sink_;
  std::size_t recent_;
};

// Prefill-only vision pruning after the second layer; no decode-time policy.
class FastvPolicy final : public CachePolicy {
public:
  explicit FastvPolicy(double keep_pct) : keep_pct_(keep_pct) {
    if (!(keep_pct_ > 0.0 && keep_pct_ <= 100.0)) throw ConfigError("fastv_keep must be in (0, 100]");
  }
  std::string name() const override { return "fastv"; }
  std::optional<IndexSet> prune_vision(std::span<const float> scores) override {
    return prefill_prune(scores, keep_pct_);
  }

private:
  double keep_pct_;
};

// ---- configuration -------------------------------------------------------

struct PolicyConfig {
  std::string policy = "full";
  AvlPolicyConfig avl;
  std::size_t h2o_window = 64;
  std::size_t sink = 4;
  std::size_t recent = 64;
  double fastv_keep = 50.0;
};

inline PolicyConfig parse_policy_config(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("policy config must be a JSON object");
  PolicyConfig c;
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "policy") c.policy = value.get<std::string>();
      else if (key == "S") c.avl.S_pct = value.get<double>();
      else if (key == "C") c.avl.C_pct = value.get<double>();
      else if (key == "K") c.avl.K = value.get<std::size_t>();
      else if (key == "P") c.avl.P_pct = value.get<double>();
      else if (key == "T") c.avl.T_pct = value.get<double>();
      else if (key == "h2o_window") c.h2o_window = value.get<std::size_t>();
      else if (key == "sink") c.sink = value.get<std::size_t>();
      else if (key == "recent") c.recent = value.get<std::size_t>();
      else if (key == "fastv_keep") c.fastv_keep = value.get<double>();
      else throw ConfigError("unknown policy field '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("policy field '" + key + "': " + e.what());
    }
  }
  if (!j.contains("policy")) throw ConfigError("policy config needs a 'policy' field");
  return c;
}

inline nlohmann::json to_json(const PolicyConfig& c) {
  return {{"policy", c.policy},         {"S", c.avl.S_pct},   {"C", c.avl.C_pct},
          {"K", c.avl.K},               {"P", c.avl.P_pct},   {"T", c.avl.T_pct},
          {"h2o_window", c.h2o_window}, {"sink", c.sink},     {"recent", c.recent},
          {"fastv_keep", c.fastv_keep}};
}

inline std::unique_ptr<CachePolicy> make_policy(const PolicyConfig& c) {
  if (c.policy == "full") return std::make_unique<FullPolicy>();
  if (c.policy == "avl") return std::make_unique<AvlPolicy>(c.avl);
  if (c.policy == "h2o") return std::make_unique<H2oPolicy>(c.h2o_window);
  if (c.policy == "streaming") return std::make_unique<StreamingPolicy>(c.sink, c.recent);
  if (c.policy == "fastv") return std::make_unique<FastvPolicy>(c.fastv_keep);
  throw ConfigError("unknown policy '" + c.policy + "'");
}

}  // namespace modalkv
