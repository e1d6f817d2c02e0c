// Copyright 2026 The modalkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "modalkv/csv.hpp"
#include "modalkv/segment.hpp"
#include "modalkv/tensor.hpp"

namespace modalkv {

// Per-slot attention score: mean over heads of the softmaxed attention row
// of the last query position.
inline std::vector<float> attention_score(std::span<const std::vector<float>> per_head) {
  if (per_head.empty()) throw ShapeError("attention_score needs at least one head");
  const std::size_t n = per_head.front().size();
  std::vector<float> out(n, 0.0f);
  for (const auto& head : per_head) {
    if (head.size() != n) throw ShapeError("ragged head vectors");
    for (std::size_t j = 0; j < n; ++j) out[j] += head[j];
  }
  const float h = static_cast<float>(per_head.size());
  for (float& x : out) x /= h;
  return out;
}

// Same, for heads stored as rows of a matrix.
inline std::vector<float> attention_score(const Matrix& per_head) {
  if (per_head.rows() == 0) throw ShapeError("attention_score needs at least one head");
  std::vector<float> out(per_head.cols(), 0.0f);
  for (std::size_t h = 0; h < per_head.rows(); ++h) {
    auto r = per_head.row(h);
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += r[j];
  }
  const float hs = static_cast<float>(per_head.rows());
  for (float& x : out) x /= hs;
  return out;
}

// round-half-up(pct/100 * count) clamped to [1, upper]. Used for every
// percentage-derived set size.
inline std::size_t percent_count(double pct, std::size_t count, std::size_t upper) {
  const double raw = std::floor(pct * static_cast<double>(count) / 100.0 + 0.5);
  std::size_t n = raw < 1.0 ? 1 : static_cast<std::size_t>(raw);
  return std::min(n, std::max<std::size_t>(upper, 1));
}

// Positions of the `m` largest scores, ties to the lower index, as an
// ascending set.
template <class T>
IndexSet top_k(std::span<const T> scores, std::size_t m) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  m = std::min(m, order.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(m), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (scores[a] != scores[b]) return scores[a] > scores[b];
                      return a < b;
                    });
  order.resize(m);
  return IndexSet::from_unsorted(std::move(order));
}

inline std::size_t ppci_top_size(std::size_t n, double p_pct) { return percent_count(p_pct, n, n); }

// Fraction of the top-p% set shared by two score vectors over the same tokens.
inline double ppci(std::span<const float> s1, std::span<const float> s2, double p_pct) {
  if (s1.size() != s2.size()) throw ShapeError("ppci vectors differ in length");
  if (s1.empty()) throw ShapeError("ppci over zero tokens");
  if (!(p_pct > 0.0 && p_pct <= 100.0)) throw ConfigError("ppci percentile must be in (0, 100]");
  const std::size_t m = ppci_top_size(s1.size(), p_pct);
  const IndexSet t1 = top_k(s1, m);
  const IndexSet t2 = top_k(s2, m);
  std::size_t common = 0;
  std::size_t i = 0, j = 0;
  while (i < t1.size() && j < t2.size()) {
    if (t1[i] == t2[j]) {
      ++common, ++i, ++j;
    } else if (t1[i] < t2[j]) {
      ++i;
    } else {
      ++j;
    }
  }
  return static_cast<double>(common) / static_cast<double>(m);
}

using SegmentShares = std::array<double, kSegmentCount>;

inline SegmentShares segment_shares(std::span<const float> scores, std::span<const Segment> segments) {
  if (scores.size() != segments.size()) {
    throw MappingError("segment map covers " + std::to_string(segments.size()) + " of " +
                       std::to_string(scores.size()) + " slots");
  }
  SegmentShares out{};
  for (std::size_t i = 0; i < scores.size(); ++i) out[static_cast<std::size_t>(segments[i])] += scores[i];
  return out;
}

// ---- FLOP accounting -----------------------------------------------------
//
// Per layer and decode step with n attended slots:
//   QK^T  2 * d_model * n    (H heads x d_head multiply-adds per slot)
//   softmax  5 * H * n       (max, subtract, exp, sum, divide)
//   PV    2 * d_model * n
// Every term is linear in n, so the used/full FLOP ratio equals the used/full
// slot ratio.
inline constexpr std::uint64_t kSoftmaxFlopsPerScore = 5;

struct AttentionFlops {
  std::uint64_t qk = 0;
  std::uint64_t softmax = 0;
  std::uint64_t pv = 0;
  std::uint64_t total() const noexcept { return qk + softmax + pv; }
};

inline AttentionFlops attention_flops(std::uint64_t slots, std::uint64_t d_model, std::uint64_t heads) {
  return {2 * d_model * slots, kSoftmaxFlopsPerScore * heads * slots, 2 * d_model * slots};
}

// ---- traces --------------------------------------------------------------

struct TraceSlot {
  std::size_t position = 0;
  Segment segment = Segment::System;
  bool operator==(const TraceSlot&) const = default;
};

// Scores over the slots attended by the last query at one (layer, step).
// Step 0 is the prefill; decode steps count from 1.
struct TraceEntry {
  std::size_t layer = 0;
  std::size_t step = 0;
  std::vector<TraceSlot> slots;
  std::vector<float> scores;
  // Only filled in verbose mode: H rows over `slots`.
  std::optional<Matrix> head_weights;
};

struct AttentionTrace {
  std::vector<TraceEntry> entries;
  bool truncated = false;

  const TraceEntry* find(std::size_t layer, std::size_t step) const {
    for (const auto& e : entries) {
      if (e.layer == layer && e.step == step) return &e;
    }
    return nullptr;
  }

  std::size_t max_layer() const {
    std::size_t m = 0;
    for (const auto& e : entries) m = std::max(m, e.layer);
    return m;
  }
  std::size_t max_step() const {
    std::size_t m = 0;
    for (const auto& e : entries) m = std::max(m, e.step);
    return m;
  }
};

inline SegmentShares segment_shares(const TraceEntry& e) {
  std::vector<Segment> segs;
  segs.reserve(e.slots.size());
  for (const auto& s : e.slots) segs.push_back(s.segment);
  return segment_shares(e.scores, segs);
}

inline constexpr std::string_view kTraceHeader = "layer,step,slot_position,segment,score";
inline constexpr std::string_view kTruncationMarker = "# truncated";

// `row_limit` (0 = unlimited) caps data rows; a marker line follows when hit.
inline std::string write_trace_csv(const AttentionTrace& trace, std::size_t row_limit = 0) {
  std::string out(kTraceHeader);
  out += '\n';
  std::size_t rows = 0;
  bool truncated = trace.truncated;
  for (const auto& e : trace.entries) {
    for (std::size_t i = 0; i < e.slots.size(); ++i) {
      if (row_limit && rows == row_limit) {
        truncated = true;
        break;
      }
      out += std::to_string(e.layer) + ',' + std::to_string(e.step) + ',' + std::to_string(e.slots[i].position) +
             ',' + std::string(to_string(e.slots[i].segment)) + ',' + csv::format_number(e.scores[i]) + '\n';
      ++rows;
    }
    if (truncated) break;
  }
  if (truncated) {
    out += kTruncationMarker;
    out += '\n';
  }
  return out;
}

inline AttentionTrace parse_trace_csv(const std::string& text, const std::string& path = "<trace>") {
  const auto ls = csv::lines(text);
  if (ls.empty() || ls[0] != kTraceHeader) throw ParseError(path + ":1: unexpected trace header");
  AttentionTrace t;
  std::map<std::pair<std::size_t, std::size_t>, std::size_t> index;
  for (std::size_t i = 1; i < ls.size(); ++i) {
    const std::string& line = ls[i];
    if (line.empty()) continue;
    const std::string where = path + ":" + std::to_string(i + 1);
    if (line.rfind(kTruncationMarker, 0) == 0) {
      t.truncated = true;
      continue;
    }
    const auto f = csv::split(line);
    if (f.size() != 5) throw ParseError(where + ": expected 5 fields, got " + std::to_string(f.size()));
    const auto layer = csv::parse_number<std::size_t>(f[0], where);
    const auto step = csv::parse_number<std::size_t>(f[1], where);
    TraceSlot slot{csv::parse_number<std::size_t>(f[2], where), Segment::System};
    try {
      slot.segment = parse_segment(f[3]);
    } catch (const MappingError& e) {
      throw ParseError(where + ": " + e.what());
    }
    const float score = csv::parse_number<float>(f[4], where);
    if (!std::isfinite(score) || score < 0.0f) throw ParseError(where + ": score out of range");
    auto [it, inserted] = index.try_emplace({layer, step}, t.entries.size());
    if (inserted) t.entries.push_back(TraceEntry{layer, step, {}, {}, std::nullopt});
    TraceEntry& e = t.entries[it->second];
    if (!e.slots.empty() && slot.position <= e.slots.back().position) {
      throw ParseError(where + ": slot positions must ascend within an entry");
    }
    e.slots.push_back(slot);
    e.scores.push_back(score);
  }
  return t;
}

// ---- PPCI tables ---------------------------------------------------------

enum class PpciAnchor { Layer, Step };

struct PpciCell {
  std::size_t layer = 0;
  std::size_t step = 0;
  std::size_t anchor_layer = 0;
  std::size_t anchor_step = 0;
  std::size_t common_slots = 0;
  // Compared entries held different slot sets; scores were restricted to
  // the shared positions.
  bool restricted = false;
  double ppci = 0.0;
};

struct PpciOptions {
  double p_pct = 50.0;
  // Anchor layer (Layer mode) or anchor step (Step mode).
  std::size_t anchor = 0;
  std::optional<Segment> segment;
};

namespace detail {

inline std::vector<std::pair<std::size_t, float>> select_slots(const TraceEntry& e, std::optional<Segment> seg) {
  std::vector<std::pair<std::size_t, float>> out;
  for (std::size_t i = 0; i < e.slots.size(); ++i) {
    if (!seg || e.slots[i].segment == *seg) out.emplace_back(e.slots[i].position, e.scores[i]);
  }
  return out;
}

inline PpciCell compare_entries(const TraceEntry& anchor, const TraceEntry& other, const PpciOptions& opt) {
  const auto a = select_slots(anchor, opt.segment);
  const auto b = select_slots(other, opt.segment);
  std::vector<float> sa, sb;
  std::size_t i = 0, j = 0;
  while (i < a.size() && j < b.size()) {
    if (a[i].first == b[j].first) {
      sa.push_back(a[i].second);
      sb.push_back(b[j].second);
      ++i, ++j;
    } else if (a[i].first < b[j].first) {
      ++i;
    } else {
      ++j;
    }
  }
  PpciCell c;
  c.layer = other.layer;
  c.step = other.step;
  c.anchor_layer = anchor.layer;
  c.anchor_step = anchor.step;
  c.common_slots = sa.size();
  c.restricted = sa.size() != a.size() || sb.size() != b.size();
  c.ppci = sa.empty() ? 0.0 : ppci(sa, sb, opt.p_pct);
  return c;
}

}  // namespace detail

// Layer mode: for every step, PPCI of the anchor layer against each layer.
// Step mode: for every layer, PPCI of the anchor step against each step.
inline std::vector<PpciCell> ppci_matrix(const AttentionTrace& trace, PpciAnchor mode, const PpciOptions& opt) {
  std::vector<PpciCell> out;
  const std::size_t layers = trace.max_layer() + 1;
  const std::size_t steps = trace.max_step() + 1;
  if (mode == PpciAnchor::Layer) {
    for (std::size_t t = 0; t < steps; ++t) {
      const TraceEntry* anchor = trace.find(opt.anchor, t);
      if (!anchor) continue;
      for (std::size_t l = 0; l < layers; ++l) {
        if (const TraceEntry* e = trace.find(l, t)) out.push_back(detail::compare_entries(*anchor, *e, opt));
      }
    }
  } else {
    for (std::size_t l = 0; l < layers; ++l) {
      const TraceEntry* anchor = trace.find(l, opt.anchor);
      if (!anchor) continue;
      for (std::size_t t = 0; t < steps; ++t) {
        if (const TraceEntry* e = trace.find(l, t)) out.push_back(detail::compare_entries(*anchor, *e, opt));
      }
    }
  }
  return out;
}

inline constexpr std::string_view kPpciHeader = "anchor_layer,anchor_step,layer,step,common_slots,restricted,ppci";

inline std::string write_ppci_csv(const std::vector<PpciCell>& cells) {
  std::string out(kPpciHeader);
  out += '\n';
  for (const auto& c : cells) {
    out += std::to_string(c.anchor_layer) + ',' + std::to_string(c.anchor_step) + ',' + std::to_string(c.layer) +
           ',' + std::to_string(c.step) + ',' + std::to_string(c.common_slots) + ',' +
           (c.restricted ? "1" : "0") + ',' + csv::format_number(c.ppci) + '\n';
  }
  return out;
}

inline constexpr std::string_view kSharesHeader = "layer,step,system,vision,instruction,generated";

inline std::string write_segment_shares_csv(const AttentionTrace& trace) {
  std::string out(kSharesHeader);
  out += '\n';
  for (const auto& e : trace.entries) {
    const SegmentShares s = segment_shares(e);
    out += std::to_string(e.layer) + ',' + std::to_string(e.step);
    for (double v : s) out += ',' + csv::format_number(v);
    out += '\n';
  }
  return out;
}

// Mean share per segment at each step, averaged over layers.
inline constexpr std::string_view kSharesMeanHeader = "step,layers,system,vision,instruction,generated";

inline std::string write_segment_shares_mean_csv(const AttentionTrace& trace) {
  std::map<std::size_t, std::pair<std::size_t, SegmentShares>> by_step;
  for (const auto& e : trace.entries) {
    auto& [n, acc] = by_step[e.step];
    const SegmentShares s = segment_shares(e);
    for (std::size_t i = 0; i < kSegmentCount; ++i) acc[i] += s[i];
    ++n;
  }
  std::string out(kSharesMeanHeader);
  out += '\n';
  for (const auto& [step, v] : by_step) {
    out += std::to_string(step) + ',' + std::to_string(v.first);
    for (double x : v.second) out += ',' + csv::format_number(x / static_cast<double>(v.first));
    out += '\n';
  }
  return out;
}

}  // namespace modalkv
