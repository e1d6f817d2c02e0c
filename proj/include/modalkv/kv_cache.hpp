// Copyright 2026 The modalkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "modalkv/csv.hpp"
#include "modalkv/segment.hpp"
#include "modalkv/tensor.hpp"

namespace modalkv {

enum class StepKind { Normal, Update };

struct SlotMeta {
  std::size_t original_position = 0;
  Segment segment = Segment::System;
  bool is_core = false;
  // Running attention mass. The avl policy tracks it for text slots; h2o for every
  // non-system slot.
  double accumulated_score = 0.0;

  bool operator==(const SlotMeta&) const = default;
};

// Key/value rows for one decoder layer with per-slot metadata. Eviction
// compacts rows; original positions survive in `meta`.
class LayerKvCache {
public:
  LayerKvCache() = default;
  explicit LayerKvCache(std::size_t width) : keys_(0, width), values_(0, width), width_(width) {}

  std::size_t width() const noexcept { return width_; }
  std::size_t size() const noexcept { return meta_.size(); }
  const Matrix& keys() const noexcept { return keys_; }
  const Matrix& values() const noexcept { return values_; }
  const std::vector<SlotMeta>& meta() const noexcept { return meta_; }
  const SlotMeta& meta(std::size_t row) const { return meta_.at(row); }
  std::size_t evicted_total() const noexcept { return evicted_; }

  void append(std::span<const float> key, std::span<const float> value, SlotMeta m) {
    if (key.size() != width_ || value.size() != width_) {
      throw ShapeError("kv append width " + std::to_string(key.size()) + "/" + std::to_string(value.size()) +
                       " != " + std::to_string(width_));
    }
    if (!meta_.empty() && m.original_position <= meta_.back().original_position) {
      throw StateError("kv append position " + std::to_string(m.original_position) +
                       " not after " + std::to_string(meta_.back().original_position));
    }
    if (m.is_core && m.segment != Segment::Vision) throw StateError("core flag on non-vision slot");
    keys_.append_row(key);
    values_.append_row(value);
    meta_.push_back(m);
  }

  void evict(const IndexSet& rows) {
    rows.check_bound(size());
    if (rows.empty()) return;
    keys_.erase_rows(rows.view());
    values_.erase_rows(rows.view());
    std::size_t write = 0, next = 0;
    for (std::size_t r = 0; r < meta_.size(); ++r) {
      if (next < rows.size() && rows[next] == r) {
        ++next;
        continue;
      }
      meta_[write++] = meta_[r];
    }
    meta_.resize(write);
    evicted_ += rows.size();
  }

  void set_core(std::size_t row, bool core) {
    SlotMeta& m = meta_.at(row);
    if (core && m.segment != Segment::Vision) throw StateError("core flag on non-vision slot");
    m.is_core = core;
  }

  void add_score(std::size_t row, double score) {
    if (score < 0.0) throw StateError("negative attention score");
    meta_.at(row).accumulated_score += score;
  }

  // Slots that take part in attention. Normal steps use core vision slots
  // only; update steps use every stored vision slot.
  IndexSet used_set(StepKind kind) const {
    std::vector<std::size_t> rows;
    rows.reserve(meta_.size());
    for (std::size_t r = 0; r < meta_.size(); ++r) {
      const SlotMeta& m = meta_[r];
      if (m.segment != Segment::Vision || kind == StepKind::Update || m.is_core) rows.push_back(r);
    }
    return IndexSet(std::move(rows));
  }

  IndexSet rows_of(Segment seg) const {
    std::vector<std::size_t> rows;
    for (std::size_t r = 0; r < meta_.size(); ++r) {
      if (meta_[r].segment == seg) rows.push_back(r);
    }
    return IndexSet(std::move(rows));
  }

  IndexSet text_rows() const {
    std::vector<std::size_t> rows;
    for (std::size_t r = 0; r < meta_.size(); ++r) {
      if (is_text(meta_[r].segment)) rows.push_back(r);
    }
    return IndexSet(std::move(rows));
  }

  std::size_t count(Segment seg) const noexcept {
    std::size_t n = 0;
    for (const auto& m : meta_) n += (m.segment == seg);
    return n;
  }

  std::array<std::uint64_t, kSegmentCount> segment_counts() const noexcept {
    std::array<std::uint64_t, kSegmentCount> c{};
    for (const auto& m : meta_) ++c[static_cast<std::size_t>(m.segment)];
    return c;
  }

private:
  Matrix keys_;
  Matrix values_;
  std::vector<SlotMeta> meta_;
  std::size_t width_ = 0;
  std::size_t evicted_ = 0;
};

using SegmentCounts = std::array<std::uint64_t, kSegmentCount>;

inline std::uint64_t total(const SegmentCounts& c) noexcept {
  std::uint64_t t = 0;
  for (auto v : c) t += v;
  return t;
}

// One (layer, decode step) observation. `full_slots` is the slot count a
// full-cache run would hold at the same point.
struct StepRecord {
  std::size_t layer = 0;
  std::size_t step = 0;
  std::uint64_t full_slots = 0;
  SegmentCounts stored{};
  SegmentCounts used{};
  std::uint64_t attn_flops = 0;
  std::uint64_t full_attn_flops = 0;

  bool operator==(const StepRecord&) const = default;
};

// Event log of a session; stats are always recomputed from it.
struct SessionCounters {
  std::vector<StepRecord> steps;
  std::uint64_t evicted_slots = 0;
};

struct CacheStats {
  std::uint64_t full_slots = 0;
  std::uint64_t stored_slots = 0;
  std::uint64_t used_slots = 0;
  std::uint64_t attn_flops = 0;
  std::uint64_t full_attn_flops = 0;
  SegmentCounts stored_by_segment{};
  SegmentCounts used_by_segment{};
  std::uint64_t evicted_slots = 0;
  std::size_t records = 0;

  double stored_fraction = 0.0;
  double used_fraction = 0.0;
  double attention_flops_ratio = 0.0;

  double stored_segment_fraction(Segment s) const {
    return full_slots ? static_cast<double>(stored_by_segment[static_cast<std::size_t>(s)]) / full_slots : 0.0;
  }
  double used_segment_fraction(Segment s) const {
    return full_slots ? static_cast<double>(used_by_segment[static_cast<std::size_t>(s)]) / full_slots : 0.0;
  }
};

// Fractions are ratios of slot sums over all (layer, decode step) records;
// the denominator is the full-cache counterfactual for the same run.
inline CacheStats collect_stats(const SessionCounters& counters) {
  if (counters.steps.empty()) throw StateError("collect_stats needs at least one decode step");
  CacheStats s;
  for (const StepRecord& r : counters.steps) {
    s.full_slots += r.full_slots;
    s.stored_slots += total(r.stored);
    s.used_slots += total(r.used);
    s.attn_flops += r.attn_flops;
    s.full_attn_flops += r.full_attn_flops;
    for (std::size_t i = 0; i < kSegmentCount; ++i) {
      s.stored_by_segment[i] += r.stored[i];
      s.used_by_segment[i] += r.used[i];
    }
  }
  s.records = counters.steps.size();
  s.evicted_slots = counters.evicted_slots;
  s.stored_fraction = static_cast<double>(s.stored_slots) / static_cast<double>(s.full_slots);
  s.used_fraction = static_cast<double>(s.used_slots) / static_cast<double>(s.full_slots);
  s.attention_flops_ratio = static_cast<double>(s.attn_flops) / static_cast<double>(s.full_attn_flops);
  return s;
}

// ---- stats CSV -------------------------------------------------------------

inline constexpr std::string_view kStatsHeader =
    "policy,layer,step,full_slots,stored_slots,used_slots,stored_system,stored_vision,stored_instruction,"
    "stored_generated,used_system,used_vision,used_instruction,used_generated,attn_flops,full_attn_flops,"
    "stored_fraction,used_fraction";

struct StatsTable {
  std::string policy;
  SessionCounters counters;
};

namespace detail {

inline void append_stats_row(std::string& out, const std::string& policy, const std::string& layer,
                             const std::string& step, std::uint64_t full, const SegmentCounts& stored,
                             const SegmentCounts& used, std::uint64_t flops, std::uint64_t full_flops) {
  using csv::format_number;
  const auto st = total(stored), us = total(used);
  out += policy + ',' + layer + ',' + step + ',' + format_number(full) + ',' + format_number(st) + ',' +
         format_number(us);
  for (auto v : stored) out += ',' + format_number(v);
  for (auto v : used) out += ',' + format_number(v);
  out += ',' + format_number(flops) + ',' + format_number(full_flops);
  out += ',' + format_number(static_cast<double>(st) / static_cast<double>(full));
  out += ',' + format_number(static_cast<double>(us) / static_cast<double>(full));
  out += '\n';
}

}  // namespace detail

// One row per (layer, step) plus a trailing summary row (layer = step = "all")
// whose fraction columns are the run's stored/used cache fractions.
inline std::string write_stats_csv(const StatsTable& t) {
  std::string out(kStatsHeader);
  out += '\n';
  for (const StepRecord& r : t.counters.steps) {
    detail::append_stats_row(out, t.policy, std::to_string(r.layer), std::to_string(r.step), r.full_slots,
                             r.stored, r.used, r.attn_flops, r.full_attn_flops);
  }
  const CacheStats s = collect_stats(t.counters);
  detail::append_stats_row(out, t.policy, "all", "all", s.full_slots, s.stored_by_segment, s.used_by_segment,
                           s.attn_flops, s.full_attn_flops);
  return out;
}

inline StatsTable parse_stats_csv(const std::string& text, const std::string& path = "<stats>") {
  const auto ls = csv::lines(text);
  if (ls.empty() || ls[0] != kStatsHeader) throw ParseError(path + ":1: unexpected stats header");
  StatsTable t;
  bool summary = false;
  for (std::size_t i = 1; i < ls.size(); ++i) {
    if (ls[i].empty()) continue;
    const std::string where = path + ":" + std::to_string(i + 1);
    const auto f = csv::split(ls[i]);
    if (f.size() != 18) throw ParseError(where + ": expected 18 fields");
    if (summary) throw ParseError(where + ": data after summary row");
    t.policy = f[0];
    if (f[1] == "all") {
      summary = true;
      continue;
    }
    StepRecord r;
    r.layer = csv::parse_number<std::size_t>(f[1], where);
    r.step = csv::parse_number<std::size_t>(f[2], where);
    r.full_slots = csv::parse_number<std::uint64_t>(f[3], where);
    for (std::size_t s = 0; s < kSegmentCount; ++s) {
      r.stored[s] = csv::parse_number<std::uint64_t>(f[6 + s], where);
      r.used[s] = csv::parse_number<std::uint64_t>(f[10 + s], where);
    }
    r.attn_flops = csv::parse_number<std::uint64_t>(f[14], where);
    r.full_attn_flops = csv::parse_number<std::uint64_t>(f[15], where);
    t.counters.steps.push_back(r);
  }
  if (!summary) throw ParseError(path + ": missing summary row");
  return t;
}

}  // namespace modalkv
