// Copyright 2026 The modalkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "modalkv/csv.hpp"
#include "modalkv/decoder.hpp"
#include "modalkv/metrics.hpp"
#include "modalkv/model.hpp"
#include "modalkv/policies.hpp"

namespace modalkv::harness {

namespace fs = std::filesystem;

struct RunSpec {
  ModelConfig model;
  std::optional<fs::path> weights_path;  // overrides model + seed when set
  std::uint64_t seed = 0;
  fs::path prompt_path;
  PolicyConfig policy;
  std::size_t max_new_tokens = 16;
  bool trace = false;
  std::size_t trace_row_limit = 0;
  bool save_weights = false;
  fs::path out_dir = ".";
};

inline DecoderWeights resolve_weights(const RunSpec& spec) {
  if (spec.weights_path) return load_weights(*spec.weights_path);
  return init_weights(spec.model, spec.seed);
}

// Accepts inline JSON, a path to a JSON file, or a bare policy name.
inline PolicyConfig resolve_policy(const std::string& arg) {
  if (!arg.empty() && arg.front() == '{') {
    try {
      return parse_policy_config(nlohmann::json::parse(arg));
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError(std::string("inline policy: ") + e.what());
    }
  }
  if (fs::exists(arg)) {
    try {
      return parse_policy_config(read_json_file(arg));
    } catch (const ConfigError& e) {
      throw ConfigError(arg + ": " + e.detail());
    }
  }
  PolicyConfig c;
  c.policy = arg;
  make_policy(c);  // rejects unknown names
  return c;
}

inline std::string format_tokens(const std::vector<TokenId>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += std::to_string(tokens[i]);
  }
  return out;
}

inline GenerationResult run_once(const DecoderWeights& w, const SegmentedPrompt& prompt, const PolicyConfig& pc,
                                 std::size_t max_new, bool trace) {
  auto policy = make_policy(pc);
  RunOptions opt;
  opt.record_trace = trace;
  return generate(w, prompt, *policy, {max_new, true}, opt);
}

// Writes tokens.txt, stats.csv and, on request, trace.csv and weights.bin.
inline GenerationResult cmd_generate(const RunSpec& spec) {
  const DecoderWeights w = resolve_weights(spec);
  const SegmentedPrompt prompt = load_prompt(spec.prompt_path, w.config.d_model);
  GenerationResult res = run_once(w, prompt, spec.policy, spec.max_new_tokens, spec.trace);
  if (spec.save_weights) save_weights(w, spec.out_dir / "weights.bin");
  csv::write_file_atomic(spec.out_dir / "tokens.txt", format_tokens(res.tokens) + "\n");
  csv::write_file_atomic(spec.out_dir / "stats.csv", write_stats_csv({spec.policy.policy, res.counters}));
  if (spec.trace) csv::write_file_atomic(spec.out_dir / "trace.csv", write_trace_csv(*res.trace, spec.trace_row_limit));
  return res;
}

// ---- compare -------------------------------------------------------------

struct CompareRow {
  std::string policy;
  std::vector<TokenId> tokens;
  double stored_fraction = 0.0;
  double used_fraction = 0.0;
  double attention_flops_ratio = 0.0;
  std::size_t exact_prefix = 0;
  // Index of the first token that differs from the full baseline; -1 if none.
  long first_divergence = -1;

  bool operator==(const CompareRow&) const = default;
};

struct LabeledPolicy {
  std::string label;
  PolicyConfig config;
};

inline constexpr std::string_view kCompareHeader =
    "policy,tokens,stored_fraction,used_fraction,attention_flops_ratio,exact_prefix,first_divergence";

// One run per policy on the same weights and prompt. A full baseline is
// added when absent; rows are sorted by label.
inline std::vector<CompareRow> compare_policies(const DecoderWeights& w, const SegmentedPrompt& prompt,
                                                std::vector<LabeledPolicy> policies, std::size_t max_new) {
  if (policies.size() < 2) throw ConfigError("compare needs at least two policies");
  if (std::none_of(policies.begin(), policies.end(), [](const auto& p) { return p.config.policy == "full"; })) {
    policies.push_back({"full", PolicyConfig{}});
  }
  const std::vector<TokenId> reference = run_once(w, prompt, PolicyConfig{}, max_new, false).tokens;
  std::vector<CompareRow> rows;
  for (const auto& lp : policies) {
    const GenerationResult r = run_once(w, prompt, lp.config, max_new, false);
    CompareRow row;
    row.policy = lp.label;
    row.tokens = r.tokens;
    row.stored_fraction = r.stats.stored_fraction;
    row.used_fraction = r.stats.used_fraction;
    row.attention_flops_ratio = r.stats.attention_flops_ratio;
    const std::size_t n = std::min(r.tokens.size(), reference.size());
    while (row.exact_prefix < n && r.tokens[row.exact_prefix] == reference[row.exact_prefix]) ++row.exact_prefix;
    if (row.exact_prefix < std::max(r.tokens.size(), reference.size())) {
      row.first_divergence = static_cast<long>(row.exact_prefix);
    }
    rows.push_back(std::move(row));
  }
  std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.policy < b.policy; });
  return rows;
}

inline std::string write_compare_csv(const std::vector<CompareRow>& rows) {
  std::string out(kCompareHeader);
  out += '\n';
  for (const auto& r : rows) {
    out += r.policy + ',' + format_tokens(r.tokens) + ',' + csv::format_number(r.stored_fraction) + ',' +
           csv::format_number(r.used_fraction) + ',' + csv::format_number(r.attention_flops_ratio) + ',' +
           std::to_string(r.exact_prefix) + ',' + std::to_string(r.first_divergence) + '\n';
  }
  return out;
}

inline std::vector<CompareRow> parse_compare_csv(const std::string& text, const std::string& path = "<compare>") {
  const auto ls = csv::lines(text);
  if (ls.empty() || ls[0] != kCompareHeader) throw ParseError(path + ":1: unexpected compare header");
  std::vector<CompareRow> rows;
  for (std::size_t i = 1; i < ls.size(); ++i) {
    if (ls[i].empty()) continue;
    const std::string where = path + ":" + std::to_string(i + 1);
    const auto f = csv::split(ls[i]);
    if (f.size() != 7) throw ParseError(where + ": expected 7 fields");
    CompareRow r;
    r.policy = f[0];
    std::size_t start = 0;
    while (start < f[1].size()) {
      std::size_t end = f[1].find(' ', start);
      if (end == std::string::npos) end = f[1].size();
      r.tokens.push_back(csv::parse_number<TokenId>(std::string_view(f[1]).substr(start, end - start), where));
      start = end + 1;
    }
    r.stored_fraction = csv::parse_number<double>(f[2], where);
    r.used_fraction = csv::parse_number<double>(f[3], where);
    r.attention_flops_ratio = csv::parse_number<double>(f[4], where);
    r.exact_prefix = csv::parse_number<std::size_t>(f[5], where);
    r.first_divergence = csv::parse_number<long>(f[6], where);
    rows.push_back(std::move(r));
  }
  return rows;
}

// `policy_args` entries go through resolve_policy; duplicate labels get a
// "#n" suffix.
inline std::vector<CompareRow> cmd_compare(const RunSpec& spec, const std::vector<std::string>& policy_args) {
  const DecoderWeights w = resolve_weights(spec);
  const SegmentedPrompt prompt = load_prompt(spec.prompt_path, w.config.d_model);
  std::vector<LabeledPolicy> ps;
  for (const auto& arg : policy_args) {
    PolicyConfig c = resolve_policy(arg);
    std::string label = (!arg.empty() && arg.front() == '{') ? c.policy : fs::path(arg).stem().string();
    const auto dup = std::count_if(ps.begin(), ps.end(), [&](const auto& p) {
      return p.label == label || p.label.rfind(label + "#", 0) == 0;
    });
    if (dup) label += "#" + std::to_string(dup + 1);
    ps.push_back({label, c});
  }
  auto rows = compare_policies(w, prompt, std::move(ps), spec.max_new_tokens);
  csv::write_file_atomic(spec.out_dir / "compare.csv", write_compare_csv(rows));
  return rows;
}

// ---- analyze -------------------------------------------------------------

enum class AnalyzeMode { Segments, PpciLayers, PpciSteps };

inline AnalyzeMode parse_analyze_mode(const std::string& s) {
  if (s == "segments") return AnalyzeMode::Segments;
  if (s == "ppci-layers") return AnalyzeMode::PpciLayers;
  if (s == "ppci-steps") return AnalyzeMode::PpciSteps;
  throw ConfigError("unknown analyze mode '" + s + "'");
}

struct AnalyzeSpec {
  fs::path trace_path;
  AnalyzeMode mode = AnalyzeMode::Segments;
  PpciOptions ppci;
  fs::path out_dir = ".";
};

// Returns the paths written.
inline std::vector<fs::path> cmd_analyze(const AnalyzeSpec& spec) {
  if (!fs::exists(spec.trace_path)) throw ParseError("trace file not found: " + spec.trace_path.string());
  const AttentionTrace trace = parse_trace_csv(csv::read_file(spec.trace_path), spec.trace_path.string());
  std::vector<fs::path> written;
  switch (spec.mode) {
    case AnalyzeMode::Segments:
      written.push_back(spec.out_dir / "segments.csv");
      csv::write_file_atomic(written.back(), write_segment_shares_csv(trace));
      written.push_back(spec.out_dir / "segments_mean.csv");
      csv::write_file_atomic(written.back(), write_segment_shares_mean_csv(trace));
      break;
    case AnalyzeMode::PpciLayers:
      written.push_back(spec.out_dir / "ppci_layers.csv");
      csv::write_file_atomic(written.back(), write_ppci_csv(ppci_matrix(trace, PpciAnchor::Layer, spec.ppci)));
      break;
    case AnalyzeMode::PpciSteps:
      written.push_back(spec.out_dir / "ppci_steps.csv");
      csv::write_file_atomic(written.back(), write_ppci_csv(ppci_matrix(trace, PpciAnchor::Step, spec.ppci)));
      break;
  }
  return written;
}

// ---- bench ---------------------------------------------------------------

struct BenchSpec {
  std::vector<std::size_t> dims{2048};
  std::vector<double> ratios{0.3};
  std::vector<std::size_t> batches{1, 8, 32};
  std::size_t iterations = 100;
  std::size_t warmup = 10;
  std::uint64_t seed = 0;
  GemmOptions gemm;
};

struct BenchRow {
  std::size_t d = 0;
  double ratio = 0.0;
  std::size_t batch = 0;
  std::size_t selected = 0;
  std::size_t iterations = 0;
  double full_ms = 0.0;
  double slice_ms = 0.0;
  double indexed_ms = 0.0;
};

inline constexpr std::string_view kBenchHeader = "d,ratio,batch,selected,iterations,full_ms,slice_ms,indexed_ms";

// Per-element |x - y| <= rel * max(|x|, |y|).
inline bool agree_relative(const Matrix& a, const Matrix& b, double rel) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i], dy = y[i];
    if (std::abs(dx - dy) > rel * std::max(std::abs(dx), std::abs(dy))) return false;
  }
  return true;
}

// Random ascending subset of [0, n) with `k` members.
inline IndexSet random_subset(Rng64& rng, std::size_t n, std::size_t k) {
  std::vector<std::size_t> all(n);
  for (std::size_t i = 0; i < n; ++i) all[i] = i;
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.next() % (n - i));
    std::swap(all[i], all[j]);
  }
  all.resize(k);
  return IndexSet::from_unsorted(std::move(all));
}

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Queries (batch x d) against a cache of d rows of width d: full product,
// gather-then-multiply, and the indexed kernel. Variants run interleaved on
// every iteration so drift affects all three alike.
inline BenchRow bench_cell(std::size_t d, double ratio, std::size_t batch, const BenchSpec& spec) {
  Rng64 rng(spec.seed ^ (d * 0x100000001B3ULL) ^ (batch << 20));
  Matrix q(batch, d), cache(d, d);
  for (float& x : q.data()) x = rng.uniform(-1.0f, 1.0f);
  for (float& x : cache.data()) x = rng.uniform(-1.0f, 1.0f);
  const std::size_t selected = percent_count(ratio * 100.0, d, d);
  const IndexSet idx = random_subset(rng, d, selected);

  const Matrix ref_indexed = indexed_gemm_rows(q, cache, idx, spec.gemm);
  const Matrix ref_slice = matmul_nt(q, gather_rows(cache, idx), spec.gemm);
  if (!agree_relative(ref_indexed, ref_slice, 1e-6)) {
    throw Error("bench: indexed and slice-then-matmul disagree at d=" + std::to_string(d), false);
  }
  if (selected == d && !agree_relative(ref_indexed, matmul_nt(q, cache, spec.gemm), 1e-6)) {
    throw Error("bench: indexed and full matmul disagree at full selection, d=" + std::to_string(d), false);
  }

  using clock = std::chrono::steady_clock;
  auto time_ms = [](auto&& fn) {
    const auto t0 = clock::now();
    fn();
    return std::chrono::duration<double, std::milli>(clock::now() - t0).count();
  };
  volatile float sink = 0.0f;
  std::vector<double> full, slice, indexed;
  for (std::size_t it = 0; it < spec.warmup + spec.iterations; ++it) {
    const double tf = time_ms([&] { sink = sink + matmul_nt(q, cache, spec.gemm).data()[0]; });
    const double ts = time_ms([&] { sink = sink + matmul_nt(q, gather_rows(cache, idx), spec.gemm).data()[0]; });
    const double ti = time_ms([&] { sink = sink + indexed_gemm_rows(q, cache, idx, spec.gemm).data()[0]; });
    if (it >= spec.warmup) {
      full.push_back(tf);
      slice.push_back(ts);
      indexed.push_back(ti);
    }
  }
  return {d, ratio, batch, selected, spec.iterations, median(full), median(slice), median(indexed)};
}

inline std::vector<BenchRow> run_bench(const BenchSpec& spec) {
  if (spec.iterations < 1) throw ConfigError("bench needs at least one iteration");
  std::vector<BenchRow> rows;
  for (std::size_t d : spec.dims) {
    if (d < 1) throw ConfigError("bench dimension must be >= 1");
    for (double r : spec.ratios) {
      if (!(r > 0.0 && r <= 1.0)) throw ConfigError("bench ratio must be in (0, 1]");
      for (std::size_t b : spec.batches) {
        if (b < 1) throw ConfigError("bench batch must be >= 1");
        rows.push_back(bench_cell(d, r, b, spec));
      }
    }
  }
  return rows;
}

inline std::string write_bench_csv(const std::vector<BenchRow>& rows) {
  std::string out(kBenchHeader);
  out += '\n';
  for (const auto& r : rows) {
    out += std::to_string(r.d) + ',' + csv::format_number(r.ratio) + ',' + std::to_string(r.batch) + ',' +
           std::to_string(r.selected) + ',' + std::to_string(r.iterations) + ',' + csv::format_number(r.full_ms) +
           ',' + csv::format_number(r.slice_ms) + ',' + csv::format_number(r.indexed_ms) + '\n';
  }
  return out;
}

inline std::vector<BenchRow> cmd_bench(const BenchSpec& spec, const fs::path& out_dir) {
  auto rows = run_bench(spec);
  csv::write_file_atomic(out_dir / "bench.csv", write_bench_csv(rows));
  return rows;
}

}  // namespace modalkv::harness
