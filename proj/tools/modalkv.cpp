// Copyright 2026 The modalkv Authors
// SPDX-License-Identifier: Apache-2.0

// Command-line driver: generate, compare, analyze, bench.
// Exit codes: 0 success, 1 internal error, 2 bad input.

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "modalkv/harness.hpp"

namespace {

using namespace modalkv;
namespace fs = std::filesystem;

struct CommonArgs {
  std::string config_path;
  std::string weights_path;
  std::uint64_t seed = 0;
  std::string prompt_path;
  std::size_t max_new = 16;
  std::string out = ".";
};

void add_common(CLI::App* cmd, CommonArgs& a) {
  cmd->add_option("--config", a.config_path, "Model config JSON (dimensions)");
  cmd->add_option("--weights", a.weights_path, "Weight file; replaces --config/--seed");
  cmd->add_option("--seed", a.seed, "Weight seed");
  cmd->add_option("--prompt", a.prompt_path, "Prompt JSON")->required();
  cmd->add_option("--max-new", a.max_new, "Tokens to generate");
  cmd->add_option("--out", a.out, "Output directory");
}

harness::RunSpec make_spec(const CommonArgs& a) {
  harness::RunSpec spec;
  if (!a.weights_path.empty() && !a.config_path.empty()) {
    throw ConfigError("--weights and --config are mutually exclusive");
  }
  if (!a.weights_path.empty()) {
    if (!fs::exists(a.weights_path)) throw ParseError("weight file not found: " + a.weights_path);
    spec.weights_path = a.weights_path;
  }
  if (!a.config_path.empty()) {
    if (!fs::exists(a.config_path)) throw ParseError("model config not found: " + a.config_path);
    try {
      spec.model = parse_model_config(read_json_file(a.config_path));
    } catch (const ConfigError& e) {
      throw ConfigError(a.config_path + ": " + e.detail());
    }
  }
  spec.seed = a.seed;
  spec.prompt_path = a.prompt_path;
  if (!fs::exists(spec.prompt_path)) throw ParseError("prompt file not found: " + a.prompt_path);
  spec.max_new_tokens = a.max_new;
  spec.out_dir = a.out;
  return spec;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Modality-aware KV-cache policies on a toy decoder"};
  app.require_subcommand(1);

  CommonArgs gen_args;
  std::string gen_policy = "full";
  bool gen_trace = false;
  std::size_t trace_limit = 0;
  bool save_weights = false;
  auto* gen = app.add_subcommand("generate", "Run one generation and write tokens, stats and trace");
  add_common(gen, gen_args);
  gen->add_option("--policy", gen_policy, "Policy name, JSON file or inline JSON");
  gen->add_flag("--trace", gen_trace, "Write trace.csv");
  gen->add_option("--trace-limit", trace_limit, "Maximum trace rows (0 = unlimited)");
  gen->add_flag("--save-weights", save_weights, "Write weights.bin");

  CommonArgs cmp_args;
  std::vector<std::string> cmp_policies;
  auto* cmp = app.add_subcommand("compare", "Run several policies on the same prompt");
  add_common(cmp, cmp_args);
  cmp->add_option("--policies", cmp_policies, "Comma-separated policy names or JSON files")
      ->delimiter(',')
      ->required();

  std::string trace_path;
  std::string mode = "segments";
  double p_pct = 50.0;
  std::size_t anchor = 0;
  std::string segment;
  std::string analyze_out = ".";
  auto* ana = app.add_subcommand("analyze", "Segment shares and PPCI tables from a trace");
  ana->add_option("--trace", trace_path, "Trace CSV")->required();
  ana->add_option("--mode", mode, "segments | ppci-layers | ppci-steps");
  ana->add_option("--p", p_pct, "Top-p percentile for PPCI");
  ana->add_option("--anchor", anchor, "Anchor layer (ppci-layers) or step (ppci-steps)");
  ana->add_option("--segment", segment, "Restrict PPCI to one segment");
  ana->add_option("--out", analyze_out, "Output directory");

  harness::BenchSpec bench;
  std::string bench_out = ".";
  auto* ben = app.add_subcommand("bench", "Time full, slice-then-multiply and indexed products");
  ben->add_option("--dims", bench.dims, "Cache lengths / widths")->delimiter(',');
  ben->add_option("--ratios", bench.ratios, "Selection ratios in (0, 1]")->delimiter(',');
  ben->add_option("--batch", bench.batches, "Query batch sizes")->delimiter(',');
  ben->add_option("--iters", bench.iterations, "Timed iterations per cell");
  ben->add_option("--warmup", bench.warmup, "Warm-up iterations per cell");
  ben->add_option("--seed", bench.seed, "Input seed");
  ben->add_option("--block", bench.gemm.block, "Kernel tile width");
  ben->add_option("--out", bench_out, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) {
      auto spec = make_spec(gen_args);
      spec.policy = harness::resolve_policy(gen_policy);
      spec.trace = gen_trace;
      spec.trace_row_limit = trace_limit;
      spec.save_weights = save_weights;
      const auto res = harness::cmd_generate(spec);
      std::cout << harness::format_tokens(res.tokens) << "\n"
                << "stored_fraction " << csv::format_number(res.stats.stored_fraction) << "\n"
                << "used_fraction " << csv::format_number(res.stats.used_fraction) << "\n";
    } else if (cmp->parsed()) {
      const auto rows = harness::cmd_compare(make_spec(cmp_args), cmp_policies);
      std::cout << harness::write_compare_csv(rows);
    } else if (ana->parsed()) {
      harness::AnalyzeSpec spec;
      spec.trace_path = trace_path;
      spec.mode = harness::parse_analyze_mode(mode);
      spec.ppci.p_pct = p_pct;
      spec.ppci.anchor = anchor;
      if (!segment.empty()) {
        try {
          spec.ppci.segment = parse_segment(segment);
        } catch (const MappingError& e) {
          throw ConfigError(e.detail());
        }
      }
      spec.out_dir = analyze_out;
      for (const auto& p : harness::cmd_analyze(spec)) std::cout << p.string() << "\n";
    } else if (ben->parsed()) {
      std::cout << harness::write_bench_csv(harness::cmd_bench(bench, bench_out));
    }
  } catch (const Error& e) {
    std::cerr << "modalkv: " << e.what() << "\n";
    return e.bad_input() ? 2 : 1;
  } catch (const std::exception& e) {
    std::cerr << "modalkv: internal error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
