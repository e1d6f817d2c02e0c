// Copyright 2026 The modalkv Authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance run: one PASS/FAIL line per criterion, exit 1 if any fails.
// argv[1] (optional) is where the kernel benchmark report is archived.

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fixtures.hpp"
#include "modalkv/harness.hpp"
#include "oracles.hpp"

namespace {

using namespace modalkv;
namespace fs = std::filesystem;

struct Outcome {
  bool pass = true;
  std::string detail;
};

// Records the first few failures of a criterion.
class Checker {
public:
  void expect(bool ok, const std::string& what) {
    ++checks_;
    if (ok) return;
    ++failures_;
    if (failures_ <= 3) notes_ += (notes_.empty() ? "" : "; ") + what;
  }
  std::size_t checks() const { return checks_; }
  Outcome outcome(const std::string& summary) const {
    if (!failures_) return {true, summary};
    return {false, std::to_string(failures_) + "/" + std::to_string(checks_) + " checks failed: " + notes_};
  }

private:
  std::size_t checks_ = 0, failures_ = 0;
  std::string notes_;
};

ModelConfig small_model(std::size_t vocab = 64) {
  ModelConfig c;
  c.n_layers = 4;
  c.n_heads = 4;
  c.d_model = 32;
  c.d_ff = 64;
  c.vocab_size = vocab;
  c.max_text_tokens = 64;
  c.max_seq_len = 256;
  return c;
}

Outcome identity_equivalence() {
  Checker ck;
  for (std::uint64_t i = 0; i < 50; ++i) {
    const ModelConfig c = small_model();
    const DecoderWeights w = init_weights(c, 1000 + i);
    Rng64 rng(i);
    const SegmentedPrompt p =
        fixture::make_prompt(c, rng.next() % 12, 64, 1 + rng.next() % 24, 5000 + i);
    FullPolicy full;
    AvlPolicy ident({100, 100, 1 + rng.next() % 5, 100, 100});
    const auto a = generate(w, p, full, {32, false});
    const auto b = generate(w, p, ident, {32, false});
    ck.expect(a.tokens.size() == 32 && a.tokens == b.tokens, "pair " + std::to_string(i) + " diverged");
  }
  return ck.outcome("50/50 pairs bit-identical over 32 tokens");
}

Outcome cache_vs_recompute() {
  Checker ck;
  double worst = 0.0;
  for (std::uint64_t m = 0; m < 20; ++m) {
    Rng64 rng(77 + m);
    ModelConfig c;
    c.n_layers = 3 + rng.next() % 3;
    c.n_heads = std::size_t{1} << (rng.next() % 3);
    c.d_model = c.n_heads * (4 + rng.next() % 5);
    c.d_ff = 2 * c.d_model;
    c.vocab_size = 16 + rng.next() % 48;
    c.max_text_tokens = 64;
    c.max_seq_len = 128;
    const DecoderWeights w = init_weights(c, 300 + m);
    const SegmentedPrompt p = fixture::make_prompt(c, rng.next() % 4, 1 + rng.next() % 12, 1 + rng.next() % 6, m);
    FullPolicy full;
    PrefillResult pre = prefill(w, p, full);
    std::vector<TokenId> gen;
    std::vector<float> logits = pre.logits;
    for (std::size_t t = 1; t <= 10; ++t) {
      const auto want = oracle::recompute_logits(w, p, gen);
      double err = 0.0;
      for (std::size_t i = 0; i < want.size(); ++i) err = std::max(err, std::abs(logits[i] - want[i]));
      worst = std::max(worst, err);
      ck.expect(err <= 1e-4, "model " + std::to_string(m) + " step " + std::to_string(t));
      gen.push_back(argmax(logits));
      logits = decode_step(w, pre.state, full, gen.back(), t);
    }
  }
  char buf[96];
  std::snprintf(buf, sizeof buf, "20 models x 11 positions, max |diff| = %.2e", worst);
  return ck.outcome(buf);
}

Outcome ppci_oracle() {
  Checker ck;
  Rng64 rng(2024);
  std::size_t ties = 0;
  for (int i = 0; i < 1000; ++i) {
    const std::size_t n = 1 + rng.next() % 64;
    const bool tie_heavy = i % 3 != 2;
    ties += tie_heavy;
    std::vector<float> a(n), b(n);
    for (std::size_t k = 0; k < n; ++k) {
      a[k] = tie_heavy ? static_cast<float>(rng.next() % 3) : rng.uniform(0.0f, 1.0f);
      b[k] = tie_heavy ? static_cast<float>(rng.next() % 3) : rng.uniform(0.0f, 1.0f);
    }
    const std::size_t p = std::array<std::size_t, 4>{10, 30, 50, 100}[i % 4];
    ck.expect(ppci(a, b, static_cast<double>(p)) == oracle::brute_ppci(a, b, p), "pair " + std::to_string(i));
  }
  return ck.outcome("1000/1000 pairs exact (" + std::to_string(ties) + " tie-heavy)");
}

Outcome counting_oracle() {
  Checker ck;
  const oracle::Scenario s;
  ModelConfig c = small_model();
  c.max_text_tokens = s.max_text_tokens;
  const DecoderWeights w = init_weights(c, 11);
  const SegmentedPrompt p = fixture::make_prompt(c, s.system, s.vision, s.instruction, 12);
  AvlPolicy pol({double(s.S), double(s.C), s.K, double(s.P), double(s.T)});
  const auto r = generate(w, p, pol, {s.steps, false});
  const auto want = oracle::count_scenario(s);
  const double wf = static_cast<double>(want.full);
  ck.expect(r.stats.full_slots == want.full, "full slots");
  ck.expect(r.stats.stored_slots == want.stored, "stored slots");
  ck.expect(r.stats.used_slots == want.used, "used slots");
  ck.expect(r.stats.stored_fraction == static_cast<double>(want.stored) / wf, "stored_fraction");
  ck.expect(r.stats.used_fraction == static_cast<double>(want.used) / wf, "used_fraction");
  ck.expect(r.stats.attention_flops_ratio == static_cast<double>(want.used) / wf, "attention_flops_ratio");
  return ck.outcome("stored " + std::to_string(r.stats.stored_slots) + "/" + std::to_string(r.stats.full_slots) +
                    ", used " + std::to_string(r.stats.used_slots) + "/" + std::to_string(r.stats.full_slots) +
                    ", flops ratio == used_fraction");
}

std::vector<std::size_t> positions_of(const LayerKvCache& c, const IndexSet& rows) {
  std::vector<std::size_t> out;
  for (std::size_t r : rows) out.push_back(c.meta(r).original_position);
  return out;
}

std::set<std::size_t> core_positions(const LayerKvCache& c) {
  std::set<std::size_t> out;
  for (const auto& m : c.meta()) {
    if (m.is_core) out.insert(m.original_position);
  }
  return out;
}

Outcome policy_state_machine() {
  Checker ck;
  std::size_t text_evictions = 0, core_changes = 0;
  for (std::uint64_t sched = 0; sched < 200; ++sched) {
    Rng64 rng(9000 + sched);
    ModelConfig c = small_model();
    c.n_layers = 3 + rng.next() % 3;
    const std::size_t sys = rng.next() % 8, vis = 1 + rng.next() % 60, instr = 1 + rng.next() % 12;
    const std::size_t steps = 1 + rng.next() % 24;
    c.max_text_tokens = instr + steps + rng.next() % 8;
    AvlPolicyConfig cfg;
    cfg.S_pct = 1 + static_cast<double>(rng.next() % 100);
    cfg.C_pct = 1 + static_cast<double>(rng.next() % static_cast<std::size_t>(cfg.S_pct));
    cfg.K = 1 + rng.next() % 5;
    cfg.P_pct = 1 + static_cast<double>(rng.next() % 100);
    const std::size_t w_min = (2 * 100 + c.max_text_tokens - 1) / c.max_text_tokens;  // keeps W >= 2
    cfg.T_pct = static_cast<double>(std::min<std::size_t>(100, w_min + rng.next() % 100));
    const std::size_t W = text_window_size(cfg.T_pct, c.max_text_tokens);
    const std::size_t protect = (W + 1) / 2;

    const DecoderWeights w = init_weights(c, sched);
    const SegmentedPrompt p = fixture::make_prompt(c, sys, vis, instr, sched + 1);
    AvlPolicy pol(cfg);
    const std::string tag = "schedule " + std::to_string(sched);

    std::map<std::size_t, std::set<std::size_t>> core_after;     // layer -> core after last step
    std::map<std::size_t, std::vector<std::size_t>> text_before;  // layer -> text positions at attention
    RunOptions opt;
    opt.on_attention = [&](const AttentionEvent& e) {
      text_before[e.layer] = positions_of(e.cache, e.cache.text_rows());
      if (e.step == 0) return;
      // The used vision set is the core fixed at the previous step, or all
      // stored vision on an update step.
      std::set<std::size_t> used_vision;
      for (std::size_t r : e.used) {
        if (e.cache.meta(r).segment == Segment::Vision) used_vision.insert(e.cache.meta(r).original_position);
      }
      const auto stored = positions_of(e.cache, e.cache.rows_of(Segment::Vision));
      const std::set<std::size_t> stored_set(stored.begin(), stored.end());
      if (e.kind == StepKind::Update) {
        ck.expect(e.step % cfg.K == 0 && used_vision == stored_set, tag + " update step used set");
      } else {
        ck.expect(e.step % cfg.K != 0 && used_vision == core_after[e.layer], tag + " core not in effect");
      }
    };
    opt.on_policy_applied = [&](std::size_t layer, std::size_t t, const LayerKvCache& cache) {
      const auto core = core_positions(cache);
      const auto vision = positions_of(cache, cache.rows_of(Segment::Vision));
      const std::set<std::size_t> vision_set(vision.begin(), vision.end());
      // (a)
      ck.expect(std::includes(vision_set.begin(), vision_set.end(), core.begin(), core.end()), tag + " core not within secondary");
      // (b)
      if (t > 0 && core != core_after[layer]) {
        ++core_changes;
        ck.expect(t % cfg.K == 0, tag + " core changed off-schedule");
      }
      core_after[layer] = core;
      // (c)
      const auto text_after = positions_of(cache, cache.text_rows());
      ck.expect(text_after.size() <= W, tag + " text window exceeded");
      const auto& before = text_before[layer];
      const std::set<std::size_t> kept(text_after.begin(), text_after.end());
      text_evictions += before.size() - text_after.size();
      for (std::size_t i = before.size() > protect ? before.size() - protect : 0; i < before.size(); ++i) {
        ck.expect(kept.count(before[i]) == 1, tag + " recent text slot evicted");
      }
      // (d)
      ck.expect(cache.count(Segment::System) == sys, tag + " system slot evicted");
    };
    const auto r = generate(w, p, pol, {steps, false}, opt);
    ck.expect(r.tokens.size() == steps, tag + " step count");
  }
  return ck.outcome("200 schedules, " + std::to_string(ck.checks()) + " assertions, " +
                    std::to_string(text_evictions) + " text evictions, " + std::to_string(core_changes) +
                    " core changes observed");
}

Outcome indexed_kernel_correctness() {
  Checker ck;
  Rng64 rng(606);
  auto rand_matrix = [&](std::size_t r, std::size_t c) {
    Matrix m(r, c);
    for (float& x : m.data()) x = rng.uniform(-1.0f, 1.0f);
    return m;
  };
  for (int i = 0; i < 500; ++i) {
    const std::size_t m = 1 + rng.next() % 8, k = 1 + rng.next() % 48, n = 1 + rng.next() % 96;
    const std::size_t sel = i % 5 == 0 ? 1 : i % 5 == 1 ? n : 1 + rng.next() % n;
    const IndexSet idx = harness::random_subset(rng, n, sel);
    const Matrix a = rand_matrix(m, k);
    const Matrix brows = rand_matrix(n, k);
    const Matrix bcols = rand_matrix(k, n);
    const GemmOptions g{1 + rng.next() % 80};
    const Matrix rows = indexed_gemm_rows(a, brows, idx, g);
    const auto want_rows = oracle::gather_rows_then_dot(a, brows, idx.vec());
    const Matrix cols = indexed_gemm_cols(a, bcols, idx, g);
    const Matrix want_cols = oracle::gather_cols_then_matmul(a, bcols, idx.vec());
    bool ok = rows.rows() == m && rows.cols() == sel && cols.rows() == m && cols.cols() == sel;
    for (std::size_t j = 0; ok && j < want_rows.size(); ++j) {
      ok = oracle::close_relative(rows.data()[j], want_rows[j], 1e-6, 1e-6) &&
           oracle::close_relative(cols.data()[j], want_cols.data()[j], 1e-6, 1e-6);
    }
    ck.expect(ok, "case " + std::to_string(i));
  }
  return ck.outcome("500/500 cases within 1e-6 relative (|idx| = 1 and |idx| = n included)");
}

Outcome indexed_kernel_benchmark(const fs::path& report) {
  harness::BenchSpec spec;
  spec.dims = {2048};
  spec.ratios = {0.3};
  spec.batches = {1, 8, 32};
  spec.iterations = 100;
  spec.warmup = 10;
  const auto rows = harness::run_bench(spec);
  csv::write_file_atomic(report, harness::write_bench_csv(rows));
  Checker ck;
  std::ostringstream os;
  bool below_full = true;
  for (const auto& r : rows) {
    ck.expect(r.indexed_ms <= r.slice_ms, "batch " + std::to_string(r.batch) + ": indexed > slice");
    below_full = below_full && r.indexed_ms < r.full_ms;
    char buf[128];
    std::snprintf(buf, sizeof buf, "b=%zu idx %.3f / slice %.3f / full %.3f ms; ", r.batch, r.indexed_ms, r.slice_ms,
                  r.full_ms);
    os << buf;
  }
  os << (below_full ? "indexed < full everywhere" : "indexed NOT below full everywhere") << "; report "
     << report.string();
  return ck.outcome(os.str());
}

Outcome used_fraction_reduction() {
  Checker ck;
  oracle::Scenario s;
  s.S = 45, s.C = 30, s.K = 3, s.P = 90, s.T = 70;
  ModelConfig c = small_model();
  c.max_text_tokens = s.max_text_tokens;
  const DecoderWeights w = init_weights(c, 23);
  const SegmentedPrompt p = fixture::make_prompt(c, s.system, s.vision, s.instruction, 24);
  AvlPolicy pol({45, 30, 3, 90, 70});
  const auto r = generate(w, p, pol, {s.steps, false});
  const auto want = oracle::count_scenario(s);
  ck.expect(r.stats.used_fraction < r.stats.stored_fraction, "used >= stored");
  ck.expect(r.stats.stored_fraction < 1.0, "stored == 1");
  ck.expect(r.stats.used_slots == want.used && r.stats.stored_slots == want.stored, "counts differ from oracle");
  std::map<std::size_t, std::pair<std::uint64_t, std::uint64_t>> per_step;
  for (const auto& rec : r.counters.steps) {
    per_step[rec.step].first += rec.attn_flops;
    per_step[rec.step].second += rec.full_attn_flops;
  }
  double worst = 0.0;
  for (const auto& [t, f] : per_step) {
    if (t % s.K == 0) continue;
    const double reduction = 1.0 - static_cast<double>(f.first) / static_cast<double>(f.second);
    worst = worst == 0.0 ? reduction : std::min(worst, reduction);
    // reduction >= 45%  <=>  100 * used <= 55 * full, in integers.
    ck.expect(100 * f.first <= 55 * f.second, "step " + std::to_string(t) + " reduced < 45%");
  }
  char buf[160];
  std::snprintf(buf, sizeof buf, "used %.4f < stored %.4f < 1; min non-update FLOP reduction %.1f%%",
                r.stats.used_fraction, r.stats.stored_fraction, 100.0 * worst);
  return ck.outcome(buf);
}

Outcome baseline_conformance() {
  Checker ck;
  auto append = [](LayerKvCache& cache, std::size_t pos, Segment seg) {
    const std::vector<float> kv(cache.width(), 0.0f);
    cache.append(kv, kv, SlotMeta{pos, seg});
  };
  {
    StreamingPolicy sp(4, 16);
    LayerKvCache cache(1);
    for (std::size_t pos = 0; pos < 40; ++pos) {
      append(cache, pos, Segment::Generated);
      sp.enforce(cache);
    }
    ck.expect(cache.size() == 20, "streaming holds " + std::to_string(cache.size()));
  }
  {
    Rng64 rng(5);
    for (std::size_t window : {4u, 8u, 20u, 33u}) {
      H2oPolicy hp(window);
      LayerKvCache cache(1);
      for (std::size_t pos = 0; pos < 200; ++pos) {
        append(cache, pos, Segment::Generated);
        const auto before = positions_of(cache, IndexSet::range(cache.size()));
        std::vector<float> scores(cache.size());
        for (float& x : scores) x = rng.uniform(0.0f, 1.0f);
        hp.after_decode_layer(0, pos + 1, StepKind::Normal, cache, IndexSet::range(cache.size()), scores);
        const auto after = positions_of(cache, IndexSet::range(cache.size()));
        const std::set<std::size_t> kept(after.begin(), after.end());
        for (std::size_t i = before.size() > hp.recent() ? before.size() - hp.recent() : 0; i < before.size(); ++i) {
          ck.expect(kept.count(before[i]) == 1, "h2o evicted a recent slot");
        }
        ck.expect(cache.size() <= window, "h2o over window");
      }
    }
  }
  {
    for (std::size_t vis : {1u, 7u, 50u, 64u, 101u}) {
      const ModelConfig c = small_model();
      const DecoderWeights w = init_weights(c, vis);
      FastvPolicy fv(50);
      const PrefillResult pre = prefill(w, fixture::make_prompt(c, 3, vis, 4, vis), fv);
      for (std::size_t l = 0; l < c.n_layers; ++l) {
        const std::size_t want = l < 2 ? vis : (vis + 1) / 2;
        ck.expect(pre.state.caches[l].count(Segment::Vision) == want,
                  "fastv V=" + std::to_string(vis) + " layer " + std::to_string(l + 1));
      }
    }
  }
  return ck.outcome("streaming 20 live after 40 appends; h2o recent 75% kept; fastv stores ceil(V/2)");
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(MODALKV_CLI) + " " + args + " >/dev/null 2>&1";
  const int raw = std::system(cmd.c_str());
  return WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
}

Outcome determinism() {
  Checker ck;
  const fs::path root = fs::temp_directory_path() / ("modalkv_accept_" + std::to_string(::getpid()));
  const fs::path a = root / "a", b = root / "b";
  fs::create_directories(a);
  fs::create_directories(b);
  const std::string args = "generate --seed 7 --prompt " + std::string(MODALKV_SAMPLES_DIR) +
                           "/prompt.json --policy avl --max-new 16 --trace --save-weights --out ";
  ck.expect(run_cli(args + a.string()) == 0, "first run failed");
  ck.expect(run_cli(args + b.string()) == 0, "second run failed");
  for (const char* f : {"weights.bin", "tokens.txt", "trace.csv", "stats.csv"}) {
    ck.expect(fs::exists(a / f) && csv::read_file(a / f) == csv::read_file(b / f), std::string(f) + " differs");
  }
  const std::string digest = fs::exists(a / "weights.bin") ? fixture::sha256_hex(csv::read_file(a / "weights.bin")) : "";
  ck.expect(digest == fixture::kGoldenDefaultSeed7, "weight digest " + digest);
  ck.expect(fixture::sha256_hex(serialize_weights(init_weights(fixture::tiny_config(), 7))) == fixture::kGoldenTinySeed7,
            "tiny weight digest");
  fs::remove_all(root);
  return ck.outcome("two runs byte-identical; weights sha256 " + digest.substr(0, 16) + "... matches golden");
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path report = argc > 1 ? fs::path(argv[1]) : fs::path("bench_report.csv");
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"identity equivalence", identity_equivalence},
      {"cache vs recompute", cache_vs_recompute},
      {"ppci oracle", ppci_oracle},
      {"counting-oracle accounting", counting_oracle},
      {"policy state machine", policy_state_machine},
      {"indexed kernel correctness", indexed_kernel_correctness},
      {"indexed kernel benchmark", [&] { return indexed_kernel_benchmark(report); }},
      {"used-fraction reduction", used_fraction_reduction},
      {"baseline conformance", baseline_conformance},
      {"determinism and golden digest", determinism},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failed += !o.pass;
    std::printf("%s  %2zu %-30s %6.2fs  %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(), secs,
                o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%zu/%zu criteria passed\n", criteria.size() - failed, criteria.size());
  return failed ? 1 : 0;
}
