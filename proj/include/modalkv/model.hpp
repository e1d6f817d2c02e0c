// Copyright 2026 The modalkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "modalkv/csv.hpp"
#include "modalkv/tensor.hpp"

namespace modalkv {

using TokenId = std::uint32_t;

struct ModelConfig {
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t d_model = 32;
  std::size_t d_ff = 64;
  std::size_t vocab_size = 64;
  // Instruction + generation budget; the text window is a share of it.
  std::size_t max_text_tokens = 64;
  // Size of the learned position table.
  std::size_t max_seq_len = 256;

  std::size_t d_head() const noexcept { return d_model / n_heads; }
  // Reserved end-of-sequence id.
  TokenId end_token() const noexcept { return static_cast<TokenId>(vocab_size - 1); }

  void validate() const {
    if (n_layers < 3) throw ConfigError("n_layers must be >= 3 (pruning starts after layer 2)");
    if (n_heads < 1 || d_model < 1 || d_ff < 1 || max_text_tokens < 1 || max_seq_len < 1) {
      throw ConfigError("model dimensions must be >= 1");
    }
    if (vocab_size < 2) throw ConfigError("vocab_size must be >= 2");
    if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
  }

  bool operator==(const ModelConfig&) const = default;
};

struct LayerWeights {
  std::vector<float> attn_norm;
  Matrix wq, wk, wv, wo;  // d_model x d_model, applied as x * W
  std::vector<float> mlp_norm;
  Matrix w1;  // d_model x d_ff
  Matrix w2;  // d_ff x d_model
};

struct DecoderWeights {
  ModelConfig config;
  Matrix token_embedding;     // vocab x d_model, also the output head
  Matrix position_embedding;  // max_seq_len x d_model
  std::vector<LayerWeights> layers;
  std::vector<float> final_norm;
};

namespace detail {

inline Matrix random_matrix(Rng64& rng, std::size_t r, std::size_t c, float lo, float hi) {
  Matrix m(r, c);
  for (float& x : m.data()) x = rng.uniform(lo, hi);
  return m;
}

}  // namespace detail

// Draw order from one SplitMix64 stream, each tensor row-major, uniform in
// [-0.1, 0.1]: token_embedding, position_embedding, then per layer
// wq, wk, wv, wo, w1, w2. Norm scales are 1.
inline DecoderWeights init_weights(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  constexpr float lo = -0.1f, hi = 0.1f;
  Rng64 rng(seed);
  DecoderWeights w;
  w.config = cfg;
  const std::size_t d = cfg.d_model;
  w.token_embedding = detail::random_matrix(rng, cfg.vocab_size, d, lo, hi);
  w.position_embedding = detail::random_matrix(rng, cfg.max_seq_len, d, lo, hi);
  w.layers.resize(cfg.n_layers);
  for (auto& l : w.layers) {
    l.wq = detail::random_matrix(rng, d, d, lo, hi);
    l.wk = detail::random_matrix(rng, d, d, lo, hi);
    l.wv = detail::random_matrix(rng, d, d, lo, hi);
    l.wo = detail::random_matrix(rng, d, d, lo, hi);
    l.w1 = detail::random_matrix(rng, d, cfg.d_ff, lo, hi);
    l.w2 = detail::random_matrix(rng, cfg.d_ff, d, lo, hi);
    l.attn_norm.assign(d, 1.0f);
    l.mlp_norm.assign(d, 1.0f);
  }
  w.final_norm.assign(d, 1.0f);
  return w;
}

// ---- weight file ---------------------------------------------------------
//
// Little-endian: "AVLW", u32 version, u32 n_layers, n_heads, d_model, d_ff,
// vocab_size, max_text_tokens, max_seq_len, then f32 tensors:
// token_embedding, position_embedding, per layer attn_norm, wq, wk, wv, wo,
// mlp_norm, w1, w2, and final_norm.

inline constexpr std::uint32_t kWeightFileVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

inline void put_f32s(std::string& out, std::span<const float> xs) {
  for (float x : xs) put_u32(out, std::bit_cast<std::uint32_t>(x));
}

class ByteReader {
public:
  ByteReader(const std::string& bytes, std::string path) : bytes_(bytes), path_(std::move(path)) {}

  std::uint32_t u32() {
    if (pos_ + 4 > bytes_.size()) throw ParseError(path_ + ": truncated at byte " + std::to_string(pos_));
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }

  void f32s(std::span<float> out) {
    for (float& x : out) {
      x = std::bit_cast<float>(u32());
      if (!std::isfinite(x)) throw ParseError(path_ + ": non-finite weight at byte " + std::to_string(pos_ - 4));
    }
  }

  std::size_t pos() const noexcept { return pos_; }
  bool done() const noexcept { return pos_ == bytes_.size(); }

private:
  const std::string& bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_weights(const DecoderWeights& w) {
  const ModelConfig& c = w.config;
  std::string out = "AVLW";
  detail::put_u32(out, kWeightFileVersion);
  for (std::size_t v : {c.n_layers, c.n_heads, c.d_model, c.d_ff, c.vocab_size, c.max_text_tokens, c.max_seq_len}) {
    detail::put_u32(out, static_cast<std::uint32_t>(v));
  }
  detail::put_f32s(out, w.token_embedding.data());
  detail::put_f32s(out, w.position_embedding.data());
  for (const auto& l : w.layers) {
    detail::put_f32s(out, l.attn_norm);
    detail::put_f32s(out, l.wq.data());
    detail::put_f32s(out, l.wk.data());
    detail::put_f32s(out, l.wv.data());
    detail::put_f32s(out, l.wo.data());
    detail::put_f32s(out, l.mlp_norm);
    detail::put_f32s(out, l.w1.data());
    detail::put_f32s(out, l.w2.data());
  }
  detail::put_f32s(out, w.final_norm);
  return out;
}

inline DecoderWeights deserialize_weights(const std::string& bytes, const std::string& path = "<weights>") {
  if (bytes.size() < 4 || bytes.compare(0, 4, "AVLW") != 0) throw ParseError(path + ": bad magic");
  detail::ByteReader r(bytes, path);
  r.u32();  // magic
  if (const auto v = r.u32(); v != kWeightFileVersion) {
    throw ParseError(path + ": unsupported version " + std::to_string(v));
  }
  ModelConfig c;
  c.n_layers = r.u32();
  c.n_heads = r.u32();
  c.d_model = r.u32();
  c.d_ff = r.u32();
  c.vocab_size = r.u32();
  c.max_text_tokens = r.u32();
  c.max_seq_len = r.u32();
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw ParseError(path + ": " + e.what());
  }
  DecoderWeights w;
  w.config = c;
  const std::size_t d = c.d_model;
  auto read_matrix = [&](std::size_t rows, std::size_t cols) {
    Matrix m(rows, cols);
    r.f32s(m.data());
    return m;
  };
  auto read_vec = [&](std::size_t n) {
    std::vector<float> v(n);
    r.f32s(v);
    return v;
  };
  w.token_embedding = read_matrix(c.vocab_size, d);
  w.position_embedding = read_matrix(c.max_seq_len, d);
  w.layers.resize(c.n_layers);
  for (auto& l : w.layers) {
    l.attn_norm = read_vec(d);
    l.wq = read_matrix(d, d);
    l.wk = read_matrix(d, d);
    l.wv = read_matrix(d, d);
    l.wo = read_matrix(d, d);
    l.mlp_norm = read_vec(d);
    l.w1 = read_matrix(d, c.d_ff);
    l.w2 = read_matrix(c.d_ff, d);
  }
  w.final_norm = read_vec(d);
  if (!r.done()) throw ParseError(path + ": trailing bytes after byte " + std::to_string(r.pos()));
  return w;
}

inline void save_weights(const DecoderWeights& w, const std::filesystem::path& path) {
  csv::write_file_atomic(path, serialize_weights(w));
}

inline DecoderWeights load_weights(const std::filesystem::path& path) {
  return deserialize_weights(csv::read_file(path), path.string());
}

// ---- JSON inputs ---------------------------------------------------------

// Parses a JSON file; syntax errors name the path and line.
inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  const std::string text = csv::read_file(path);
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    std::size_t line = 1;
    for (std::size_t i = 0; i < std::min<std::size_t>(e.byte, text.size()); ++i) line += (text[i] == '\n');
    throw ParseError(path.string() + ":" + std::to_string(line) + ": " + e.what());
  }
}

inline ModelConfig parse_model_config(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  ModelConfig c;
  for (const auto& [key, value] : j.items()) {
    std::size_t* field = nullptr;
    if (key == "n_layers") field = &c.n_layers;
    else if (key == "n_heads") field = &c.n_heads;
    else if (key == "d_model") field = &c.d_model;
    else if (key == "d_ff") field = &c.d_ff;
    else if (key == "vocab_size") field = &c.vocab_size;
    else if (key == "max_text_tokens") field = &c.max_text_tokens;
    else if (key == "max_seq_len") field = &c.max_seq_len;
    else throw ConfigError("unknown model config field '" + key + "'");
    if (!value.is_number_unsigned()) throw ConfigError("model config field '" + key + "' must be a non-negative integer");
    *field = value.get<std::size_t>();
  }
  c.validate();
  return c;
}

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"n_layers", c.n_layers},     {"n_heads", c.n_heads},
          {"d_model", c.d_model},       {"d_ff", c.d_ff},
          {"vocab_size", c.vocab_size}, {"max_text_tokens", c.max_text_tokens},
          {"max_seq_len", c.max_seq_len}};
}

// Token sequence laid out as System, Vision, Instruction. Vision tokens are
// already embedded (one d_model row each).
struct SegmentedPrompt {
  std::vector<TokenId> system_tokens;
  Matrix vision_embeddings;
  std::vector<TokenId> instruction_tokens;

  std::size_t vision_count() const noexcept { return vision_embeddings.rows(); }
  std::size_t length() const noexcept {
    return system_tokens.size() + vision_count() + instruction_tokens.size();
  }

  void validate(const ModelConfig& cfg) const {
    if (vision_count() < 1) throw PromptError("prompt needs at least one vision token");
    if (instruction_tokens.empty()) throw PromptError("prompt needs a non-empty instruction");
    if (vision_embeddings.cols() != cfg.d_model) {
      throw PromptError("vision embedding width " + std::to_string(vision_embeddings.cols()) + " != d_model " +
                        std::to_string(cfg.d_model));
    }
    for (const auto* seg : {&system_tokens, &instruction_tokens}) {
      for (TokenId t : *seg) {
        if (t >= cfg.vocab_size) throw PromptError("token id " + std::to_string(t) + " outside vocabulary");
      }
    }
    for (float x : vision_embeddings.data()) {
      if (!std::isfinite(x)) throw PromptError("non-finite vision embedding");
    }
  }
};

// count x d_model, uniform in [-1, 1] from its own SplitMix64 stream.
inline Matrix synthetic_vision(std::uint64_t seed, std::size_t count, std::size_t d_model) {
  Rng64 rng(seed);
  return detail::random_matrix(rng, count, d_model, -1.0f, 1.0f);
}

// {"system": [ids], "vision": {"seed": s, "count": n} | {"path": p}, "instruction": [ids]}
// A vision path names a JSON array of d_model-wide rows, relative to `base_dir`.
inline SegmentedPrompt parse_prompt(const nlohmann::json& j, std::size_t d_model,
                                    const std::filesystem::path& base_dir = {}) {
  if (!j.is_object()) throw PromptError("prompt must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (key != "system" && key != "vision" && key != "instruction") {
      throw PromptError("unknown prompt field '" + key + "'");
    }
  }
  SegmentedPrompt p;
  try {
    if (j.contains("system")) p.system_tokens = j.at("system").get<std::vector<TokenId>>();
    p.instruction_tokens = j.at("instruction").get<std::vector<TokenId>>();
    const auto& v = j.at("vision");
    if (v.contains("path")) {
      const std::filesystem::path vp = base_dir / v.at("path").get<std::string>();
      const auto rows = read_json_file(vp).get<std::vector<std::vector<float>>>();
      Matrix m(0, d_model);
      for (const auto& row : rows) {
        if (row.size() != d_model) throw PromptError(vp.string() + ": vision row width != d_model");
        m.append_row(row);
      }
      p.vision_embeddings = std::move(m);
    } else {
      p.vision_embeddings =
          synthetic_vision(v.at("seed").get<std::uint64_t>(), v.at("count").get<std::size_t>(), d_model);
    }
  } catch (const nlohmann::json::exception& e) {
    throw PromptError(e.what());
  }
  return p;
}

inline SegmentedPrompt load_prompt(const std::filesystem::path& path, std::size_t d_model) {
  if (!std::filesystem::exists(path)) throw ParseError("prompt file not found: " + path.string());
  try {
    return parse_prompt(read_json_file(path), d_model, path.parent_path());
  } catch (const PromptError& e) {
    throw PromptError(path.string() + ": " + e.detail());
  }
}

}  // namespace modalkv
