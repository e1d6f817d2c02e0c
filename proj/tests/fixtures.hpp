// Copyright 2026 The modalkv Authors
// SPDX-License-Identifier: Apache-2.0

// Prompt builders and digest helpers shared by the suites.

#pragma once

#include <openssl/sha.h>

#include <cstdio>
#include <string>
#include <vector>

#include "modalkv/model.hpp"

namespace fixture {

using modalkv::ModelConfig;
using modalkv::Rng64;
using modalkv::SegmentedPrompt;
using modalkv::TokenId;

// Token ids avoid the end token so prompts never look finished.
inline std::vector<TokenId> random_tokens(Rng64& rng, std::size_t n, const ModelConfig& cfg) {
  std::vector<TokenId> out(n);
  for (auto& t : out) t = static_cast<TokenId>(rng.next() % (cfg.vocab_size - 1));
  return out;
}

inline SegmentedPrompt make_prompt(const ModelConfig& cfg, std::size_t system, std::size_t vision,
                                   std::size_t instruction, std::uint64_t seed) {
  Rng64 rng(seed);
  SegmentedPrompt p;
  p.system_tokens = random_tokens(rng, system, cfg);
  p.vision_embeddings = modalkv::synthetic_vision(seed ^ 0x5eedULL, vision, cfg.d_model);
  p.instruction_tokens = random_tokens(rng, instruction, cfg);
  return p;
}

inline std::string sha256_hex(const std::string& bytes) {
  unsigned char md[SHA256_DIGEST_LENGTH];
  SHA256(reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size(), md);
  std::string hex;
  char buf[3];
  for (unsigned char c : md) {
    std::snprintf(buf, sizeof buf, "%02x", c);
    hex += buf;
  }
  return hex;
}

// Reference digests of the weight file for seed 7, produced by
// tests/reference/reference_weights.py.
inline constexpr const char* kGoldenDefaultSeed7 = "143723506f30e5675f8a015115ecc3f509cce5cdfe0b02142b4fad76ba693e7f";
inline constexpr std::size_t kGoldenDefaultSeed7Bytes = 173220;
inline constexpr const char* kGoldenTinySeed7 = "48baa4615aca5b5b9cc89e0cfea564863c55f72e19c4cf26f39d8ac5b72c9c70";
inline constexpr std::size_t kGoldenTinySeed7Bytes = 7940;

inline ModelConfig tiny_config() {
  ModelConfig c;
  c.n_layers = 3;
  c.n_heads = 2;
  c.d_model = 8;
  c.d_ff = 16;
  c.vocab_size = 16;
  c.max_text_tokens = 16;
  c.max_seq_len = 32;
  return c;
}

}  // namespace fixture
