// Copyright 2026 The modalkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>

#include "modalkv/error.hpp"

namespace modalkv {

// Role of a token in the assembled sequence. Prompts are laid out as
// System, Vision, Instruction; decode appends Generated.
enum class Segment : std::uint8_t { System = 0, Vision = 1, Instruction = 2, Generated = 3 };

inline constexpr std::size_t kSegmentCount = 4;
inline constexpr std::array<Segment, kSegmentCount> kAllSegments = {Segment::System, Segment::Vision,
                                                                     Segment::Instruction, Segment::Generated};

inline constexpr bool is_text(Segment s) noexcept {
  return s == Segment::Instruction || s == Segment::Generated;
}

inline constexpr std::string_view to_string(Segment s) noexcept {
  switch (s) {
    case Segment::System: return "system";
    case Segment::Vision: return "vision";
    case Segment::Instruction: return "instruction";
    case Segment::Generated: return "generated";
  }
  return "?";
}

inline Segment parse_segment(std::string_view s) {
  for (Segment seg : kAllSegments) {
    if (to_string(seg) == s) return seg;
  }
  throw MappingError("unknown segment '" + std::string(s) + "'");
}

}  // namespace modalkv
