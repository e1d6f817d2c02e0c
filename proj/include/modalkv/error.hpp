// Copyright 2026 The modalkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace modalkv {

// Base of every error raised by the library. `bad_input()` separates errors
// caused by user-supplied data (exit code 2 in the CLI) from internal ones.
class Error : public std::runtime_error {
public:
  explicit Error(const std::string& what, bool bad_input = true)
      : std::runtime_error(what), detail_(what), bad_input_(bad_input) {}
  bool bad_input() const noexcept { return bad_input_; }
  // The message without its category prefix, for re-wrapping with context.
  const std::string& detail() const noexcept { return detail_; }

protected:
  Error(const char* kind, const std::string& detail, bool bad_input)
      : std::runtime_error(std::string(kind) + ": " + detail), detail_(detail), bad_input_(bad_input) {}

private:
  std::string detail_;
  bool bad_input_;
};

struct ShapeError : Error {
  explicit ShapeError(const std::string& w) : Error("shape error", w, true) {}
};

struct IndexError : Error {
  explicit IndexError(const std::string& w) : Error("index error", w, true) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& w) : Error("config error", w, true) {}
};

struct PromptError : Error {
  explicit PromptError(const std::string& w) : Error("prompt error", w, true) {}
};

struct PolicyError : Error {
  explicit PolicyError(const std::string& w) : Error("policy error", w, true) {}
};

// Cache state does not match the model or the call sequence.
struct StateError : Error {
  explicit StateError(const std::string& w) : Error("state error", w, false) {}
};

struct MappingError : Error {
  explicit MappingError(const std::string& w) : Error("mapping error", w, true) {}
};

// File or format problems; the message carries the path and, where known,
// the line.
struct ParseError : Error {
  explicit ParseError(const std::string& w) : Error(w) {}
};

}  // namespace modalkv
