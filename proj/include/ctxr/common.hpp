#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace ctxr {

// Class id marking unlabeled pixels. Excluded from losses, anchors and metrics.
inline constexpr uint8_t kIgnoreLabel = 255;

// Wrong arguments to an operation (dimension mismatch, out-of-range ratio, ...).
class ArgumentError : public std::runtime_error {
 public:
  explicit ArgumentError(const std::string& what) : std::runtime_error(what) {}
};

// Malformed file content. Carries the byte offset where parsing failed.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::size_t byte_offset)
      : std::runtime_error(what + " (byte offset " + std::to_string(byte_offset) + ")"),
        offset(byte_offset) {}
  std::size_t offset;
};

// Bad run configuration (unknown key, unparsable value, missing file).
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Operation called in an invalid order (e.g. backward before forward).
class StateError : public std::runtime_error {
 public:
  explicit StateError(const std::string& what) : std::runtime_error(what) {}
};

// A metric that is mathematically undefined for the given input.
class UndefinedError : public std::runtime_error {
 public:
  explicit UndefinedError(const std::string& what) : std::runtime_error(what) {}
};

// Effective worker count: CTXR_THREADS caps it, 0 or unset means hardware auto.
int worker_count();

}  // namespace ctxr
