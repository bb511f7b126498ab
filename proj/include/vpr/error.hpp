#pragma once

#include <stdexcept>
#include <string>

namespace vpr {

// Base class for all library failures surfaced to callers.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor/layer dimension mismatch.
struct ShapeError : Error {
  explicit ShapeError(const std::string& msg) : Error("shape error: " + msg) {}
};

// Malformed on-disk data. Carries the byte offset where parsing failed.
struct FormatError : Error {
  FormatError(const std::string& msg, size_t at_offset)
      : Error("format error at offset " + std::to_string(at_offset) + ": " + msg),
        offset(at_offset) {}
  explicit FormatError(const std::string& msg) : Error("format error: " + msg), offset(0) {}
  size_t offset;
};

// Bad user-supplied configuration or arguments.
struct ConfigError : Error {
  explicit ConfigError(const std::string& msg) : Error("config error: " + msg) {}
};

}  // namespace vpr
