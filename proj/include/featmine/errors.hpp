#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace featmine {

// Error taxonomy. The CLI maps each kind onto an exit code (see cli.hpp).

/// Inconsistent shapes, unsupported model specs, invalid config values.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Bad user-supplied inputs: out-of-range labels, wrong image shapes.
struct InputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A computation produced NaN or Inf.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// API misuse, e.g. running backward twice over the same graph.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Malformed dataset or checkpoint bytes.
struct FormatError : std::runtime_error {
  FormatError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"),
        byte_offset(offset) {}
  std::size_t byte_offset;
};

namespace detail {

template <typename... Args>
std::string concat(const Args&... args) {
  std::ostringstream oss;
  (oss << ... << args);
  return oss.str();
}

}  // namespace detail

}  // namespace featmine
