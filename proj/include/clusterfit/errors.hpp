#pragma once

#include <iostream>
#include <stdexcept>
#include <string>
#include <string_view>

namespace clusterfit {

enum class ErrorKind {
  format,       // bad magic, version or reserved bytes
  truncation,   // header and payload disagree
  validation,   // non-finite values, out-of-range labels
  degenerate,   // zero rows, empty classes, single-class training sets
  infeasible,   // n < k, total_k below class count, ...
  shape,        // dimension mismatch
  config,       // invalid configuration values
  divergence,   // non-finite loss during training
  io,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::format: return "format";
    case ErrorKind::truncation: return "truncation";
    case ErrorKind::validation: return "validation";
    case ErrorKind::degenerate: return "degenerate";
    case ErrorKind::infeasible: return "infeasible";
    case ErrorKind::shape: return "shape";
    case ErrorKind::config: return "config";
    case ErrorKind::divergence: return "divergence";
    case ErrorKind::io: return "io";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + " error: " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// Wraps an error raised inside a named pipeline stage.
class StageError : public Error {
 public:
  StageError(std::string stage, const Error& cause)
      : Error(cause.kind(), "stage '" + stage + "': " + cause.what()), stage_(std::move(stage)) {}

  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) { throw Error(kind, message); }

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) fail(kind, message);
}

// Warnings go to stderr unless silenced (tests silence them).
inline bool& warnings_enabled() {
  static bool enabled = true;
  return enabled;
}

inline void warn(const std::string& message) {
  if (warnings_enabled()) std::clog << "warning: " << message << '\n';
}

}  // namespace clusterfit
