#pragma once

#include <stdexcept>
#include <string>

namespace dndt {

// Exit codes used by the CLI. Library code throws the typed errors below;
// the CLI maps them onto these codes.
enum class ExitCode : int {
  ok = 0,
  usage = 2,
  data = 3,
  numeric = 4,
};

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Invalid user-supplied parameters (bad flag values, invalid specs).
class UsageError : public Error {
 public:
  explicit UsageError(const std::string& what) : Error(what) {}
};

// Tensor/layer shape contract violations.
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error(what) {}
};

// Non-finite values, failed numeric contracts (non-normalized heatmaps, ...).
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(what) {}
};

// File and wire-format problems. Each failure class gets its own code so
// callers (and tests) can tell a truncated checkpoint from a bad version.
class IoError : public Error {
 public:
  enum class Code {
    open_failed,
    bad_magic,
    bad_version,
    truncated,
    count_mismatch,
    bad_format,
  };

  IoError(Code code, const std::string& what) : Error(what), code_(code) {}
  Code code() const { return code_; }

 private:
  Code code_;
};

inline void check_shape(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

}  // namespace dndt
