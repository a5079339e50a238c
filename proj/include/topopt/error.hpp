#pragma once

#include <stdexcept>
#include <string>

namespace topopt {

/// Failure categories. The CLI maps each to a distinct exit code.
enum class ErrorKind {
  Config,     // invalid parameters or inconsistent shapes
  Numeric,    // singular system, non-finite values, bisection failure
  Io          // file missing, truncated, or malformed
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& w) : Error(ErrorKind::Config, w) {}
};

struct ShapeMismatch : Error {
  explicit ShapeMismatch(const std::string& w) : Error(ErrorKind::Config, "shape mismatch: " + w) {}
};

struct OddDimension : Error {
  explicit OddDimension(const std::string& w) : Error(ErrorKind::Config, "odd dimension: " + w) {}
};

struct DegenerateBatch : Error {
  explicit DegenerateBatch(const std::string& w) : Error(ErrorKind::Config, "degenerate batch: " + w) {}
};

struct SingularSystem : Error {
  explicit SingularSystem(const std::string& w) : Error(ErrorKind::Numeric, "singular system: " + w) {}
};

struct NonFinite : Error {
  explicit NonFinite(const std::string& w) : Error(ErrorKind::Numeric, "non-finite value: " + w) {}
};

struct BisectionFailure : Error {
  explicit BisectionFailure(const std::string& w) : Error(ErrorKind::Numeric, "bisection failure: " + w) {}
};

struct IoError : Error {
  explicit IoError(const std::string& w) : Error(ErrorKind::Io, w) {}
};

}  // namespace topopt
