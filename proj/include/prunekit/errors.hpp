#pragma once

#include <stdexcept>
#include <string>

namespace prunekit {

// Shape/dimension disagreement between tensors or between a mask and a model.
class ShapeError : public std::runtime_error {
 public:
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad user-supplied configuration (names the violated field).
class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// API misuse: a precondition the caller was responsible for.
class ContractError : public std::runtime_error {
 public:
  explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// Out-of-range index (e.g. a cross-entropy target).
class IndexError : public std::runtime_error {
 public:
  explicit IndexError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values detected at an op boundary, or training divergence.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// File I/O and serialization failures (names the offending field).
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// A pipeline stage failed; carries the stage name for diagnostics.
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& cause)
      : std::runtime_error("stage '" + stage + "' failed: " + cause), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

}  // namespace prunekit
