#pragma once

#include <stdexcept>
#include <string>

namespace scedit {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes do not conform to what an operation expects.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration: unknown kinds, out-of-range hyperparameters,
// indivisible spatial sizes and the like.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Non-finite values encountered where finite ones are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Graph misuse, e.g. backward through a non-scalar or an inference leaf.
class AutogradError : public Error {
 public:
  using Error::Error;
};

// A file could not be opened, read or written.
class IoError : public Error {
 public:
  using Error::Error;
};

enum class CheckpointErrc {
  kIo = 1,
  kBadMagic = 2,
  kBadVersion = 3,
  kTruncated = 4,
  kLayoutMismatch = 5,
};

class CheckpointError : public Error {
 public:
  CheckpointError(CheckpointErrc code, const std::string& what)
      : Error(what), code_(code) {}
  CheckpointErrc code() const noexcept { return code_; }

 private:
  CheckpointErrc code_;
};

}  // namespace scedit
