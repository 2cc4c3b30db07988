#pragma once

#include <stdexcept>
#include <string>

namespace latentflow {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Raised when a value leaves the finite range (strict mode) or an
/// iterative routine cannot produce a finite result.
class NumericError : public Error {
 public:
  using Error::Error;
};

class UnsupportedPrimitive : public Error {
 public:
  explicit UnsupportedPrimitive(std::string primitive)
      : Error("unsupported primitive: " + primitive), primitive_(std::move(primitive)) {}
  const std::string& primitive() const noexcept { return primitive_; }

 private:
  std::string primitive_;
};

class TapeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed on-disk data: IDX files, checkpoints.
class FormatError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

}  // namespace latentflow
