#pragma once

#include <stdexcept>
#include <string>

namespace conbat {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes or dimension mismatches.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values, divergence, NaN losses.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Malformed files, invalid datasets, failed validation of inputs.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Invalid arguments or configuration values.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Operation not available for the configured critic variant.
class UnsupportedVariantError : public Error {
 public:
  using Error::Error;
};

}  // namespace conbat
