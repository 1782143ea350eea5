#pragma once

#include <stdexcept>
#include <string>

namespace tta {

// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Inconsistent shapes, dimensions, or hyperparameters.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Non-finite values or divergence.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Bad caller-supplied data (labels out of range, non-simplex rows, ...).
class InputError : public Error {
 public:
  using Error::Error;
};

// Operation invoked on an object in the wrong state.
class StateError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace tta
