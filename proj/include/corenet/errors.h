#pragma once

#include <stdexcept>
#include <string>

namespace corenet {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor extents.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Invalid hyperparameter or configuration value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Caller broke an API precondition (e.g. backward on a non-scalar).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Malformed file: bad magic, bad manifest, unknown dtype.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// File parses but its payload does not match the declared shape.
class CorruptionError : public Error {
 public:
  using Error::Error;
};

class NotFoundError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf produced or a loss diverged.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Two evaluations of a function that should be pure disagreed.
class ReproducibilityError : public Error {
 public:
  using Error::Error;
};

}  // namespace corenet
