#pragma once

#include <stdexcept>
#include <string>

namespace mcas {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or channel disagreement between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration: bad kernel size, malformed spec, unknown keys.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Precondition violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Object used in the wrong state (e.g. a consumed tape).
class StateError : public Error {
 public:
  using Error::Error;
};

class CapacityError : public Error {
 public:
  using Error::Error;
};

class LookupError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf produced somewhere in a computation.
class NumericalError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace mcas
