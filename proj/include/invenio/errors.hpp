#pragma once

#include <stdexcept>
#include <string>

namespace invenio {

// Base for everything thrown by this library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor/operator shape incompatibilities. Messages name the offending node.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// API used out of order (e.g. backward before forward).
class StateError : public Error {
 public:
  using Error::Error;
};

// Feature requested from an object built without it (higher-order grads).
class CapabilityError : public Error {
 public:
  using Error::Error;
};

// Non-finite values, failed convergence, divergence.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Invalid architecture / generator parameters.
class SpecError : public Error {
 public:
  using Error::Error;
};

// Dataset contents violate a precondition (empty set, bad labels, ...).
class DataError : public Error {
 public:
  using Error::Error;
};

// On-disk container problems: bad magic, version, truncation.
class FormatError : public DataError {
 public:
  using DataError::DataError;
};

// Experiment configuration problems.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Training diverged; carries iteration/task context.
class DivergenceError : public NumericError {
 public:
  DivergenceError(const std::string& msg, int iteration, int task)
      : NumericError(msg), iteration(iteration), task(task) {}
  int iteration;
  int task;
};

}  // namespace invenio
