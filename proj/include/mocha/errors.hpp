#pragma once

#include <stdexcept>
#include <string>

namespace mocha {

// Base of every error raised by the library. The CLI maps subclasses onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or extent contract violated.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// API misuse: wrong stage, loss not on tape, misaligned gradients, bad flags.
class UsageError : public Error {
 public:
  using Error::Error;
};

// Malformed file contents (NDT, checkpoint, config).
class FormatError : public Error {
 public:
  using Error::Error;
};

// Non-finite values, non-convergence, divergence.
class NumericalError : public Error {
 public:
  using Error::Error;
};

// Statistic undefined for the given input (e.g. zero-variance channel).
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

// Invalid synthesis or model configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace mocha
