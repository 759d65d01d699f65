#pragma once

#include <stdexcept>
#include <string>

namespace crft {

// Base for every error raised by the library. The CLI maps the concrete
// subclasses onto its exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shape or argument contract violated.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A primitive produced NaN/Inf, or a loss became non-finite.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Misuse of the autodiff graph (non-scalar backward, replayed graph, ...).
class GraphError : public Error {
 public:
  using Error::Error;
};

// File missing, unreadable, truncated or carrying a bad magic.
class IoError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration value or flag.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace crft
