#pragma once

#include <stdexcept>
#include <string>

namespace diffprune {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor shapes incompatible with the requested operation.
struct ShapeError : Error {
  using Error::Error;
};

// NaN/Inf produced or consumed, or a numerical invariant breached.
struct NumericError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

}  // namespace diffprune
