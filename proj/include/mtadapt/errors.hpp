#pragma once

#include <stdexcept>
#include <string>

namespace mtadapt {

/// Operand dimensions do not fit the operation. The message names both shapes.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Invalid configuration value (rank too large, bad ratio, unknown key, ...).
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// A numeric invariant was violated (NaN/Inf in a result, NaN loss).
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Corrupt or truncated file, bad magic/version.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace mtadapt
