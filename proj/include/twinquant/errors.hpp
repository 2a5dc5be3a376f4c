#pragma once

#include <stdexcept>

namespace twinquant {

// Shape or size mismatch between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Malformed, out-of-range or stale data (bad magic, bad codes, hash mismatch).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A documented runtime invariant failed (accumulator bounds, internal state).
class InvariantError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace twinquant
