#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace tameta {

// Base class for all library errors.
class error : public std::runtime_error {
 public:
  explicit error(const std::string& what) : std::runtime_error(what) {}
};

// Shape or dimension mismatch at an op boundary.
class shape_error : public error {
 public:
  using error::error;
};

// Non-finite value produced by an op (fail-fast policy).
class numeric_error : public error {
 public:
  using error::error;
};

// Misuse of the computation record (non-scalar output, foreign tensor, ...).
class graph_error : public error {
 public:
  using error::error;
};

// Invalid experiment configuration. CLI maps this to exit code 1.
class config_error : public error {
 public:
  using error::error;
};

// Training diverged (loss non-finite or above the abort threshold).
// CLI maps this to exit code 2.
class divergence_error : public error {
 public:
  using error::error;
};

inline bool all_finite(const std::vector<double>& v) {
  for (double x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

}  // namespace tameta
