#pragma once

#include <stdexcept>
#include <string>

namespace fsvi {

// Shape/dimension mismatches between tensors or between a tensor and a model.
class ShapeError : public std::runtime_error {
 public:
  explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};

// Malformed or inconsistent input data (dataset files, label ranges, ...).
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

// Invalid configuration values or combinations.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Numerical error states: NaN/Inf where a finite value is required, negative
// variances, non-PSD matrices that stay broken after jitter, ...
class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

// Size limits that exist to keep dense O(M^2)/O(M^3) paths honest.
class CapacityError : public std::runtime_error {
 public:
  explicit CapacityError(const std::string& what) : std::runtime_error(what) {}
};

// Misuse of an object's lifecycle (backward twice, reading a grad that was
// never computed, ...).
class StateError : public std::runtime_error {
 public:
  explicit StateError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace fsvi
