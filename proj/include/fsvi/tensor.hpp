#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "fsvi/errors.hpp"

namespace fsvi {

// Dense row-major 2-D array of doubles. All numerics in the library run in
// 64-bit; there is deliberately no expression-template cleverness here — the
// hot loops live in linalg.hpp and the autodiff graph, and everything else is
// clearer as plain loops.
struct Tensor2 {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;  // rows * cols entries, row-major

  Tensor2() = default;
  Tensor2(std::size_t r, std::size_t c, double fill = 0.0)
      : rows(r), cols(c), data(r * c, fill) {}
  Tensor2(std::size_t r, std::size_t c, std::vector<double> values)
      : rows(r), cols(c), data(std::move(values)) {
    if (data.size() != rows * cols) {
      throw ShapeError("Tensor2: data length " + std::to_string(data.size()) +
                       " does not match shape " + std::to_string(rows) + "x" +
                       std::to_string(cols));
    }
  }

  std::size_t size() const { return rows * cols; }

  // Unchecked element access for hot paths.
  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  double* row_ptr(std::size_t r) { return data.data() + r * cols; }
  const double* row_ptr(std::size_t r) const { return data.data() + r * cols; }

  // Checked access for test/setup code.
  double& at(std::size_t r, std::size_t c) {
    check_index(r, c);
    return data[r * cols + c];
  }
  double at(std::size_t r, std::size_t c) const {
    check_index(r, c);
    return data[r * cols + c];
  }

  bool same_shape(const Tensor2& o) const { return rows == o.rows && cols == o.cols; }

  std::string shape_str() const {
    return std::to_string(rows) + "x" + std::to_string(cols);
  }

 private:
  void check_index(std::size_t r, std::size_t c) const {
    if (r >= rows || c >= cols) {
      throw ShapeError("Tensor2: index (" + std::to_string(r) + "," + std::to_string(c) +
                       ") out of range for " + shape_str());
    }
  }
};

// Throws NumericalError if any entry is NaN or infinite. `what` names the
// tensor in the message so abort diagnostics are actionable.
inline void ensure_finite(const Tensor2& t, const char* what) {
  for (double v : t.data) {
    if (!std::isfinite(v)) {
      throw NumericalError(std::string(what) + ": non-finite value encountered");
    }
  }
}

inline void ensure_finite(const std::vector<double>& v, const char* what) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw NumericalError(std::string(what) + ": non-finite value encountered");
    }
  }
}

inline void require_same_shape(const Tensor2& a, const Tensor2& b, const char* op) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " +
                     b.shape_str());
  }
}

}  // namespace fsvi
