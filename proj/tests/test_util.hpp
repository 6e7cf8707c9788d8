#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "fsvi/tensor.hpp"

// Shared helpers for the test binaries. Everything here is deliberately
// independent of the library's own numerics so it can serve as an oracle:
// finite differences never touch the tape, reference reductions are plain
// loops.
namespace testutil {

// Relative error with an absolute floor so that near-zero pairs compare
// sanely: |a-b| / max(|a|, |b|, floor).
inline double rel_err(double a, double b, double floor = 1e-8) {
  const double scale = std::max(std::max(std::fabs(a), std::fabs(b)), floor);
  return std::fabs(a - b) / scale;
}

// Central finite difference d f / d x_i for a scalar function over a flat
// parameter vector. `x` is copied per probe; `f` must be a pure function of
// its argument.
inline std::vector<double> fd_gradient(const std::function<double(const std::vector<double>&)>& f,
                                       const std::vector<double>& x, double h = 1e-5) {
  std::vector<double> g(x.size());
  std::vector<double> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double xi = x[i];
    probe[i] = xi + h;
    const double up = f(probe);
    probe[i] = xi - h;
    const double down = f(probe);
    probe[i] = xi;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

// Max elementwise relative error between two gradient vectors.
inline double max_rel_err(const std::vector<double>& a, const std::vector<double>& b,
                          double floor = 1e-6) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, rel_err(a[i], b[i], floor));
  return worst;
}

inline double max_abs_diff(const fsvi::Tensor2& a, const fsvi::Tensor2& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::fabs(a.data[i] - b.data[i]));
  return worst;
}

}  // namespace testutil
