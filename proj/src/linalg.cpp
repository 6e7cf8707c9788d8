#include "fsvi/linalg.hpp"

#include <cmath>
#include <cstring>

namespace fsvi::linalg {

void matmul_nn_acc(const double* a, const double* b, double* c, std::size_t m,
                   std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;  // zero-initialized heads and ReLU outputs are common
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void matmul_nt_acc(const double* a, const double* b, double* c, std::size_t m,
                   std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

void matmul_tn_acc(const double* a, const double* b, double* c, std::size_t m,
                   std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

Tensor2 matmul(const Tensor2& a, const Tensor2& b) {
  if (a.cols != b.rows) {
    throw ShapeError("matmul: inner dimensions disagree, " + a.shape_str() + " * " +
                     b.shape_str());
  }
  Tensor2 c(a.rows, b.cols);
  matmul_nn_acc(a.data.data(), b.data.data(), c.data.data(), a.rows, a.cols, b.cols);
  return c;
}

Tensor2 matmul_nt(const Tensor2& a, const Tensor2& b) {
  if (a.cols != b.cols) {
    throw ShapeError("matmul_nt: inner dimensions disagree, " + a.shape_str() + " * " +
                     b.shape_str() + "^T");
  }
  Tensor2 c(a.rows, b.rows);
  matmul_nt_acc(a.data.data(), b.data.data(), c.data.data(), a.rows, a.cols, b.rows);
  return c;
}

Tensor2 matmul_tn(const Tensor2& a, const Tensor2& b) {
  if (a.rows != b.rows) {
    throw ShapeError("matmul_tn: inner dimensions disagree, " + a.shape_str() + "^T * " +
                     b.shape_str());
  }
  Tensor2 c(a.cols, b.cols);
  matmul_tn_acc(a.data.data(), b.data.data(), c.data.data(), a.rows, a.cols, b.cols);
  return c;
}

void cholesky_inplace(Tensor2& a) {
  if (a.rows != a.cols) throw ShapeError("cholesky: matrix must be square, got " + a.shape_str());
  const std::size_t n = a.rows;
  double* m = a.data.data();
  for (std::size_t j = 0; j < n; ++j) {
    double d = m[j * n + j];
    for (std::size_t p = 0; p < j; ++p) d -= m[j * n + p] * m[j * n + p];
    if (!(d > 0.0) || !std::isfinite(d)) {
      throw NumericalError("cholesky: matrix not positive definite at pivot " +
                           std::to_string(j) + " (value " + std::to_string(d) + ")");
    }
    const double ljj = std::sqrt(d);
    m[j * n + j] = ljj;
    const double inv = 1.0 / ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = m[i * n + j];
      for (std::size_t p = 0; p < j; ++p) s -= m[i * n + p] * m[j * n + p];
      m[i * n + j] = s * inv;
    }
  }
}

double cholesky_logdet(const Tensor2& l) {
  double acc = 0.0;
  for (std::size_t i = 0; i < l.rows; ++i) acc += std::log(l(i, i));
  return 2.0 * acc;
}

void cholesky_solve_inplace(const Tensor2& l, Tensor2& b) {
  if (l.rows != b.rows) {
    throw ShapeError("cholesky_solve: rhs rows " + b.shape_str() + " vs factor " +
                     l.shape_str());
  }
  const std::size_t n = l.rows;
  const std::size_t ncol = b.cols;
  // Forward substitution L y = b.
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < i; ++p) {
      const double lip = l(i, p);
      if (lip == 0.0) continue;
      for (std::size_t c = 0; c < ncol; ++c) b(i, c) -= lip * b(p, c);
    }
    const double inv = 1.0 / l(i, i);
    for (std::size_t c = 0; c < ncol; ++c) b(i, c) *= inv;
  }
  // Back substitution L^T x = y.
  for (std::size_t ii = n; ii-- > 0;) {
    for (std::size_t p = ii + 1; p < n; ++p) {
      const double lpi = l(p, ii);
      if (lpi == 0.0) continue;
      for (std::size_t c = 0; c < ncol; ++c) b(ii, c) -= lpi * b(p, c);
    }
    const double inv = 1.0 / l(ii, ii);
    for (std::size_t c = 0; c < ncol; ++c) b(ii, c) *= inv;
  }
}

double lu_determinant(Tensor2 a) {
  if (a.rows != a.cols) throw ShapeError("lu_determinant: matrix must be square");
  const std::size_t n = a.rows;
  double det = 1.0;
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t pivot = col;
    double best = std::fabs(a(col, col));
    for (std::size_t r = col + 1; r < n; ++r) {
      const double v = std::fabs(a(r, col));
      if (v > best) {
        best = v;
        pivot = r;
      }
    }
    if (best == 0.0) return 0.0;
    if (pivot != col) {
      for (std::size_t c = 0; c < n; ++c) std::swap(a(pivot, c), a(col, c));
      det = -det;
    }
    det *= a(col, col);
    const double inv = 1.0 / a(col, col);
    for (std::size_t r = col + 1; r < n; ++r) {
      const double f = a(r, col) * inv;
      if (f == 0.0) continue;
      for (std::size_t c = col + 1; c < n; ++c) a(r, c) -= f * a(col, c);
    }
  }
  return det;
}

Tensor2 gauss_jordan_inverse(Tensor2 a) {
  if (a.rows != a.cols) throw ShapeError("gauss_jordan_inverse: matrix must be square");
  const std::size_t n = a.rows;
  Tensor2 inv(n, n);
  for (std::size_t i = 0; i < n; ++i) inv(i, i) = 1.0;
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t pivot = col;
    double best = std::fabs(a(col, col));
    for (std::size_t r = col + 1; r < n; ++r) {
      const double v = std::fabs(a(r, col));
      if (v > best) {
        best = v;
        pivot = r;
      }
    }
    if (best < 1e-300) throw NumericalError("gauss_jordan_inverse: singular matrix");
    if (pivot != col) {
      for (std::size_t c = 0; c < n; ++c) {
        std::swap(a(pivot, c), a(col, c));
        std::swap(inv(pivot, c), inv(col, c));
      }
    }
    const double scale = 1.0 / a(col, col);
    for (std::size_t c = 0; c < n; ++c) {
      a(col, c) *= scale;
      inv(col, c) *= scale;
    }
    for (std::size_t r = 0; r < n; ++r) {
      if (r == col) continue;
      const double f = a(r, col);
      if (f == 0.0) continue;
      for (std::size_t c = 0; c < n; ++c) {
        a(r, c) -= f * a(col, c);
        inv(r, c) -= f * inv(col, c);
      }
    }
  }
  return inv;
}

}  // namespace fsvi::linalg
