#pragma once

#include <cstddef>

#include "fsvi/tensor.hpp"

namespace fsvi::linalg {

// C (m x n) += A (m x k) * B (k x n). ikj loop order: the inner loop streams
// one row of B and one row of C contiguously, which the compiler vectorizes.
void matmul_nn_acc(const double* a, const double* b, double* c, std::size_t m,
                   std::size_t k, std::size_t n);

// C (m x n) += A (m x k) * B^T (n x k).
void matmul_nt_acc(const double* a, const double* b, double* c, std::size_t m,
                   std::size_t k, std::size_t n);

// C (k x n) += A^T (m x k) * B (m x n).
void matmul_tn_acc(const double* a, const double* b, double* c, std::size_t m,
                   std::size_t k, std::size_t n);

Tensor2 matmul(const Tensor2& a, const Tensor2& b);     // A * B
Tensor2 matmul_nt(const Tensor2& a, const Tensor2& b);  // A * B^T
Tensor2 matmul_tn(const Tensor2& a, const Tensor2& b);  // A^T * B

// In-place Cholesky factorization A = L L^T (lower triangle of `a` receives L;
// the upper triangle is left untouched). Throws NumericalError if a pivot is
// not strictly positive — callers add jitter beforehand.
void cholesky_inplace(Tensor2& a);

// Sum of log of the diagonal, times 2: log|A| given its Cholesky factor L.
double cholesky_logdet(const Tensor2& l);

// Solve L y = b, then L^T x = y for every column of b (in place).
void cholesky_solve_inplace(const Tensor2& l, Tensor2& b);

// Reference-path helpers (used by the verification suite as an independent
// route; intentionally a different algorithm from the Cholesky path).
// LU with partial pivoting; returns determinant. `a` is destroyed.
double lu_determinant(Tensor2 a);
// Gauss-Jordan inverse. Throws NumericalError on (near-)singular input.
Tensor2 gauss_jordan_inverse(Tensor2 a);

}  // namespace fsvi::linalg
