// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>

namespace fedsim::kernels {

// Row-major accumulating products, C += op(A) * op(B).
// The summation order is fixed so results are reproducible bit for bit.

// C[m x n] += A[m x k] * B[k x n]
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a,
             const double* b, double* c) noexcept;

// C[m x n] += A^T * B, with A stored [k x m] and B stored [k x n]
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a,
             const double* b, double* c) noexcept;

// C[m x n] += A * B^T, with A stored [m x k] and B stored [n x k]
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* a,
             const double* b, double* c) noexcept;

double dot(std::size_t n, const double* x, const double* y) noexcept;

}  // namespace fedsim::kernels
