#pragma once

#include <cstddef>

namespace modal_emu::kernels {

// Row-major C[m x n] += A[m x k] * B[k x n]
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
             double* c);
// C[m x n] += A^T * B with A stored [k x m]
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
             double* c);
// C[m x n] += A * B^T with B stored [n x k]
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
             double* c);

}  // namespace modal_emu::kernels
