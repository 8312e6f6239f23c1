#pragma once

// Row-major float GEMM helpers. Every output row is reduced in double
// precision in a fixed order, so a row's result depends only on its own
// inputs.

#include <cstddef>
#include <vector>

namespace flowsynth::kernels {

// C[m,n] (+)= A[m,k] * B[k,n]
void gemm_nn(const float* a, const float* b, float* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate);

// C[k,n] += A[m,k]^T * B[m,n]
void gemm_tn_acc(const float* a, const float* b, float* c, std::size_t m, std::size_t k, std::size_t n);

// C[m,k] += A[m,n] * B[k,n]^T
void gemm_nt_acc(const float* a, const float* b, float* c, std::size_t m, std::size_t n, std::size_t k);

double dot(const float* a, const float* b, std::size_t n) noexcept;

}  // namespace flowsynth::kernels
