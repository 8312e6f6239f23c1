#include "kernels.hpp"

#include <algorithm>

namespace flowsynth::kernels {

namespace {

constexpr std::size_t kRows = 4;
constexpr std::size_t kCols = 16;

// Computes an R x W tile of A*B; every element is summed over p = 0..k-1 in
// order, so the value of an element never depends on the tiling.
template <std::size_t R>
void tile(const float* a, const float* b, float* c, std::size_t k, std::size_t n, std::size_t lda, std::size_t j0,
          std::size_t width, bool accumulate) {
  double acc[R][kCols] = {};
  if (width == kCols) {
    for (std::size_t p = 0; p < k; ++p) {
      const float* brow = b + p * n + j0;
      double bv[kCols];
      for (std::size_t j = 0; j < kCols; ++j) bv[j] = brow[j];
      for (std::size_t r = 0; r < R; ++r) {
        const double av = a[r * lda + p];
        for (std::size_t j = 0; j < kCols; ++j) acc[r][j] += av * bv[j];
      }
    }
  } else {
    for (std::size_t p = 0; p < k; ++p) {
      const float* brow = b + p * n + j0;
      for (std::size_t r = 0; r < R; ++r) {
        const double av = a[r * lda + p];
        for (std::size_t j = 0; j < width; ++j) acc[r][j] += av * static_cast<double>(brow[j]);
      }
    }
  }
  for (std::size_t r = 0; r < R; ++r) {
    float* crow = c + r * n + j0;
    if (accumulate) {
      for (std::size_t j = 0; j < width; ++j) crow[j] = static_cast<float>(crow[j] + acc[r][j]);
    } else {
      for (std::size_t j = 0; j < width; ++j) crow[j] = static_cast<float>(acc[r][j]);
    }
  }
}

template <std::size_t R>
void row_block(const float* a, const float* b, float* c, std::size_t k, std::size_t n, bool accumulate) {
  for (std::size_t j0 = 0; j0 < n; j0 += kCols) {
    tile<R>(a, b, c, k, n, k, j0, std::min(kCols, n - j0), accumulate);
  }
}

}  // namespace

void gemm_nn(const float* a, const float* b, float* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate) {
  std::size_t i = 0;
  for (; i + kRows <= m; i += kRows) row_block<kRows>(a + i * k, b, c + i * n, k, n, accumulate);
  for (; i < m; ++i) row_block<1>(a + i * k, b, c + i * n, k, n, accumulate);
}

void gemm_tn_acc(const float* a, const float* b, float* c, std::size_t m, std::size_t k, std::size_t n) {
  std::vector<float> at(k * m);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) at[p * m + i] = a[i * k + p];
  gemm_nn(at.data(), b, c, k, m, n, true);
}

void gemm_nt_acc(const float* a, const float* b, float* c, std::size_t m, std::size_t n, std::size_t k) {
  std::vector<float> bt(n * k);
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];
  gemm_nn(a, bt.data(), c, m, n, k, true);
}

double dot(const float* a, const float* b, std::size_t n) noexcept {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

}  // namespace flowsynth::kernels
