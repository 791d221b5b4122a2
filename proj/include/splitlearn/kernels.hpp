#pragma once

#include <cstddef>

// Row-major matrix kernels with a fixed floating-point operation order.
//
// gemm_nn/gemm_tn accumulate every output element in ascending order of the contraction index with
// element-wise inner loops; gemm_nt uses the fixed eight-lane split in dot(). Neither depends on buffer
// alignment or on which allocation holds the data.

namespace splitlearn::kernels {

/// C[m x n] += A[m x k] * B[k x n]
template <typename T>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const T* __restrict a, const T* __restrict b, T* __restrict c) {
  for (std::size_t i = 0; i < m; ++i) {
    T* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = a[i * k + p];
      const T* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

/// C[m x n] += A^T * B where A is [k x m] and B is [k x n]
template <typename T>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const T* __restrict a, const T* __restrict b, T* __restrict c) {
  for (std::size_t i = 0; i < m; ++i) {
    T* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T api = a[p * m + i];
      const T* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += api * bp[j];
    }
  }
}

/// Dot product split over eight interleaved partial sums (lane l takes indices = l mod 8),
/// combined pairwise at the end. The grouping is fixed, so the result is reproducible.
template <typename T>
T dot(std::size_t n, const T* __restrict a, const T* __restrict b) {
  constexpr std::size_t kLanes = 8;
  T acc[kLanes] = {};
  const std::size_t full = n - n % kLanes;
  for (std::size_t p = 0; p < full; p += kLanes) {
    for (std::size_t l = 0; l < kLanes; ++l) acc[l] += a[p + l] * b[p + l];
  }
  for (std::size_t l = 0; l < n - full; ++l) acc[l] += a[full + l] * b[full + l];
  return ((acc[0] + acc[4]) + (acc[2] + acc[6])) + ((acc[1] + acc[5]) + (acc[3] + acc[7]));
}

/// C[m x n] += A[m x k] * B^T where B is [n x k]
template <typename T>
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const T* __restrict a, const T* __restrict b, T* __restrict c) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) c[i * n + j] += dot(k, a + i * k, b + j * k);
}

/// out[cols x rows] = in[rows x cols]^T
template <typename T>
void transpose(std::size_t rows, std::size_t cols, const T* __restrict in, T* __restrict out) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = in[r * cols + c];
}

}  // namespace splitlearn::kernels
