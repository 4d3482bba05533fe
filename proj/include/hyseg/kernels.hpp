#pragma once

// Plain-loop GEMM kernels. Loop orders keep the innermost loop contiguous so
// the compiler vectorizes it; summation order is fixed, so results are
// deterministic for a given build.

#include <cstddef>
#include <vector>

namespace hyseg::kernels {

// C[M,N] (+)= A[M,K] * B[K,N]
template <typename T>
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const T* __restrict A, const T* __restrict B,
             T* __restrict C, bool accumulate) {
  if (!accumulate) {
    for (std::size_t i = 0; i < M * N; ++i) C[i] = T(0);
  }
  constexpr std::size_t kBlockK = 256;
  for (std::size_t k0 = 0; k0 < K; k0 += kBlockK) {
    const std::size_t k1 = k0 + kBlockK < K ? k0 + kBlockK : K;
    for (std::size_t i = 0; i < M; ++i) {
      T* __restrict c = C + i * N;
      const T* a = A + i * K;
      for (std::size_t k = k0; k < k1; ++k) {
        const T av = a[k];
        const T* __restrict b = B + k * N;
        for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
      }
    }
  }
}

// C[M,N] (+)= A[K,M]^T * B[K,N]
template <typename T>
void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const T* __restrict A, const T* __restrict B,
             T* __restrict C, bool accumulate) {
  if (!accumulate) {
    for (std::size_t i = 0; i < M * N; ++i) C[i] = T(0);
  }
  for (std::size_t k = 0; k < K; ++k) {
    const T* a = A + k * M;
    const T* __restrict b = B + k * N;
    for (std::size_t i = 0; i < M; ++i) {
      const T av = a[i];
      T* __restrict c = C + i * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

template <typename T>
void transpose(std::size_t rows, std::size_t cols, const T* __restrict src, T* __restrict dst) {
  constexpr std::size_t kTile = 32;
  for (std::size_t r0 = 0; r0 < rows; r0 += kTile) {
    for (std::size_t c0 = 0; c0 < cols; c0 += kTile) {
      const std::size_t r1 = r0 + kTile < rows ? r0 + kTile : rows;
      const std::size_t c1 = c0 + kTile < cols ? c0 + kTile : cols;
      for (std::size_t r = r0; r < r1; ++r)
        for (std::size_t c = c0; c < c1; ++c) dst[c * rows + r] = src[r * cols + c];
    }
  }
}

// C[M,N] (+)= A[M,K] * B[N,K]^T
template <typename T>
void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C, bool accumulate) {
  std::vector<T> bt(K * N);
  transpose(N, K, B, bt.data());
  gemm_nn(M, N, K, A, bt.data(), C, accumulate);
}

}  // namespace hyseg::kernels
