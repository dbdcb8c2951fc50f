#pragma once

#include <cstddef>

// Dense row-major GEMM kernels shared by linear, conv2d (after patch
// unrolling) and the benchmark harness. Every kernel has a fixed
// accumulation order, so results are bit-reproducible run to run.
namespace nmr::kernels {

// C[M,N] (+)= A[M,K] * B[K,N]
template <typename T>
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C,
             bool accumulate);

// C[M,N] += A[M,K] * B[N,K]^T
template <typename T>
void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C);

// C[M,N] += A[K,M]^T * B[K,N]
template <typename T>
void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C);

// Unrolls one image [C,H,W] into columns [C*k*k, Ho*Wo].
template <typename T>
void im2col(const T* image, std::size_t channels, std::size_t height, std::size_t width,
            std::size_t kernel, std::size_t stride, std::size_t padding, T* cols);

// Adjoint of im2col: scatters columns back, accumulating into image.
template <typename T>
void col2im(const T* cols, std::size_t channels, std::size_t height, std::size_t width,
            std::size_t kernel, std::size_t stride, std::size_t padding, T* image);

inline std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                                   std::size_t padding) {
  return (in + 2 * padding - kernel) / stride + 1;
}

}  // namespace nmr::kernels
