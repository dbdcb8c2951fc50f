#include "nmroute/kernels.hpp"

#include <algorithm>

namespace nmr::kernels {

namespace {

constexpr std::size_t kRowBlock = 4;
constexpr std::size_t kColBlock = 64;

// C[i, j] (+)= sum_k a(i, k) * B[k, j] with a(i, k) = A[i * ars + k * acs].
// Every output sums over k in increasing order, so blocking never changes
// the result bits.
template <typename T>
void gemm_rows(std::size_t M, std::size_t N, std::size_t K, const T* __restrict A,
               std::size_t ars, std::size_t acs, const T* __restrict B, T* __restrict C,
               bool accumulate) {
  for (std::size_t i0 = 0; i0 < M; i0 += kRowBlock) {
    const std::size_t rb = std::min(kRowBlock, M - i0);
    for (std::size_t j0 = 0; j0 < N; j0 += kColBlock) {
      const std::size_t cb = std::min(kColBlock, N - j0);
      if (rb == kRowBlock && cb == kColBlock) {
        T acc[kRowBlock][kColBlock];
        for (std::size_t r = 0; r < kRowBlock; ++r) {
          const T* c = C + (i0 + r) * N + j0;
          for (std::size_t j = 0; j < kColBlock; ++j) acc[r][j] = accumulate ? c[j] : T(0);
        }
        for (std::size_t k = 0; k < K; ++k) {
          const T* b = B + k * N + j0;
          for (std::size_t r = 0; r < kRowBlock; ++r) {
            const T a = A[(i0 + r) * ars + k * acs];
            for (std::size_t j = 0; j < kColBlock; ++j) acc[r][j] += a * b[j];
          }
        }
        for (std::size_t r = 0; r < kRowBlock; ++r) {
          T* c = C + (i0 + r) * N + j0;
          for (std::size_t j = 0; j < kColBlock; ++j) c[j] = acc[r][j];
        }
        continue;
      }
      for (std::size_t r = 0; r < rb; ++r) {
        T* c = C + (i0 + r) * N + j0;
        if (!accumulate) std::fill(c, c + cb, T(0));
        for (std::size_t k = 0; k < K; ++k) {
          const T a = A[(i0 + r) * ars + k * acs];
          const T* b = B + k * N + j0;
          for (std::size_t j = 0; j < cb; ++j) c[j] += a * b[j];
        }
      }
    }
  }
}

// Eight independent partial sums combined in a fixed tree; vectorizes
// without reassociation flags and stays deterministic.
template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
  T acc[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t l = 0; l < 8; ++l) acc[l] += a[i + l] * b[i + l];
  }
  T tail = 0;
  for (; i < n; ++i) tail += a[i] * b[i];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
}

// Four by four block of dot products with the same summation order as dot().
template <typename T>
void dot_block(const T* __restrict a, const T* __restrict b, std::size_t K, T* __restrict c,
               std::size_t ldc) {
  constexpr std::size_t R = 4;
  T acc[R][R][8] = {};
  std::size_t i = 0;
  for (; i + 8 <= K; i += 8) {
    for (std::size_t r = 0; r < R; ++r) {
      for (std::size_t s = 0; s < R; ++s) {
        for (std::size_t l = 0; l < 8; ++l) acc[r][s][l] += a[r * K + i + l] * b[s * K + i + l];
      }
    }
  }
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t s = 0; s < R; ++s) {
      T tail = 0;
      for (std::size_t t = i; t < K; ++t) tail += a[r * K + t] * b[s * K + t];
      const T* v = acc[r][s];
      c[r * ldc + s] += ((v[0] + v[1]) + (v[2] + v[3])) + ((v[4] + v[5]) + (v[6] + v[7])) + tail;
    }
  }
}

}  // namespace

template <typename T>
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C,
             bool accumulate) {
  gemm_rows(M, N, K, A, K, 1, B, C, accumulate);
}

template <typename T>
void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
  std::size_t i = 0;
  for (; i + 4 <= M; i += 4) {
    std::size_t j = 0;
    for (; j + 4 <= N; j += 4) dot_block(A + i * K, B + j * K, K, C + i * N + j, N);
    for (; j < N; ++j) {
      for (std::size_t r = 0; r < 4; ++r) C[(i + r) * N + j] += dot(A + (i + r) * K, B + j * K, K);
    }
  }
  for (; i < M; ++i) {
    for (std::size_t j = 0; j < N; ++j) C[i * N + j] += dot(A + i * K, B + j * K, K);
  }
}

template <typename T>
void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
  gemm_rows(M, N, K, A, 1, M, B, C, true);
}

namespace {

// Output columns [lo, hi) whose input column ow * stride + offset - pad
// falls inside [0, width).
struct ColumnRange {
  std::size_t lo, hi;
};

ColumnRange valid_columns(std::size_t out_w, std::size_t width, std::size_t offset,
                          std::size_t stride, std::size_t padding) {
  std::size_t lo = 0;
  if (padding > offset) lo = (padding - offset + stride - 1) / stride;
  const std::size_t limit = width + padding - offset;  // ow * stride < limit
  std::size_t hi = (limit + stride - 1) / stride;
  hi = std::min(hi, out_w);
  lo = std::min(lo, hi);
  return {lo, hi};
}

}  // namespace

template <typename T>
void im2col(const T* image, std::size_t channels, std::size_t height, std::size_t width,
            std::size_t kernel, std::size_t stride, std::size_t padding, T* cols) {
  const std::size_t out_h = conv_out_extent(height, kernel, stride, padding);
  const std::size_t out_w = conv_out_extent(width, kernel, stride, padding);
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(padding);
  for (std::size_t c = 0; c < channels; ++c) {
    const T* plane = image + c * height * width;
    for (std::size_t ki = 0; ki < kernel; ++ki) {
      for (std::size_t kj = 0; kj < kernel; ++kj) {
        T* row = cols + ((c * kernel + ki) * kernel + kj) * out_h * out_w;
        const auto [lo, hi] = valid_columns(out_w, width, kj, stride, padding);
        for (std::size_t oh = 0; oh < out_h; ++oh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * stride + ki) - pad;
          T* dst = row + oh * out_w;
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(height)) {
            std::fill(dst, dst + out_w, T(0));
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(ih) * width + kj - padding;
          std::fill(dst, dst + lo, T(0));
          if (stride == 1) {
            std::copy(src + lo, src + hi, dst + lo);
          } else {
            for (std::size_t ow = lo; ow < hi; ++ow) dst[ow] = src[ow * stride];
          }
          std::fill(dst + hi, dst + out_w, T(0));
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, std::size_t channels, std::size_t height, std::size_t width,
            std::size_t kernel, std::size_t stride, std::size_t padding, T* image) {
  const std::size_t out_h = conv_out_extent(height, kernel, stride, padding);
  const std::size_t out_w = conv_out_extent(width, kernel, stride, padding);
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(padding);
  for (std::size_t c = 0; c < channels; ++c) {
    T* plane = image + c * height * width;
    for (std::size_t ki = 0; ki < kernel; ++ki) {
      for (std::size_t kj = 0; kj < kernel; ++kj) {
        const T* row = cols + ((c * kernel + ki) * kernel + kj) * out_h * out_w;
        const auto [lo, hi] = valid_columns(out_w, width, kj, stride, padding);
        for (std::size_t oh = 0; oh < out_h; ++oh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * stride + ki) - pad;
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(height)) continue;
          T* dst = plane + static_cast<std::size_t>(ih) * width + kj - padding;
          const T* src = row + oh * out_w;
          for (std::size_t ow = lo; ow < hi; ++ow) dst[ow * stride] += src[ow];
        }
      }
    }
  }
}

#define NMR_INSTANTIATE(T)                                                                   \
  template void gemm_nn<T>(std::size_t, std::size_t, std::size_t, const T*, const T*, T*,    \
                           bool);                                                            \
  template void gemm_nt<T>(std::size_t, std::size_t, std::size_t, const T*, const T*, T*);   \
  template void gemm_tn<T>(std::size_t, std::size_t, std::size_t, const T*, const T*, T*);   \
  template void im2col<T>(const T*, std::size_t, std::size_t, std::size_t, std::size_t,      \
                          std::size_t, std::size_t, T*);                                     \
  template void col2im<T>(const T*, std::size_t, std::size_t, std::size_t, std::size_t,      \
                          std::size_t, std::size_t, T*);

NMR_INSTANTIATE(float)
NMR_INSTANTIATE(double)
#undef NMR_INSTANTIATE

}  // namespace nmr::kernels
