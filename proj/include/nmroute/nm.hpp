#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "nmroute/tensor.hpp"

namespace nmr {

/// An N:M sparsity pattern: at most `n` nonzeros in every run of `m`
/// consecutive weights along the fan-in axis.
struct NmPattern {
  std::uint32_t n = 4;
  std::uint32_t m = 4;

  NmPattern() = default;
  NmPattern(std::uint32_t n_, std::uint32_t m_);

  bool is_dense() const { return n == m; }
  double density() const { return static_cast<double>(n) / m; }
  // Entries kept in a group of `length` (<= m). Trailing remainder groups
  // keep ceil(n * length / m).
  std::uint32_t kept_in_group(std::uint32_t length) const;
  // Entries kept along one fan-in row of `extent` weights.
  std::size_t kept_in_row(std::size_t extent) const;
  std::string str() const;
  static NmPattern parse(const std::string& text);

  friend bool operator==(const NmPattern&, const NmPattern&) = default;
};

/// Binary keep-mask over a weight tensor. Groups are contiguous runs of m
/// along the flattened fan-in of each output row: for conv weights
/// [Cout,Cin,k,k] a row is one filter (Cin*k*k entries), for linear weights
/// [O,F] a row is F entries. Groups never straddle rows.
struct NmMask {
  Shape shape;
  NmPattern pattern;
  std::vector<std::uint8_t> bits;

  std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
  std::size_t row_extent() const;
  std::size_t group_count() const;  // per tensor, remainder groups included
  std::size_t kept_per_row() const;
  std::size_t kept() const;
  // Every group holds exactly the number of ones its length prescribes.
  bool satisfies_pattern() const;

  template <typename T>
  Tensor<T> as_tensor() const;

  static NmMask ones(const Shape& shape, NmPattern pattern);
};

template <typename T>
NmMask compute_mask(std::span<const T> weight, const Shape& shape, NmPattern pattern);

template <typename T>
NmMask compute_mask(const Tensor<T>& weight, NmPattern pattern) {
  return compute_mask<T>(weight.data(), weight.shape(), pattern);
}

// weight ⊙ mask as a new leaf tensor.
template <typename T>
Tensor<T> apply_mask(const Tensor<T>& weight, const NmMask& mask);

/// Packed N:M storage: kept values and their within-group positions, row by
/// row, group by group, positions strictly increasing inside a group. Each
/// index is one byte (m <= 255).
template <typename T>
struct CompressedNm {
  NmPattern pattern;
  Shape logical_shape;
  std::vector<T> values;
  std::vector<std::uint8_t> indices;

  std::size_t rows() const { return logical_shape.empty() ? 0 : logical_shape[0]; }
  std::size_t row_extent() const;
  std::size_t kept_per_row() const { return rows() ? values.size() / rows() : 0; }
  std::size_t value_bytes() const { return values.size() * sizeof(T); }
  std::size_t index_bytes() const { return indices.size(); }
};

template <typename T>
CompressedNm<T> compress(const Tensor<T>& weight, const NmMask& mask);

template <typename T>
Tensor<T> decompress(const CompressedNm<T>& packed);

// Y[rows, N] (+)= W * X where X is [row_extent, N] row-major. Visits only
// the kept entries, in increasing column order within each row.
template <typename T>
void compressed_gemm(const CompressedNm<T>& w, const T* x, std::size_t n_cols, T* y,
                     bool accumulate);

template <typename T>
Tensor<T> matmul_compressed(const CompressedNm<T>& w, const Tensor<T>& x);

// Dense reference product W ⊙ mask times X, X of shape [row_extent, N].
template <typename T>
Tensor<T> matmul_masked_dense(const Tensor<T>& weight, const NmMask& mask, const Tensor<T>& x);

/// SR-STE step: W <- W - lr * (grad + lambda * (1 - mask) ⊙ W).
/// `grad` is the straight-through gradient (all positions receive it).
template <typename T>
void sr_ste_update(std::span<T> weight, std::span<const T> grad, const NmMask& mask, T lr,
                   T lambda);

/// Plain STE step: W <- W - lr * (mask ⊙ grad). Pruned weights never move.
template <typename T>
void plain_ste_update(std::span<T> weight, std::span<const T> grad, const NmMask& mask, T lr);

// "NMC1" container: magic, u32 n, u32 m, u32 rank, u32 dims[rank],
// u8 dtype (0 f32, 1 f64), values, indices. Little-endian throughout.
template <typename T>
void write_compressed(std::ostream& os, const CompressedNm<T>& packed);
template <typename T>
CompressedNm<T> read_compressed(std::istream& is);

}  // namespace nmr
