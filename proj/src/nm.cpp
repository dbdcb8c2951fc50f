#include "nmroute/nm.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <istream>
#include <ostream>

#include "nmroute/errors.hpp"
#include "nmroute/kernels.hpp"
#include "nmroute/tensor_io.hpp"

namespace nmr {

NmPattern::NmPattern(std::uint32_t n_, std::uint32_t m_) : n(n_), m(m_) {
  if (n == 0 || m == 0 || n > m) {
    throw ContractError("invalid N:M pattern " + std::to_string(n) + ":" + std::to_string(m));
  }
  if (m > 255) throw ContractError("M above 255 is not representable by one-byte indices");
}

std::uint32_t NmPattern::kept_in_group(std::uint32_t length) const {
  if (length >= m) return n;
  return (n * length + m - 1) / m;
}

std::size_t NmPattern::kept_in_row(std::size_t extent) const {
  const auto rem = static_cast<std::uint32_t>(extent % m);
  return (extent / m) * n + (rem ? kept_in_group(rem) : 0);
}

std::string NmPattern::str() const { return std::to_string(n) + ":" + std::to_string(m); }

NmPattern NmPattern::parse(const std::string& text) {
  const auto colon = text.find(':');
  if (colon == std::string::npos) throw ContractError("pattern must look like N:M, got " + text);
  try {
    return NmPattern(static_cast<std::uint32_t>(std::stoul(text.substr(0, colon))),
                     static_cast<std::uint32_t>(std::stoul(text.substr(colon + 1))));
  } catch (const std::logic_error& e) {
    if (dynamic_cast<const ContractError*>(&e)) throw;
    throw ContractError("pattern must look like N:M, got " + text);
  }
}

namespace {

std::size_t row_extent_of(const Shape& shape) {
  if (shape.empty()) return 0;
  return numel(shape) / shape[0];
}

template <typename F>
void for_each_group(std::size_t rows, std::size_t extent, std::uint32_t m, F&& fn) {
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t start = 0; start < extent; start += m) {
      const auto len = static_cast<std::uint32_t>(std::min<std::size_t>(m, extent - start));
      fn(r * extent + start, len);
    }
  }
}

}  // namespace

std::size_t NmMask::row_extent() const { return row_extent_of(shape); }

std::size_t NmMask::group_count() const {
  const std::size_t e = row_extent();
  return rows() * ((e + pattern.m - 1) / pattern.m);
}

std::size_t NmMask::kept_per_row() const { return pattern.kept_in_row(row_extent()); }

std::size_t NmMask::kept() const { return rows() * kept_per_row(); }

bool NmMask::satisfies_pattern() const {
  if (bits.size() != numel(shape)) return false;
  bool ok = true;
  for_each_group(rows(), row_extent(), pattern.m, [&](std::size_t off, std::uint32_t len) {
    std::uint32_t ones = 0;
    for (std::uint32_t j = 0; j < len; ++j) {
      if (bits[off + j] > 1) ok = false;
      ones += bits[off + j];
    }
    if (ones != pattern.kept_in_group(len)) ok = false;
  });
  return ok;
}

template <typename T>
Tensor<T> NmMask::as_tensor() const {
  std::vector<T> v(bits.begin(), bits.end());
  return Tensor<T>(shape, std::move(v));
}

NmMask NmMask::ones(const Shape& shape, NmPattern pattern) {
  if (!pattern.is_dense()) throw ContractError("an all-ones mask needs a dense pattern");
  return NmMask{shape, pattern, std::vector<std::uint8_t>(numel(shape), 1)};
}

template <typename T>
NmMask compute_mask(std::span<const T> weight, const Shape& shape, NmPattern pattern) {
  if (shape.empty() || numel(shape) != weight.size()) {
    throw DimensionError("compute_mask: weight size does not match shape " + shape_str(shape));
  }
  NmMask mask{shape, pattern, std::vector<std::uint8_t>(weight.size(), 0)};
  std::array<std::uint32_t, 256> order{};
  for_each_group(mask.rows(), mask.row_extent(), pattern.m,
                 [&](std::size_t off, std::uint32_t len) {
                   const std::uint32_t keep = pattern.kept_in_group(len);
                   if (keep == len) {
                     std::fill_n(mask.bits.begin() + off, len, std::uint8_t{1});
                     return;
                   }
                   for (std::uint32_t j = 0; j < len; ++j) order[j] = j;
                   // Larger magnitude first; equal magnitudes keep the lower index.
                   std::partial_sort(order.begin(), order.begin() + keep, order.begin() + len,
                                     [&](std::uint32_t a, std::uint32_t b) {
                                       const T wa = std::abs(weight[off + a]);
                                       const T wb = std::abs(weight[off + b]);
                                       return wa > wb || (wa == wb && a < b);
                                     });
                   for (std::uint32_t j = 0; j < keep; ++j) mask.bits[off + order[j]] = 1;
                 });
  return mask;
}

template <typename T>
Tensor<T> apply_mask(const Tensor<T>& weight, const NmMask& mask) {
  if (weight.shape() != mask.shape) {
    throw MaskError("mask shape " + shape_str(mask.shape) + " does not match weight " +
                    shape_str(weight.shape()));
  }
  auto w = weight.data();
  std::vector<T> out(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) out[i] = mask.bits[i] ? w[i] : T(0);
  return Tensor<T>(weight.shape(), std::move(out));
}

template <typename T>
std::size_t CompressedNm<T>::row_extent() const {
  return row_extent_of(logical_shape);
}

template <typename T>
CompressedNm<T> compress(const Tensor<T>& weight, const NmMask& mask) {
  if (weight.shape() != mask.shape) {
    throw MaskError("mask shape " + shape_str(mask.shape) + " does not match weight " +
                    shape_str(weight.shape()));
  }
  if (!mask.satisfies_pattern()) {
    throw FormatError("mask violates its " + mask.pattern.str() + " pattern");
  }
  CompressedNm<T> out;
  out.pattern = mask.pattern;
  out.logical_shape = weight.shape();
  out.values.reserve(mask.kept());
  out.indices.reserve(mask.kept());
  auto w = weight.data();
  for_each_group(mask.rows(), mask.row_extent(), mask.pattern.m,
                 [&](std::size_t off, std::uint32_t len) {
                   for (std::uint32_t j = 0; j < len; ++j) {
                     if (mask.bits[off + j]) {
                       out.values.push_back(w[off + j]);
                       out.indices.push_back(static_cast<std::uint8_t>(j));
                     }
                   }
                 });
  return out;
}

namespace {

// Walks the packed entries of one row, calling fn(column, value).
template <typename T, typename F>
void for_each_kept_in_row(const CompressedNm<T>& w, std::size_t row, F&& fn) {
  const std::size_t extent = w.row_extent();
  const std::uint32_t m = w.pattern.m;
  std::size_t k = row * w.kept_per_row();
  for (std::size_t start = 0; start < extent; start += m) {
    const auto len = static_cast<std::uint32_t>(std::min<std::size_t>(m, extent - start));
    const std::uint32_t keep = w.pattern.kept_in_group(len);
    for (std::uint32_t j = 0; j < keep; ++j, ++k) fn(start + w.indices[k], w.values[k]);
  }
}

template <typename T>
void validate_packed(const CompressedNm<T>& w) {
  const std::size_t per_row = w.pattern.kept_in_row(w.row_extent());
  if (w.values.size() != per_row * w.rows() || w.indices.size() != w.values.size()) {
    throw FormatError("compressed storage size does not match its logical shape");
  }
}

}  // namespace

template <typename T>
Tensor<T> decompress(const CompressedNm<T>& packed) {
  validate_packed(packed);
  Tensor<T> out(packed.logical_shape);
  auto d = out.mutable_data();
  const std::size_t extent = packed.row_extent();
  for (std::size_t r = 0; r < packed.rows(); ++r) {
    for_each_kept_in_row(packed, r, [&](std::size_t col, T v) { d[r * extent + col] = v; });
  }
  return out;
}

template <typename T>
void compressed_gemm(const CompressedNm<T>& w, const T* x, std::size_t n_cols, T* y,
                     bool accumulate) {
  for (std::size_t r = 0; r < w.rows(); ++r) {
    T* out = y + r * n_cols;
    if (!accumulate) std::fill(out, out + n_cols, T(0));
    for_each_kept_in_row(w, r, [&](std::size_t col, T v) {
      const T* src = x + col * n_cols;
      for (std::size_t j = 0; j < n_cols; ++j) out[j] += v * src[j];
    });
  }
}

template <typename T>
Tensor<T> matmul_compressed(const CompressedNm<T>& w, const Tensor<T>& x) {
  validate_packed(w);
  if (x.rank() != 2 || x.dim(0) != w.row_extent()) {
    throw DimensionError("matmul_compressed: weight " + shape_str(w.logical_shape) +
                         " incompatible with input " + shape_str(x.shape()));
  }
  Tensor<T> y({w.rows(), x.dim(1)});
  compressed_gemm(w, x.data().data(), x.dim(1), y.mutable_data().data(), false);
  return y;
}

template <typename T>
Tensor<T> matmul_masked_dense(const Tensor<T>& weight, const NmMask& mask, const Tensor<T>& x) {
  const auto masked = apply_mask(weight, mask);
  const std::size_t rows = mask.rows();
  const std::size_t extent = mask.row_extent();
  if (x.rank() != 2 || x.dim(0) != extent) {
    throw DimensionError("matmul_masked_dense: weight " + shape_str(weight.shape()) +
                         " incompatible with input " + shape_str(x.shape()));
  }
  Tensor<T> y({rows, x.dim(1)});
  kernels::gemm_nn(rows, x.dim(1), extent, masked.data().data(), x.data().data(),
                   y.mutable_data().data(), false);
  return y;
}

template <typename T>
void sr_ste_update(std::span<T> weight, std::span<const T> grad, const NmMask& mask, T lr,
                   T lambda) {
  if (lr < 0 || lambda < 0) throw ContractError("sr_ste_update: lr and lambda must be >= 0");
  if (weight.size() != grad.size() || weight.size() != mask.bits.size()) {
    throw DimensionError("sr_ste_update: weight, grad and mask sizes differ");
  }
  for (std::size_t i = 0; i < weight.size(); ++i) {
    const T decay = mask.bits[i] ? T(0) : lambda * weight[i];
    weight[i] -= lr * (grad[i] + decay);
  }
}

template <typename T>
void plain_ste_update(std::span<T> weight, std::span<const T> grad, const NmMask& mask, T lr) {
  if (lr < 0) throw ContractError("plain_ste_update: lr must be >= 0");
  if (weight.size() != grad.size() || weight.size() != mask.bits.size()) {
    throw DimensionError("plain_ste_update: weight, grad and mask sizes differ");
  }
  for (std::size_t i = 0; i < weight.size(); ++i) {
    if (mask.bits[i]) weight[i] -= lr * grad[i];
  }
}

template <typename T>
void write_compressed(std::ostream& os, const CompressedNm<T>& packed) {
  validate_packed(packed);
  os.write("NMC1", 4);
  io::put_u32(os, packed.pattern.n);
  io::put_u32(os, packed.pattern.m);
  io::put_u32(os, static_cast<std::uint32_t>(packed.logical_shape.size()));
  for (auto d : packed.logical_shape) io::put_u32(os, static_cast<std::uint32_t>(d));
  io::put_u8(os, static_cast<std::uint8_t>(dtype_of<T>()));
  for (T v : packed.values) io::put_scalar(os, v);
  os.write(reinterpret_cast<const char*>(packed.indices.data()),
           static_cast<std::streamsize>(packed.indices.size()));
}

template <typename T>
CompressedNm<T> read_compressed(std::istream& is) {
  io::expect_magic(is, "NMC1");
  CompressedNm<T> out;
  const std::uint32_t n = io::get_u32(is);
  const std::uint32_t m = io::get_u32(is);
  try {
    out.pattern = NmPattern(n, m);
  } catch (const ContractError& e) {
    throw FormatError(e.what());
  }
  const std::uint32_t rank = io::get_u32(is);
  if (rank == 0 || rank > 16) throw FormatError("implausible rank in NMC1 stream");
  out.logical_shape.resize(rank);
  for (auto& d : out.logical_shape) d = io::get_u32(is);
  const auto tag = io::get_u8(is);
  if (tag > 1) throw FormatError("unknown dtype tag in NMC1 stream");
  const std::size_t count =
      out.logical_shape[0] * out.pattern.kept_in_row(row_extent_of(out.logical_shape));
  out.values.resize(count);
  for (auto& v : out.values) {
    v = tag == 0 ? static_cast<T>(io::get_f32(is)) : static_cast<T>(io::get_f64(is));
  }
  out.indices.resize(count);
  if (!is.read(reinterpret_cast<char*>(out.indices.data()), static_cast<std::streamsize>(count))) {
    throw FormatError("truncated NMC1 index block");
  }
  for (auto idx : out.indices) {
    if (idx >= m) throw FormatError("NMC1 index out of range");
  }
  return out;
}

#define NMR_INSTANTIATE(T)                                                                     \
  template Tensor<T> NmMask::as_tensor<T>() const;                                             \
  template NmMask compute_mask<T>(std::span<const T>, const Shape&, NmPattern);                \
  template Tensor<T> apply_mask<T>(const Tensor<T>&, const NmMask&);                           \
  template struct CompressedNm<T>;                                                             \
  template CompressedNm<T> compress<T>(const Tensor<T>&, const NmMask&);                       \
  template Tensor<T> decompress<T>(const CompressedNm<T>&);                                    \
  template void compressed_gemm<T>(const CompressedNm<T>&, const T*, std::size_t, T*, bool);   \
  template Tensor<T> matmul_compressed<T>(const CompressedNm<T>&, const Tensor<T>&);           \
  template Tensor<T> matmul_masked_dense<T>(const Tensor<T>&, const NmMask&, const Tensor<T>&); \
  template void sr_ste_update<T>(std::span<T>, std::span<const T>, const NmMask&, T, T);       \
  template void plain_ste_update<T>(std::span<T>, std::span<const T>, const NmMask&, T);       \
  template void write_compressed<T>(std::ostream&, const CompressedNm<T>&);                    \
  template CompressedNm<T> read_compressed<T>(std::istream&);

NMR_INSTANTIATE(float)
NMR_INSTANTIATE(double)
#undef NMR_INSTANTIATE

}  // namespace nmr
