#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>

#include "nmroute/tensor.hpp"

namespace nmr {

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <typename T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() { return DType::f32; }
template <>
constexpr DType dtype_of<double>() { return DType::f64; }

// "NMT1" container: magic, u32 rank, u32 dims[rank], u8 dtype, packed data.
// Little-endian. Reading converts to the requested precision.
template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t);
template <typename T>
Tensor<T> read_tensor(std::istream& is);

template <typename T>
void save_tensor(const std::filesystem::path& path, const Tensor<T>& t);
template <typename T>
Tensor<T> load_tensor(const std::filesystem::path& path);

namespace io {

void put_u8(std::ostream& os, std::uint8_t v);
void put_u32(std::ostream& os, std::uint32_t v);
void put_f32(std::ostream& os, float v);
void put_f64(std::ostream& os, double v);
std::uint8_t get_u8(std::istream& is);
std::uint32_t get_u32(std::istream& is);
float get_f32(std::istream& is);
double get_f64(std::istream& is);
void expect_magic(std::istream& is, const char (&magic)[5]);

template <typename T>
void put_scalar(std::ostream& os, T v) {
  if constexpr (sizeof(T) == 4) put_f32(os, v); else put_f64(os, v);
}

}  // namespace io
}  // namespace nmr
