#include "nmroute/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "nmroute/errors.hpp"

namespace nmr {
namespace io {

void put_u8(std::ostream& os, std::uint8_t v) { os.put(static_cast<char>(v)); }

void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
  os.write(b, 4);
}

static void put_u64(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
  os.write(b, 8);
}

void put_f32(std::ostream& os, float v) { put_u32(os, std::bit_cast<std::uint32_t>(v)); }
void put_f64(std::ostream& os, double v) { put_u64(os, std::bit_cast<std::uint64_t>(v)); }

std::uint8_t get_u8(std::istream& is) {
  char c;
  if (!is.get(c)) throw FormatError("unexpected end of stream");
  return static_cast<std::uint8_t>(c);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw FormatError("unexpected end of stream");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

static std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw FormatError("unexpected end of stream");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

float get_f32(std::istream& is) { return std::bit_cast<float>(get_u32(is)); }
double get_f64(std::istream& is) { return std::bit_cast<double>(get_u64(is)); }

void expect_magic(std::istream& is, const char (&magic)[5]) {
  char b[4];
  if (!is.read(b, 4) || std::memcmp(b, magic, 4) != 0) {
    throw FormatError(std::string("bad magic, expected ") + magic);
  }
}

}  // namespace io

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  os.write("NMT1", 4);
  io::put_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) io::put_u32(os, static_cast<std::uint32_t>(d));
  io::put_u8(os, static_cast<std::uint8_t>(dtype_of<T>()));
  for (T v : t.data()) io::put_scalar(os, v);
}

template <typename T>
Tensor<T> read_tensor(std::istream& is) {
  io::expect_magic(is, "NMT1");
  const std::uint32_t rank = io::get_u32(is);
  if (rank > 16) throw FormatError("implausible tensor rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) d = io::get_u32(is);
  const auto tag = io::get_u8(is);
  if (tag > 1) throw FormatError("unknown dtype tag " + std::to_string(tag));
  std::vector<T> values(numel(shape));
  for (auto& v : values) {
    v = tag == 0 ? static_cast<T>(io::get_f32(is)) : static_cast<T>(io::get_f64(is));
  }
  return Tensor<T>(std::move(shape), std::move(values));
}

template <typename T>
void save_tensor(const std::filesystem::path& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_tensor(os, t);
  if (!os) throw IoError("write failed: " + path.string());
}

template <typename T>
Tensor<T> load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return read_tensor<T>(is);
}

template void write_tensor<float>(std::ostream&, const Tensor<float>&);
template void write_tensor<double>(std::ostream&, const Tensor<double>&);
template Tensor<float> read_tensor<float>(std::istream&);
template Tensor<double> read_tensor<double>(std::istream&);
template void save_tensor<float>(const std::filesystem::path&, const Tensor<float>&);
template void save_tensor<double>(const std::filesystem::path&, const Tensor<double>&);
template Tensor<float> load_tensor<float>(const std::filesystem::path&);
template Tensor<double> load_tensor<double>(const std::filesystem::path&);

}  // namespace nmr
