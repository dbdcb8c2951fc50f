#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "nmroute/tensor.hpp"

namespace nmr {

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

// Non-trainable state (BatchNorm running statistics).
template <typename T>
struct NamedBuffer {
  std::string name;
  std::vector<T>* values;
};

// He-normal initialization for a weight whose rows have `fan_in` entries.
template <typename T>
Tensor<T> he_normal(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  auto t = Tensor<T>::randn(std::move(shape), rng, static_cast<T>(std::sqrt(2.0 / fan_in)));
  t.set_requires_grad(true);
  return t;
}

template <typename T>
Tensor<T> zero_param(Shape shape) {
  auto t = Tensor<T>::zeros(std::move(shape));
  t.set_requires_grad(true);
  return t;
}

template <typename T>
std::size_t count_parameters(const std::vector<NamedTensor<T>>& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

// FNV-1a over the raw bytes of every parameter, in order.
template <typename T>
std::uint64_t parameter_hash(const std::vector<NamedTensor<T>>& params) {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto& p : params) {
    for (T v : p.tensor.data()) {
      const auto* bytes = reinterpret_cast<const unsigned char*>(&v);
      for (std::size_t i = 0; i < sizeof(T); ++i) {
        h ^= bytes[i];
        h *= 1099511628211ull;
      }
    }
  }
  return h;
}

}  // namespace nmr
