#pragma once

#include <array>
#include <cstddef>
#include <random>
#include <span>
#include <vector>

#include "nmroute/module.hpp"
#include "nmroute/ops.hpp"

namespace nmr {

/// Restoration-difficulty classifier: four Conv-BN-ReLU blocks, global
/// average pooling and a fully-connected layer producing L logits.
struct ClassifierConfig {
  std::size_t num_classes = 3;
  std::array<std::size_t, 4> block_channels{8, 16, 32, 32};
  std::size_t kernel_size = 3;
  std::size_t stride = 2;
  std::size_t in_channels = 1;

  void validate() const;
  // Smallest spatial extent the four strided blocks accept.
  static constexpr std::size_t min_extent = 16;
};

template <typename T>
struct ClassifierOutput {
  Tensor<T> logits;  // [B, L]
  Tensor<T> probs;   // [B, L], rows on the probability simplex
};

template <typename T>
class Classifier {
 public:
  Classifier(ClassifierConfig config, std::mt19937_64& rng);

  ClassifierOutput<T> forward(const Tensor<T>& y, ops::Mode mode);

  const ClassifierConfig& config() const { return config_; }
  std::size_t num_classes() const { return config_.num_classes; }

  std::vector<NamedTensor<T>> parameters() const;
  std::vector<NamedBuffer<T>> buffers();
  std::size_t parameter_count() const { return count_parameters(parameters()); }

  // Frozen parameters stop requiring grad; optimizers refuse to touch them.
  void set_frozen(bool frozen);
  bool frozen() const { return frozen_; }

 private:
  struct Block {
    Tensor<T> weight;
    Tensor<T> bias;
    ops::BnBank<T> bn;
  };

  ClassifierConfig config_;
  std::vector<Block> blocks_;
  Tensor<T> fc_weight_;
  Tensor<T> fc_bias_;
  bool frozen_ = false;
};

// argmax with ties resolved toward the lower (cheaper) index.
template <typename T>
std::size_t predict_class(std::span<const T> probs);

// Row-wise predict_class over a [B, L] tensor.
template <typename T>
std::vector<std::size_t> predict_classes(const Tensor<T>& probs);

// Multiply-add FLOPs of one forward pass on an h x w input: 2*k^2*Cin*Cout*Ho*Wo
// per block, one add per pooled element, 2*F*L for the head.
double classifier_flops(const ClassifierConfig& config, std::size_t height, std::size_t width);

extern template class Classifier<float>;
extern template class Classifier<double>;

}  // namespace nmr
