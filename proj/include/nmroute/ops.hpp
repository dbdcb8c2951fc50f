#pragma once

#include <cstddef>
#include <vector>

#include "nmroute/nm.hpp"
#include "nmroute/tensor.hpp"

// Differentiable operations. Each returns a fresh tensor; when grad mode is
// on and any input requires grad, the result records a backward closure.
namespace nmr::ops {

enum class Mode { train, eval };

// How the weight gradient of a masked layer is propagated. With
// straight_through the mask is treated as identity (SR-STE); with masked the
// gradient at pruned positions is zeroed (plain STE).
enum class WeightGrad { straight_through, masked };

/// BatchNorm parameters and running statistics for one layer.
/// running = momentum * running + (1 - momentum) * batch; the batch variance
/// is biased when normalizing and unbiased when folded into running_var.
template <typename T>
struct BnBank {
  Tensor<T> gamma;
  Tensor<T> beta;
  std::vector<T> running_mean;
  std::vector<T> running_var;
  T momentum = T(0.9);
  T eps = T(1e-5);

  BnBank() = default;
  explicit BnBank(std::size_t channels);
  std::size_t channels() const { return running_mean.size(); }
};

struct ConvOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
  const NmMask* mask = nullptr;
  WeightGrad weight_grad = WeightGrad::straight_through;
};

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T s);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& a, T s);
template <typename T> Tensor<T> abs(const Tensor<T>& a);
template <typename T> Tensor<T> relu(const Tensor<T>& a);
template <typename T> Tensor<T> log(const Tensor<T>& a);
template <typename T> Tensor<T> clamp_min(const Tensor<T>& a, T lo);

template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> mean(const Tensor<T>& a);
// Mean over every axis but the first: [B, ...] -> [B].
template <typename T> Tensor<T> row_mean(const Tensor<T>& a);
// Column j of a [B, L] tensor -> [B].
template <typename T> Tensor<T> column(const Tensor<T>& a, std::size_t j);

// Over axis 1 of a [B, L] tensor.
template <typename T> Tensor<T> softmax(const Tensor<T>& logits);
template <typename T> Tensor<T> log_softmax(const Tensor<T>& logits);
// Mean of -log softmax(logits)[b, labels[b]] over the batch.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<std::size_t>& labels);

// [B, C, H, W] -> [B, C]
template <typename T> Tensor<T> global_avg_pool(const Tensor<T>& x);

// x [B, F], weight [O, F], bias [O] (may be undefined) -> [B, O]
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 const NmMask* mask = nullptr,
                 WeightGrad weight_grad = WeightGrad::straight_through);

// Cross-correlation with zero padding via patch unrolling.
// x [B, Cin, H, W], weight [Cout, Cin, k, k], bias [Cout] (may be undefined).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 const ConvOptions& opts);

// Forward-only convolution through packed N:M weights.
template <typename T>
Tensor<T> conv2d_compressed(const Tensor<T>& x, const CompressedNm<T>& weight,
                            const Tensor<T>& bias, std::size_t stride, std::size_t padding);

template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, BnBank<T>& bank, Mode mode);

// Non-differentiable helpers for assembling batches.
template <typename T> Tensor<T> stack(const std::vector<Tensor<T>>& items);

}  // namespace nmr::ops
