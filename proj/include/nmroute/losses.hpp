#pragma once

#include <cstddef>
#include <vector>

#include "nmroute/tensor.hpp"

namespace nmr {

/// Weights of the combined objective omega1*L_W + omega2*L_E + omega3*L_C.
struct LossWeights {
  double omega1 = 1.0;
  double omega2 = 0.05;
  double omega3 = 0.1;

  void validate() const;
};

// All losses below take probabilities as [B, L] (a rank-1 [L] vector is
// treated as a batch of one) and average over the batch.

// Sum_i -p_i log p_i with p clamped to >= 1e-12 inside the log.
// Throws ContractError when a row leaves the simplex by more than 1e-4.
template <typename T>
Tensor<T> entropy_loss(const Tensor<T>& p);

// Sum_i p_i C_i.
template <typename T>
Tensor<T> cost_loss(const Tensor<T>& p, const std::vector<double>& costs);

// Sum_i p_i * mean|outputs[i] - target|, the L1 term reduced per sample.
// Gradients reach both the branch outputs and p.
template <typename T>
Tensor<T> weighted_l1(const Tensor<T>& p, const std::vector<Tensor<T>>& outputs,
                      const Tensor<T>& target);

template <typename T>
Tensor<T> final_loss(const Tensor<T>& lw, const Tensor<T>& le, const Tensor<T>& lc,
                     const LossWeights& weights);

// Stable -log softmax(logits)[label], batch mean.
template <typename T>
Tensor<T> classification_loss(const Tensor<T>& logits, const std::vector<std::size_t>& labels);

// Row-wise simplex test with tolerance.
template <typename T>
bool on_simplex(const Tensor<T>& p, double tol = 1e-4);

}  // namespace nmr
