#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "nmroute/tensor.hpp"

namespace nmr {

/// Central-difference gradient check.
///
/// Evaluates `f` once with autodiff, then perturbs every coordinate of every
/// input that requires grad by ±h. Returns the largest
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8) over coordinates.
/// Grads of the inputs are zeroed before and left populated after.
template <typename T>
double gradcheck(const std::function<Tensor<T>(const std::vector<Tensor<T>>&)>& f,
                 std::vector<Tensor<T>> inputs, T h) {
  for (auto& in : inputs) in.zero_grad();
  f(inputs).backward();

  double worst = 0.0;
  for (auto& in : inputs) {
    if (!in.requires_grad()) continue;
    std::vector<T> analytic(in.numel(), T(0));
    if (in.has_grad()) {
      auto g = in.grad();
      std::copy(g.begin(), g.end(), analytic.begin());
    }
    auto values = in.mutable_data();
    NoGradGuard no_grad;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const T saved = values[i];
      values[i] = saved + h;
      const double up = static_cast<double>(f(inputs).item());
      values[i] = saved - h;
      const double down = static_cast<double>(f(inputs).item());
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * static_cast<double>(h));
      const double a = static_cast<double>(analytic[i]);
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace nmr
