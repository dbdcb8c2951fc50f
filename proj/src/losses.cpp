#include "nmroute/losses.hpp"

#include <cmath>

#include "nmroute/errors.hpp"
#include "nmroute/ops.hpp"

namespace nmr {

void LossWeights::validate() const {
  if (!(omega1 > 0)) throw ContractError("omega1 must be positive");
  if (omega2 < 0 || omega3 < 0) throw ContractError("loss weights must be non-negative");
}

namespace {

template <typename T>
Tensor<T> as_batch(const Tensor<T>& p) {
  if (p.rank() == 1) return p.reshape({1, p.dim(0)});
  if (p.rank() != 2) throw DimensionError("expected probabilities [B, L], got " + shape_str(p.shape()));
  return p;
}

}  // namespace

template <typename T>
bool on_simplex(const Tensor<T>& p, double tol) {
  const auto q = as_batch(p);
  const std::size_t rows = q.dim(0), cols = q.dim(1);
  auto d = q.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double total = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      const double v = d[r * cols + c];
      if (!(v >= -tol) || v > 1 + tol) return false;
      total += v;
    }
    if (std::abs(total - 1) > tol) return false;
  }
  return true;
}

template <typename T>
Tensor<T> entropy_loss(const Tensor<T>& p) {
  const auto q = as_batch(p);
  if (!on_simplex(q)) throw ContractError("entropy_loss: probabilities are off the simplex");
  const auto plogp = ops::mul(q, ops::log(ops::clamp_min(q, T(1e-12))));
  return ops::scale(ops::sum(plogp), T(-1) / static_cast<T>(q.dim(0)));
}

template <typename T>
Tensor<T> cost_loss(const Tensor<T>& p, const std::vector<double>& costs) {
  const auto q = as_batch(p);
  const std::size_t rows = q.dim(0), cols = q.dim(1);
  if (costs.size() != cols) {
    throw DimensionError("cost_loss: " + std::to_string(costs.size()) + " costs for " +
                         std::to_string(cols) + " branches");
  }
  Tensor<T> c({rows, cols});
  auto cd = c.mutable_data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < cols; ++j) cd[r * cols + j] = static_cast<T>(costs[j]);
  return ops::scale(ops::sum(ops::mul(q, c)), T(1) / static_cast<T>(rows));
}

template <typename T>
Tensor<T> weighted_l1(const Tensor<T>& p, const std::vector<Tensor<T>>& outputs,
                      const Tensor<T>& target) {
  const auto q = as_batch(p);
  if (outputs.size() != q.dim(1)) {
    throw DimensionError("weighted_l1: " + std::to_string(outputs.size()) + " outputs for " +
                         std::to_string(q.dim(1)) + " probabilities");
  }
  if (target.rank() == 0 || target.dim(0) != q.dim(0)) {
    throw DimensionError("weighted_l1: target batch does not match probabilities");
  }
  Tensor<T> per_sample;
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    if (outputs[i].shape() != target.shape()) {
      throw DimensionError("weighted_l1: output " + std::to_string(i) + " is " +
                           shape_str(outputs[i].shape()) + ", target " + shape_str(target.shape()));
    }
    const auto l1 = ops::row_mean(ops::abs(ops::sub(outputs[i], target)));
    const auto term = ops::mul(ops::column(q, i), l1);
    per_sample = per_sample.defined() ? ops::add(per_sample, term) : term;
  }
  return ops::mean(per_sample);
}

template <typename T>
Tensor<T> final_loss(const Tensor<T>& lw, const Tensor<T>& le, const Tensor<T>& lc,
                     const LossWeights& weights) {
  weights.validate();
  auto total = ops::scale(lw, static_cast<T>(weights.omega1));
  total = ops::add(total, ops::scale(le, static_cast<T>(weights.omega2)));
  return ops::add(total, ops::scale(lc, static_cast<T>(weights.omega3)));
}

template <typename T>
Tensor<T> classification_loss(const Tensor<T>& logits, const std::vector<std::size_t>& labels) {
  return ops::cross_entropy(as_batch(logits), labels);
}

#define NMR_INSTANTIATE(T)                                                                     \
  template bool on_simplex<T>(const Tensor<T>&, double);                                       \
  template Tensor<T> entropy_loss<T>(const Tensor<T>&);                                        \
  template Tensor<T> cost_loss<T>(const Tensor<T>&, const std::vector<double>&);               \
  template Tensor<T> weighted_l1<T>(const Tensor<T>&, const std::vector<Tensor<T>>&,           \
                                    const Tensor<T>&);                                         \
  template Tensor<T> final_loss<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,       \
                                   const LossWeights&);                                        \
  template Tensor<T> classification_loss<T>(const Tensor<T>&, const std::vector<std::size_t>&);

NMR_INSTANTIATE(float)
NMR_INSTANTIATE(double)
#undef NMR_INSTANTIATE

}  // namespace nmr
