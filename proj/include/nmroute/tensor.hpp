#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace nmr {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

// One vertex of the dynamic compute graph. Leaves have no backward_fn.
template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the grads of `parents`.
  std::function<void(Node&)> backward_fn;

  bool has_grad() const { return !data.empty() && grad.size() == data.size(); }
  std::vector<T>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    return grad;
  }
};

}  // namespace detail

// Graph recording is on by default; a NoGradGuard disables it for the
// current thread (eval forwards, parameter updates, finite differences).
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Dense row-major n-dimensional array with optional gradient.
///
/// A Tensor is a reference-counted handle: copies alias the same storage and
/// graph node. Use clone() for an independent copy. Operations in ops.hpp
/// never mutate their inputs; only parameter updates write through
/// mutable_data().
///
/// backward() accumulates into the grads of leaf tensors. Repeated calls
/// without zero_grad() add up; interior grads are reset on every call.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> values);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }
  static Tensor randn(Shape shape, std::mt19937_64& rng, T stddev = T(1));
  static Tensor uniform(Shape shape, std::mt19937_64& rng, T lo, T hi);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const T> data() const;
  std::span<T> mutable_data();
  T item() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool flag);
  bool has_grad() const;
  std::span<const T> grad() const;
  std::span<T> mutable_grad();
  void zero_grad();

  bool is_leaf() const;
  void backward() const;

  // New leaf sharing nothing with this tensor.
  Tensor clone() const;
  Tensor detach() const { return clone(); }
  // Same data, new shape; participates in the graph.
  Tensor reshape(Shape shape) const;

  const std::shared_ptr<detail::Node<T>>& node() const { return node_; }
  static Tensor from_node(std::shared_ptr<detail::Node<T>> node);

 private:
  std::shared_ptr<detail::Node<T>> node_;
};

// Converts between precisions; the result is a leaf.
template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& t) {
  auto src = t.data();
  std::vector<To> out(src.begin(), src.end());
  return Tensor<To>(t.shape(), std::move(out));
}

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace nmr
