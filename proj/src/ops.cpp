#include "nmroute/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "nmroute/errors.hpp"
#include "nmroute/kernels.hpp"

namespace nmr::ops {

namespace {

template <typename T>
using Node = detail::Node<T>;

template <typename T>
using BackwardFn = std::function<void(Node<T>&)>;

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> values, std::vector<Tensor<T>> inputs,
                      BackwardFn<T> backward) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  if (grad_enabled()) {
    const bool any = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor<T>& t) { return t.requires_grad(); });
    if (any) {
      node->requires_grad = true;
      for (auto& in : inputs) node->parents.push_back(in.node());
      node->backward_fn = std::move(backward);
    }
  }
  return Tensor<T>::from_node(std::move(node));
}

// Grad buffer of parent k, or nullptr when it does not take gradients.
template <typename T>
std::vector<T>* parent_grad(Node<T>& self, std::size_t k) {
  auto& p = self.parents[k];
  if (!p || !p->requires_grad) return nullptr;
  return &p->ensure_grad();
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

template <typename T, typename F, typename G>
Tensor<T> unary(const Tensor<T>& a, F&& fwd, G&& local_grad) {
  auto src = a.data();
  std::vector<T> out(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = fwd(src[i]);
  return make_result<T>(a.shape(), std::move(out), {a}, [local_grad](Node<T>& self) {
    auto* ga = parent_grad(self, 0);
    if (!ga) return;
    const T* x = self.parents[0]->data.data();
    const T* g = self.grad.data();
    const T* y = self.data.data();
    T* dst = ga->data();
    const std::size_t n = self.data.size();
    for (std::size_t i = 0; i < n; ++i) dst[i] += g[i] * local_grad(x[i], y[i]);
  });
}

// Element-wise copy of weight with pruned positions zeroed.
template <typename T>
std::shared_ptr<std::vector<T>> effective_weight(const Tensor<T>& weight, const NmMask* mask) {
  auto w = weight.data();
  auto out = std::make_shared<std::vector<T>>(w.begin(), w.end());
  if (mask) {
    if (mask->shape != weight.shape()) {
      throw MaskError("mask shape " + shape_str(mask->shape) + " does not match weight " +
                      shape_str(weight.shape()));
    }
    for (std::size_t i = 0; i < out->size(); ++i) {
      if (!mask->bits[i]) (*out)[i] = T(0);
    }
  }
  return out;
}

}  // namespace

template <typename T>
BnBank<T>::BnBank(std::size_t channels)
    : gamma(Tensor<T>::ones({channels})),
      beta(Tensor<T>::zeros({channels})),
      running_mean(channels, T(0)),
      running_var(channels, T(1)) {
  gamma.set_requires_grad(true);
  beta.set_requires_grad(true);
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  auto x = a.data(), y = b.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (auto* g = parent_grad(self, k)) {
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
      }
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  auto x = a.data(), y = b.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - y[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    if (auto* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
    if (auto* g = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  auto x = a.data(), y = b.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    const auto& x = self.parents[0]->data;
    const auto& y = self.parents[1]->data;
    if (auto* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * y[i];
    }
    if (auto* g = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * x[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  return unary(a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  return unary(a, [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> abs(const Tensor<T>& a) {
  return unary(
      a, [](T x) { return std::abs(x); },
      [](T x, T) { return x > 0 ? T(1) : (x < 0 ? T(-1) : T(0)); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return unary(a, [](T x) { return x > 0 ? x : T(0); }, [](T x, T) { return x > 0 ? T(1) : T(0); });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  return unary(a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Tensor<T> clamp_min(const Tensor<T>& a, T lo) {
  return unary(
      a, [lo](T x) { return x > lo ? x : lo; }, [lo](T x, T) { return x > lo ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = 0;
  for (T v : a.data()) acc += v;
  return make_result<T>({}, {acc}, {a}, [](Node<T>& self) {
    if (auto* g = parent_grad(self, 0)) {
      for (auto& v : *g) v += self.grad[0];
    }
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  if (a.numel() == 0) throw DimensionError("mean of empty tensor");
  T acc = 0;
  for (T v : a.data()) acc += v;
  const T n = static_cast<T>(a.numel());
  return make_result<T>({}, {acc / n}, {a}, [n](Node<T>& self) {
    if (auto* g = parent_grad(self, 0)) {
      for (auto& v : *g) v += self.grad[0] / n;
    }
  });
}

template <typename T>
Tensor<T> row_mean(const Tensor<T>& a) {
  if (a.rank() < 2) throw DimensionError("row_mean needs rank >= 2, got " + shape_str(a.shape()));
  const std::size_t rows = a.dim(0);
  const std::size_t cols = a.numel() / rows;
  auto x = a.data();
  std::vector<T> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T acc = 0;
    for (std::size_t c = 0; c < cols; ++c) acc += x[r * cols + c];
    out[r] = acc / static_cast<T>(cols);
  }
  return make_result<T>({rows}, std::move(out), {a}, [rows, cols](Node<T>& self) {
    if (auto* g = parent_grad(self, 0)) {
      for (std::size_t r = 0; r < rows; ++r) {
        const T gr = self.grad[r] / static_cast<T>(cols);
        for (std::size_t c = 0; c < cols; ++c) (*g)[r * cols + c] += gr;
      }
    }
  });
}

template <typename T>
Tensor<T> column(const Tensor<T>& a, std::size_t j) {
  if (a.rank() != 2 || j >= a.dim(1)) {
    throw DimensionError("column " + std::to_string(j) + " of " + shape_str(a.shape()));
  }
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  auto x = a.data();
  std::vector<T> out(rows);
  for (std::size_t r = 0; r < rows; ++r) out[r] = x[r * cols + j];
  return make_result<T>({rows}, std::move(out), {a}, [rows, cols, j](Node<T>& self) {
    if (auto* g = parent_grad(self, 0)) {
      for (std::size_t r = 0; r < rows; ++r) (*g)[r * cols + j] += self.grad[r];
    }
  });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& logits) {
  if (logits.rank() != 2) throw DimensionError("softmax expects [B, L], got " + shape_str(logits.shape()));
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  auto x = logits.data();
  std::vector<T> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data() + r * cols;
    T* o = out.data() + r * cols;
    const T mx = *std::max_element(in, in + cols);
    T z = 0;
    for (std::size_t c = 0; c < cols; ++c) z += (o[c] = std::exp(in[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) o[c] /= z;
  }
  return make_result<T>(logits.shape(), std::move(out), {logits}, [rows, cols](Node<T>& self) {
    auto* g = parent_grad(self, 0);
    if (!g) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = self.data.data() + r * cols;
      const T* gy = self.grad.data() + r * cols;
      T dot = 0;
      for (std::size_t c = 0; c < cols; ++c) dot += gy[c] * y[c];
      for (std::size_t c = 0; c < cols; ++c) (*g)[r * cols + c] += y[c] * (gy[c] - dot);
    }
  });
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& logits) {
  if (logits.rank() != 2) throw DimensionError("log_softmax expects [B, L], got " + shape_str(logits.shape()));
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  auto x = logits.data();
  std::vector<T> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data() + r * cols;
    const T mx = *std::max_element(in, in + cols);
    T z = 0;
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(in[c] - mx);
    const T lse = mx + std::log(z);
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = in[c] - lse;
  }
  return make_result<T>(logits.shape(), std::move(out), {logits}, [rows, cols](Node<T>& self) {
    auto* g = parent_grad(self, 0);
    if (!g) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = self.data.data() + r * cols;
      const T* gy = self.grad.data() + r * cols;
      T total = 0;
      for (std::size_t c = 0; c < cols; ++c) total += gy[c];
      for (std::size_t c = 0; c < cols; ++c) (*g)[r * cols + c] += gy[c] - std::exp(y[c]) * total;
    }
  });
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<std::size_t>& labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw DimensionError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  for (auto l : labels) {
    if (l >= cols) throw ContractError("cross_entropy: label " + std::to_string(l) + " out of range");
  }
  auto x = logits.data();
  auto probs = std::make_shared<std::vector<T>>(x.size());
  T loss = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data() + r * cols;
    const T mx = *std::max_element(in, in + cols);
    T z = 0;
    for (std::size_t c = 0; c < cols; ++c) z += ((*probs)[r * cols + c] = std::exp(in[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) (*probs)[r * cols + c] /= z;
    loss -= in[labels[r]] - mx - std::log(z);
  }
  loss /= static_cast<T>(rows);
  return make_result<T>({}, {loss}, {logits}, [probs, labels, rows, cols](Node<T>& self) {
    auto* g = parent_grad(self, 0);
    if (!g) return;
    const T s = self.grad[0] / static_cast<T>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        const T onehot = c == labels[r] ? T(1) : T(0);
        (*g)[r * cols + c] += s * ((*probs)[r * cols + c] - onehot);
      }
    }
  });
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  if (x.rank() != 4) throw DimensionError("global_avg_pool expects [B,C,H,W], got " + shape_str(x.shape()));
  const std::size_t bc = x.dim(0) * x.dim(1);
  const std::size_t hw = x.dim(2) * x.dim(3);
  auto in = x.data();
  std::vector<T> out(bc);
  for (std::size_t i = 0; i < bc; ++i) {
    T acc = 0;
    for (std::size_t j = 0; j < hw; ++j) acc += in[i * hw + j];
    out[i] = acc / static_cast<T>(hw);
  }
  return make_result<T>({x.dim(0), x.dim(1)}, std::move(out), {x}, [bc, hw](Node<T>& self) {
    if (auto* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < bc; ++i) {
        const T gi = self.grad[i] / static_cast<T>(hw);
        for (std::size_t j = 0; j < hw; ++j) (*g)[i * hw + j] += gi;
      }
    }
  });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 const NmMask* mask, WeightGrad weight_grad) {
  if (x.rank() != 2 || weight.rank() != 2 || x.dim(1) != weight.dim(1)) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " vs weight " +
                         shape_str(weight.shape()));
  }
  const std::size_t B = x.dim(0), F = x.dim(1), O = weight.dim(0);
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != O)) {
    throw DimensionError("linear: bias " + shape_str(bias.shape()) + " vs " + std::to_string(O) + " outputs");
  }
  auto w_eff = effective_weight(weight, mask);
  std::shared_ptr<std::vector<std::uint8_t>> bits;
  if (mask && weight_grad == WeightGrad::masked) bits = std::make_shared<std::vector<std::uint8_t>>(mask->bits);

  std::vector<T> out(B * O, T(0));
  kernels::gemm_nt(B, O, F, x.data().data(), w_eff->data(), out.data());
  if (has_bias) {
    auto b = bias.data();
    for (std::size_t i = 0; i < B; ++i)
      for (std::size_t o = 0; o < O; ++o) out[i * O + o] += b[o];
  }
  std::vector<Tensor<T>> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return make_result<T>({B, O}, std::move(out), std::move(inputs),
                        [w_eff, bits, B, F, O, has_bias](Node<T>& self) {
                          const T* g = self.grad.data();
                          if (auto* gx = parent_grad(self, 0)) {
                            kernels::gemm_nn(B, F, O, g, w_eff->data(), gx->data(), true);
                          }
                          if (auto* gw = parent_grad(self, 1)) {
                            std::vector<T> dw(O * F, T(0));
                            kernels::gemm_tn(O, F, B, g, self.parents[0]->data.data(), dw.data());
                            for (std::size_t i = 0; i < dw.size(); ++i) {
                              if (!bits || (*bits)[i]) (*gw)[i] += dw[i];
                            }
                          }
                          if (has_bias) {
                            if (auto* gb = parent_grad(self, 2)) {
                              for (std::size_t i = 0; i < B; ++i)
                                for (std::size_t o = 0; o < O; ++o) (*gb)[o] += g[i * O + o];
                            }
                          }
                        });
}

namespace {

struct ConvGeometry {
  std::size_t batch, cin, height, width, cout, kernel, stride, padding, out_h, out_w;
  std::size_t patch() const { return cin * kernel * kernel; }
  std::size_t positions() const { return out_h * out_w; }
};

template <typename T>
ConvGeometry conv_geometry(const Tensor<T>& x, const Shape& wshape, std::size_t stride,
                           std::size_t padding, const Tensor<T>& bias) {
  if (x.rank() != 4) throw DimensionError("conv2d expects input [B,C,H,W], got " + shape_str(x.shape()));
  if (wshape.size() != 4 || wshape[2] != wshape[3]) {
    throw DimensionError("conv2d expects square weight [Cout,Cin,k,k], got " + shape_str(wshape));
  }
  if (wshape[1] != x.dim(1)) {
    throw DimensionError("conv2d: input channels " + std::to_string(x.dim(1)) +
                         " vs weight " + shape_str(wshape));
  }
  if (wshape[2] % 2 == 0) throw DimensionError("conv2d: kernel size must be odd");
  if (stride == 0) throw DimensionError("conv2d: stride must be positive");
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), wshape[0], wshape[2], stride, padding, 0, 0};
  if (g.height + 2 * padding < g.kernel || g.width + 2 * padding < g.kernel) {
    throw DimensionError("conv2d: input " + shape_str(x.shape()) + " smaller than kernel");
  }
  g.out_h = kernels::conv_out_extent(g.height, g.kernel, stride, padding);
  g.out_w = kernels::conv_out_extent(g.width, g.kernel, stride, padding);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != g.cout)) {
    throw DimensionError("conv2d: bias " + shape_str(bias.shape()) + " vs " + std::to_string(g.cout) + " filters");
  }
  return g;
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 const ConvOptions& opts) {
  const ConvGeometry geo = conv_geometry(x, weight.shape(), opts.stride, opts.padding, bias);
  auto w_eff = effective_weight(weight, opts.mask);
  std::shared_ptr<std::vector<std::uint8_t>> bits;
  if (opts.mask && opts.weight_grad == WeightGrad::masked) {
    bits = std::make_shared<std::vector<std::uint8_t>>(opts.mask->bits);
  }
  const std::size_t K = geo.patch(), N = geo.positions();
  const std::size_t in_stride = geo.cin * geo.height * geo.width;
  const std::size_t out_stride = geo.cout * N;

  std::vector<T> out(geo.batch * out_stride);
  std::vector<T> cols(K * N);
  auto in = x.data();
  for (std::size_t b = 0; b < geo.batch; ++b) {
    kernels::im2col(in.data() + b * in_stride, geo.cin, geo.height, geo.width, geo.kernel,
                    geo.stride, geo.padding, cols.data());
    T* o = out.data() + b * out_stride;
    kernels::gemm_nn(geo.cout, N, K, w_eff->data(), cols.data(), o, false);
    if (bias.defined()) {
      auto bv = bias.data();
      for (std::size_t c = 0; c < geo.cout; ++c)
        for (std::size_t j = 0; j < N; ++j) o[c * N + j] += bv[c];
    }
  }

  const bool has_bias = bias.defined();
  std::vector<Tensor<T>> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return make_result<T>(
      {geo.batch, geo.cout, geo.out_h, geo.out_w}, std::move(out), std::move(inputs),
      [geo, w_eff, bits, has_bias, K, N, in_stride, out_stride](Node<T>& self) {
        auto* gx = parent_grad(self, 0);
        auto* gw = parent_grad(self, 1);
        auto* gb = has_bias ? parent_grad(self, 2) : nullptr;
        const auto& input = self.parents[0]->data;
        std::vector<T> cols(K * N);
        std::vector<T> dcols(gx ? K * N : 0);
        std::vector<T> dw(gw ? geo.cout * K : 0, T(0));
        for (std::size_t b = 0; b < geo.batch; ++b) {
          const T* g = self.grad.data() + b * out_stride;
          if (gw) {
            kernels::im2col(input.data() + b * in_stride, geo.cin, geo.height, geo.width,
                            geo.kernel, geo.stride, geo.padding, cols.data());
            kernels::gemm_nt(geo.cout, K, N, g, cols.data(), dw.data());
          }
          if (gx) {
            std::fill(dcols.begin(), dcols.end(), T(0));
            kernels::gemm_tn(K, N, geo.cout, w_eff->data(), g, dcols.data());
            kernels::col2im(dcols.data(), geo.cin, geo.height, geo.width, geo.kernel,
                            geo.stride, geo.padding, gx->data() + b * in_stride);
          }
          if (gb) {
            for (std::size_t c = 0; c < geo.cout; ++c) {
              T acc = 0;
              for (std::size_t j = 0; j < N; ++j) acc += g[c * N + j];
              (*gb)[c] += acc;
            }
          }
        }
        if (gw) {
          for (std::size_t i = 0; i < dw.size(); ++i) {
            if (!bits || (*bits)[i]) (*gw)[i] += dw[i];
          }
        }
      });
}

template <typename T>
Tensor<T> conv2d_compressed(const Tensor<T>& x, const CompressedNm<T>& weight,
                            const Tensor<T>& bias, std::size_t stride, std::size_t padding) {
  const ConvGeometry geo = conv_geometry(x, weight.logical_shape, stride, padding, bias);
  const std::size_t K = geo.patch(), N = geo.positions();
  const std::size_t in_stride = geo.cin * geo.height * geo.width;
  const std::size_t out_stride = geo.cout * N;
  Tensor<T> out({geo.batch, geo.cout, geo.out_h, geo.out_w});
  auto o = out.mutable_data();
  std::vector<T> cols(K * N);
  auto in = x.data();
  for (std::size_t b = 0; b < geo.batch; ++b) {
    kernels::im2col(in.data() + b * in_stride, geo.cin, geo.height, geo.width, geo.kernel,
                    geo.stride, geo.padding, cols.data());
    T* ob = o.data() + b * out_stride;
    compressed_gemm(weight, cols.data(), N, ob, false);
    if (bias.defined()) {
      auto bv = bias.data();
      for (std::size_t c = 0; c < geo.cout; ++c)
        for (std::size_t j = 0; j < N; ++j) ob[c * N + j] += bv[c];
    }
  }
  return out;
}

template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, BnBank<T>& bank, Mode mode) {
  if (x.rank() != 4) throw DimensionError("batchnorm2d expects [B,C,H,W], got " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (C != bank.channels() || bank.gamma.numel() != C || bank.beta.numel() != C) {
    throw DimensionError("batchnorm2d: input has " + std::to_string(C) + " channels, bank has " +
                         std::to_string(bank.channels()));
  }
  if (!(bank.eps > 0)) throw ContractError("batchnorm2d: eps must be positive");
  const std::size_t count = B * HW;
  auto in = x.data();
  auto gamma = bank.gamma.data();
  auto beta = bank.beta.data();

  auto mean = std::make_shared<std::vector<T>>(C);
  auto inv_std = std::make_shared<std::vector<T>>(C);
  if (mode == Mode::train) {
    for (std::size_t c = 0; c < C; ++c) {
      T acc = 0;
      for (std::size_t b = 0; b < B; ++b) {
        const T* p = in.data() + (b * C + c) * HW;
        for (std::size_t j = 0; j < HW; ++j) acc += p[j];
      }
      const T mu = acc / static_cast<T>(count);
      T sq = 0;
      for (std::size_t b = 0; b < B; ++b) {
        const T* p = in.data() + (b * C + c) * HW;
        for (std::size_t j = 0; j < HW; ++j) sq += (p[j] - mu) * (p[j] - mu);
      }
      const T var = sq / static_cast<T>(count);
      (*mean)[c] = mu;
      (*inv_std)[c] = T(1) / std::sqrt(var + bank.eps);
      const T unbiased = count > 1 ? sq / static_cast<T>(count - 1) : var;
      bank.running_mean[c] = bank.momentum * bank.running_mean[c] + (T(1) - bank.momentum) * mu;
      bank.running_var[c] = bank.momentum * bank.running_var[c] + (T(1) - bank.momentum) * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      if (bank.running_var[c] < 0) throw ContractError("batchnorm2d: negative running variance");
      (*mean)[c] = bank.running_mean[c];
      (*inv_std)[c] = T(1) / std::sqrt(bank.running_var[c] + bank.eps);
    }
  }

  auto xhat = std::make_shared<std::vector<T>>(in.size());
  std::vector<T> out(in.size());
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t off = (b * C + c) * HW;
      for (std::size_t j = 0; j < HW; ++j) {
        const T h = (in[off + j] - (*mean)[c]) * (*inv_std)[c];
        (*xhat)[off + j] = h;
        out[off + j] = gamma[c] * h + beta[c];
      }
    }
  }

  const bool batch_stats = mode == Mode::train;
  return make_result<T>(
      x.shape(), std::move(out), {x, bank.gamma, bank.beta},
      [xhat, inv_std, batch_stats, B, C, HW, count](Node<T>& self) {
        const auto& gamma = self.parents[1]->data;
        auto* gx = parent_grad(self, 0);
        auto* gg = parent_grad(self, 1);
        auto* gbeta = parent_grad(self, 2);
        for (std::size_t c = 0; c < C; ++c) {
          T sum_g = 0, sum_gh = 0;
          for (std::size_t b = 0; b < B; ++b) {
            const std::size_t off = (b * C + c) * HW;
            for (std::size_t j = 0; j < HW; ++j) {
              sum_g += self.grad[off + j];
              sum_gh += self.grad[off + j] * (*xhat)[off + j];
            }
          }
          if (gg) (*gg)[c] += sum_gh;
          if (gbeta) (*gbeta)[c] += sum_g;
          if (!gx) continue;
          const T k = gamma[c] * (*inv_std)[c];
          const T n = static_cast<T>(count);
          for (std::size_t b = 0; b < B; ++b) {
            const std::size_t off = (b * C + c) * HW;
            for (std::size_t j = 0; j < HW; ++j) {
              if (batch_stats) {
                (*gx)[off + j] += k * (self.grad[off + j] - sum_g / n - (*xhat)[off + j] * sum_gh / n);
              } else {
                (*gx)[off + j] += k * self.grad[off + j];
              }
            }
          }
        }
      });
}

template <typename T>
Tensor<T> stack(const std::vector<Tensor<T>>& items) {
  if (items.empty()) throw DimensionError("stack of zero tensors");
  const Shape& inner = items.front().shape();
  Shape shape{items.size()};
  shape.insert(shape.end(), inner.begin(), inner.end());
  std::vector<T> out;
  out.reserve(numel(shape));
  for (const auto& t : items) {
    if (t.shape() != inner) throw DimensionError("stack: mixed shapes " + shape_str(inner) + " and " + shape_str(t.shape()));
    auto d = t.data();
    out.insert(out.end(), d.begin(), d.end());
  }
  return Tensor<T>(std::move(shape), std::move(out));
}

#define NMR_INSTANTIATE(T)                                                                      \
  template struct BnBank<T>;                                                                    \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                                             \
  template Tensor<T> add_scalar<T>(const Tensor<T>&, T);                                        \
  template Tensor<T> abs<T>(const Tensor<T>&);                                                  \
  template Tensor<T> relu<T>(const Tensor<T>&);                                                 \
  template Tensor<T> log<T>(const Tensor<T>&);                                                  \
  template Tensor<T> clamp_min<T>(const Tensor<T>&, T);                                         \
  template Tensor<T> sum<T>(const Tensor<T>&);                                                  \
  template Tensor<T> mean<T>(const Tensor<T>&);                                                 \
  template Tensor<T> row_mean<T>(const Tensor<T>&);                                             \
  template Tensor<T> column<T>(const Tensor<T>&, std::size_t);                                  \
  template Tensor<T> softmax<T>(const Tensor<T>&);                                              \
  template Tensor<T> log_softmax<T>(const Tensor<T>&);                                          \
  template Tensor<T> cross_entropy<T>(const Tensor<T>&, const std::vector<std::size_t>&);       \
  template Tensor<T> global_avg_pool<T>(const Tensor<T>&);                                      \
  template Tensor<T> linear<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,            \
                               const NmMask*, WeightGrad);                                      \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,            \
                               const ConvOptions&);                                             \
  template Tensor<T> conv2d_compressed<T>(const Tensor<T>&, const CompressedNm<T>&,             \
                                          const Tensor<T>&, std::size_t, std::size_t);          \
  template Tensor<T> batchnorm2d<T>(const Tensor<T>&, BnBank<T>&, Mode);                        \
  template Tensor<T> stack<T>(const std::vector<Tensor<T>>&);

NMR_INSTANTIATE(float)
NMR_INSTANTIATE(double)
#undef NMR_INSTANTIATE

}  // namespace nmr::ops
