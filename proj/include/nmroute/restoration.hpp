#pragma once

#include <cstddef>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "nmroute/module.hpp"
#include "nmroute/nm.hpp"
#include "nmroute/ops.hpp"

namespace nmr {

/// One sparse branch of the shared network.
struct BranchSpec {
  NmPattern pattern;
  double cost = 1.0;         // relative overhead C_i used by the cost loss
  std::size_t bn_bank = 0;   // which BatchNorm bank this branch normalizes with
};

// Parses a branch set such as "1&2&4" (n values over m = 4) or "2:8&8:8".
// Costs default to n/m; with shared_bn every branch uses bank 0.
std::vector<BranchSpec> parse_branch_set(const std::string& text, bool shared_bn = false);
std::string branch_set_str(const std::vector<BranchSpec>& branches);

struct RestorationConfig {
  std::size_t depth = 5;
  std::size_t width = 16;
  std::size_t channels = 1;
  std::size_t kernel_size = 3;
  bool residual = true;         // predict the degradation and subtract it
  bool mask_first_last = false;  // prune the image-facing layers too
  bool shared_bn = false;       // ablation: one BatchNorm bank for all branches
  ops::WeightGrad weight_grad = ops::WeightGrad::straight_through;
  std::vector<BranchSpec> branches = parse_branch_set("1&2&4");

  void validate() const;
  std::size_t bank_count() const;
};

// Which kernels an eval forward uses for pruned layers.
enum class KernelPath { masked_dense, compressed };

/// DnCNN-style restoration network whose conv weights are shared by every
/// branch. A branch differs only by the N:M masks recomputed from the current
/// weights on each forward and by its BatchNorm bank.
///
/// Layout: conv+ReLU, (depth-2) x conv+BN+ReLU, conv. Middle convs carry no
/// bias since BatchNorm follows them.
template <typename T>
class RestorationNet {
 public:
  RestorationNet(RestorationConfig config, std::mt19937_64& rng);

  Tensor<T> forward_branch(const Tensor<T>& y, std::size_t branch, ops::Mode mode,
                           KernelPath path = KernelPath::masked_dense);
  std::vector<Tensor<T>> forward_all(const Tensor<T>& y, ops::Mode mode);

  // Mask per conv layer for this branch; nullopt where the layer runs dense.
  std::vector<std::optional<NmMask>> branch_masks(std::size_t branch) const;

  double layer_flops(std::size_t layer, std::size_t branch, std::size_t height,
                     std::size_t width) const;
  double branch_flops(std::size_t branch, std::size_t height, std::size_t width) const;
  double dense_flops(std::size_t height, std::size_t width) const;

  const RestorationConfig& config() const { return config_; }
  std::size_t num_branches() const { return config_.branches.size(); }
  std::size_t num_layers() const { return layers_.size(); }
  bool layer_masked(std::size_t layer) const;
  bool layer_has_bn(std::size_t layer) const;

  std::vector<NamedTensor<T>> parameters() const;
  std::vector<NamedBuffer<T>> buffers();
  std::size_t parameter_count() const { return count_parameters(parameters()); }
  // Conv weights in layer order.
  std::vector<Tensor<T>> conv_weights() const;
  ops::BnBank<T>& bank(std::size_t bank_index, std::size_t bn_layer);
  const ops::BnBank<T>& bank(std::size_t bank_index, std::size_t bn_layer) const;
  std::size_t bn_layer_count() const;

  void set_frozen(bool frozen);
  bool frozen() const { return frozen_; }

 private:
  struct Layer {
    Tensor<T> weight;
    Tensor<T> bias;  // undefined for middle layers
  };

  std::optional<NmMask> mask_for(std::size_t layer, std::size_t branch) const;
  void check_branch(std::size_t branch) const;

  RestorationConfig config_;
  std::vector<Layer> layers_;
  // banks_[bank][bn_layer]
  std::vector<std::vector<ops::BnBank<T>>> banks_;
  bool frozen_ = false;
};

extern template class RestorationNet<float>;
extern template class RestorationNet<double>;

}  // namespace nmr
