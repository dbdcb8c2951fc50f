#include "nmroute/restoration.hpp"

#include <sstream>

#include "nmroute/errors.hpp"

namespace nmr {

std::vector<BranchSpec> parse_branch_set(const std::string& text, bool shared_bn) {
  std::vector<BranchSpec> out;
  std::stringstream ss(text);
  std::string token;
  while (std::getline(ss, token, '&')) {
    if (token.empty()) throw ContractError("empty entry in branch set '" + text + "'");
    NmPattern pattern;
    if (token.find(':') != std::string::npos) {
      pattern = NmPattern::parse(token);
    } else {
      try {
        pattern = NmPattern(static_cast<std::uint32_t>(std::stoul(token)), 4);
      } catch (const std::invalid_argument&) {
        throw ContractError("bad branch '" + token + "' in branch set '" + text + "'");
      }
    }
    out.push_back(BranchSpec{pattern, pattern.density(), shared_bn ? 0 : out.size()});
  }
  if (out.empty()) throw ContractError("branch set must not be empty");
  return out;
}

std::string branch_set_str(const std::vector<BranchSpec>& branches) {
  std::string s;
  for (std::size_t i = 0; i < branches.size(); ++i) {
    if (i) s += '&';
    s += branches[i].pattern.m == 4 ? std::to_string(branches[i].pattern.n)
                                    : branches[i].pattern.str();
  }
  return s;
}

void RestorationConfig::validate() const {
  if (depth < 2) throw ContractError("restoration depth must be at least 2");
  if (width == 0 || channels == 0) throw ContractError("restoration width/channels must be positive");
  if (kernel_size % 2 == 0) throw ContractError("restoration kernel size must be odd");
  if (branches.empty()) throw ContractError("restoration net needs at least one branch");
  for (std::size_t i = 0; i < branches.size(); ++i) {
    if (!(branches[i].cost > 0)) throw ContractError("branch cost must be positive");
    if (branches[i].bn_bank >= bank_count()) throw ContractError("branch BN bank index out of range");
    if (i && branches[i].pattern.density() < branches[i - 1].pattern.density()) {
      throw ContractError("branches must be sorted by ascending density");
    }
  }
}

std::size_t RestorationConfig::bank_count() const {
  std::size_t n = 0;
  for (const auto& b : branches) n = std::max(n, b.bn_bank + 1);
  return n;
}

template <typename T>
RestorationNet<T>::RestorationNet(RestorationConfig config, std::mt19937_64& rng)
    : config_(std::move(config)) {
  if (config_.shared_bn) {
    for (auto& b : config_.branches) b.bn_bank = 0;
  }
  config_.validate();
  const std::size_t k = config_.kernel_size;
  for (std::size_t l = 0; l < config_.depth; ++l) {
    const std::size_t cin = l == 0 ? config_.channels : config_.width;
    const std::size_t cout = l + 1 == config_.depth ? config_.channels : config_.width;
    Layer layer;
    layer.weight = he_normal<T>({cout, cin, k, k}, cin * k * k, rng);
    if (l + 1 == config_.depth) {
      // Near-identity start: the predicted residual begins close to zero.
      for (auto& v : layer.weight.mutable_data()) v *= static_cast<T>(0.01);
    }
    if (!layer_has_bn(l)) layer.bias = zero_param<T>({cout});
    layers_.push_back(std::move(layer));
  }
  banks_.resize(config_.bank_count());
  for (auto& bank : banks_) {
    for (std::size_t l = 0; l < bn_layer_count(); ++l) bank.emplace_back(config_.width);
  }
}

template <typename T>
bool RestorationNet<T>::layer_masked(std::size_t layer) const {
  if (config_.mask_first_last) return true;
  return layer != 0 && layer + 1 != config_.depth;
}

template <typename T>
bool RestorationNet<T>::layer_has_bn(std::size_t layer) const {
  return layer != 0 && layer + 1 != config_.depth;
}

template <typename T>
std::size_t RestorationNet<T>::bn_layer_count() const {
  return config_.depth - 2;
}

template <typename T>
void RestorationNet<T>::check_branch(std::size_t branch) const {
  if (branch >= num_branches()) {
    throw ContractError("branch index " + std::to_string(branch) + " out of range [0, " +
                        std::to_string(num_branches()) + ")");
  }
}

template <typename T>
std::optional<NmMask> RestorationNet<T>::mask_for(std::size_t layer, std::size_t branch) const {
  const NmPattern pattern = config_.branches[branch].pattern;
  if (!layer_masked(layer) || pattern.is_dense()) return std::nullopt;
  return compute_mask(layers_[layer].weight, pattern);
}

template <typename T>
std::vector<std::optional<NmMask>> RestorationNet<T>::branch_masks(std::size_t branch) const {
  check_branch(branch);
  std::vector<std::optional<NmMask>> out;
  for (std::size_t l = 0; l < layers_.size(); ++l) out.push_back(mask_for(l, branch));
  return out;
}

template <typename T>
Tensor<T> RestorationNet<T>::forward_branch(const Tensor<T>& y, std::size_t branch,
                                            ops::Mode mode, KernelPath path) {
  check_branch(branch);
  if (y.rank() != 4 || y.dim(1) != config_.channels) {
    throw DimensionError("restoration net expects [B," + std::to_string(config_.channels) +
                         ",H,W], got " + shape_str(y.shape()));
  }
  const bool packed = path == KernelPath::compressed;
  if (packed && mode == ops::Mode::train) {
    throw ContractError("the compressed kernel path is eval-only");
  }
  std::optional<NoGradGuard> no_grad;
  if (packed) no_grad.emplace();

  const std::size_t pad = config_.kernel_size / 2;
  auto& banks = banks_[config_.branches[branch].bn_bank];
  Tensor<T> h = y;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& layer = layers_[l];
    const auto mask = mask_for(l, branch);
    if (packed && mask) {
      h = ops::conv2d_compressed(h, compress(layer.weight, *mask), layer.bias, 1, pad);
    } else {
      h = ops::conv2d(h, layer.weight, layer.bias,
                      ops::ConvOptions{1, pad, mask ? &*mask : nullptr, config_.weight_grad});
    }
    if (l + 1 == layers_.size()) break;
    if (layer_has_bn(l)) h = ops::batchnorm2d(h, banks[l - 1], mode);
    h = ops::relu(h);
  }
  return config_.residual ? ops::sub(y, h) : h;
}

template <typename T>
std::vector<Tensor<T>> RestorationNet<T>::forward_all(const Tensor<T>& y, ops::Mode mode) {
  std::vector<Tensor<T>> out;
  out.reserve(num_branches());
  for (std::size_t i = 0; i < num_branches(); ++i) out.push_back(forward_branch(y, i, mode));
  return out;
}

template <typename T>
double RestorationNet<T>::layer_flops(std::size_t layer, std::size_t branch, std::size_t height,
                                      std::size_t width) const {
  check_branch(branch);
  const auto& shape = layers_.at(layer).weight.shape();
  const std::size_t extent = shape[1] * shape[2] * shape[3];
  const NmPattern pattern = config_.branches[branch].pattern;
  const std::size_t kept = layer_masked(layer) ? pattern.kept_in_row(extent) : extent;
  // Padding preserves the spatial extent.
  return 2.0 * static_cast<double>(kept * shape[0]) * static_cast<double>(height * width);
}

template <typename T>
double RestorationNet<T>::branch_flops(std::size_t branch, std::size_t height,
                                       std::size_t width) const {
  double total = 0;
  for (std::size_t l = 0; l < layers_.size(); ++l) total += layer_flops(l, branch, height, width);
  return total;
}

template <typename T>
double RestorationNet<T>::dense_flops(std::size_t height, std::size_t width) const {
  double total = 0;
  for (const auto& layer : layers_) {
    total += 2.0 * static_cast<double>(layer.weight.numel()) * static_cast<double>(height * width);
  }
  return total;
}

template <typename T>
std::vector<NamedTensor<T>> RestorationNet<T>::parameters() const {
  std::vector<NamedTensor<T>> out;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const std::string p = "restoration.conv" + std::to_string(l) + ".";
    out.push_back({p + "weight", layers_[l].weight});
    if (layers_[l].bias.defined()) out.push_back({p + "bias", layers_[l].bias});
  }
  for (std::size_t b = 0; b < banks_.size(); ++b) {
    for (std::size_t l = 0; l < banks_[b].size(); ++l) {
      const std::string p = "restoration.bank" + std::to_string(b) + ".bn" + std::to_string(l) + ".";
      out.push_back({p + "gamma", banks_[b][l].gamma});
      out.push_back({p + "beta", banks_[b][l].beta});
    }
  }
  return out;
}

template <typename T>
std::vector<NamedBuffer<T>> RestorationNet<T>::buffers() {
  std::vector<NamedBuffer<T>> out;
  for (std::size_t b = 0; b < banks_.size(); ++b) {
    for (std::size_t l = 0; l < banks_[b].size(); ++l) {
      const std::string p = "restoration.bank" + std::to_string(b) + ".bn" + std::to_string(l) + ".";
      out.push_back({p + "running_mean", &banks_[b][l].running_mean});
      out.push_back({p + "running_var", &banks_[b][l].running_var});
    }
  }
  return out;
}

template <typename T>
std::vector<Tensor<T>> RestorationNet<T>::conv_weights() const {
  std::vector<Tensor<T>> out;
  for (const auto& layer : layers_) out.push_back(layer.weight);
  return out;
}

template <typename T>
ops::BnBank<T>& RestorationNet<T>::bank(std::size_t bank_index, std::size_t bn_layer) {
  return banks_.at(bank_index).at(bn_layer);
}

template <typename T>
const ops::BnBank<T>& RestorationNet<T>::bank(std::size_t bank_index, std::size_t bn_layer) const {
  return banks_.at(bank_index).at(bn_layer);
}

template <typename T>
void RestorationNet<T>::set_frozen(bool frozen) {
  frozen_ = frozen;
  for (auto& p : parameters()) p.tensor.set_requires_grad(!frozen);
}

template class RestorationNet<float>;
template class RestorationNet<double>;

}  // namespace nmr
