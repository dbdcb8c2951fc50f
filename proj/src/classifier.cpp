#include "nmroute/classifier.hpp"

#include <algorithm>

#include "nmroute/errors.hpp"
#include "nmroute/kernels.hpp"

namespace nmr {

void ClassifierConfig::validate() const {
  if (num_classes < 2) throw ContractError("classifier needs at least two classes");
  if (kernel_size % 2 == 0) throw ContractError("classifier kernel size must be odd");
  if (stride == 0) throw ContractError("classifier stride must be positive");
  if (in_channels == 0) throw ContractError("classifier needs at least one input channel");
  for (auto c : block_channels) {
    if (c == 0) throw ContractError("classifier block channels must be positive");
  }
}

template <typename T>
Classifier<T>::Classifier(ClassifierConfig config, std::mt19937_64& rng) : config_(config) {
  config_.validate();
  const std::size_t k = config_.kernel_size;
  std::size_t cin = config_.in_channels;
  for (std::size_t c : config_.block_channels) {
    blocks_.push_back(Block{he_normal<T>({c, cin, k, k}, cin * k * k, rng), zero_param<T>({c}),
                            ops::BnBank<T>(c)});
    cin = c;
  }
  fc_weight_ = he_normal<T>({config_.num_classes, cin}, cin, rng);
  fc_bias_ = zero_param<T>({config_.num_classes});
}

template <typename T>
ClassifierOutput<T> Classifier<T>::forward(const Tensor<T>& y, ops::Mode mode) {
  if (y.rank() != 4 || y.dim(1) != config_.in_channels) {
    throw DimensionError("classifier expects [B," + std::to_string(config_.in_channels) +
                         ",H,W], got " + shape_str(y.shape()));
  }
  if (y.dim(2) < ClassifierConfig::min_extent || y.dim(3) < ClassifierConfig::min_extent) {
    throw DimensionError("classifier input " + shape_str(y.shape()) + " is smaller than " +
                         std::to_string(ClassifierConfig::min_extent) + "x" +
                         std::to_string(ClassifierConfig::min_extent));
  }
  ops::ConvOptions conv{config_.stride, config_.kernel_size / 2, nullptr,
                        ops::WeightGrad::straight_through};
  Tensor<T> h = y;
  for (auto& block : blocks_) {
    h = ops::relu(ops::batchnorm2d(ops::conv2d(h, block.weight, block.bias, conv), block.bn, mode));
  }
  auto logits = ops::linear(ops::global_avg_pool(h), fc_weight_, fc_bias_);
  auto probs = ops::softmax(logits);
  return {std::move(logits), std::move(probs)};
}

template <typename T>
std::vector<NamedTensor<T>> Classifier<T>::parameters() const {
  std::vector<NamedTensor<T>> out;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const std::string p = "classifier.block" + std::to_string(i) + ".";
    out.push_back({p + "weight", blocks_[i].weight});
    out.push_back({p + "bias", blocks_[i].bias});
    out.push_back({p + "bn.gamma", blocks_[i].bn.gamma});
    out.push_back({p + "bn.beta", blocks_[i].bn.beta});
  }
  out.push_back({"classifier.fc.weight", fc_weight_});
  out.push_back({"classifier.fc.bias", fc_bias_});
  return out;
}

template <typename T>
std::vector<NamedBuffer<T>> Classifier<T>::buffers() {
  std::vector<NamedBuffer<T>> out;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const std::string p = "classifier.block" + std::to_string(i) + ".bn.";
    out.push_back({p + "running_mean", &blocks_[i].bn.running_mean});
    out.push_back({p + "running_var", &blocks_[i].bn.running_var});
  }
  return out;
}

template <typename T>
void Classifier<T>::set_frozen(bool frozen) {
  frozen_ = frozen;
  for (auto& p : parameters()) p.tensor.set_requires_grad(!frozen);
}

template <typename T>
std::size_t predict_class(std::span<const T> probs) {
  if (probs.empty()) throw DimensionError("predict_class on empty probability vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < probs.size(); ++i) {
    if (probs[i] > probs[best]) best = i;
  }
  return best;
}

template <typename T>
std::vector<std::size_t> predict_classes(const Tensor<T>& probs) {
  if (probs.rank() != 2) throw DimensionError("predict_classes expects [B, L]");
  const std::size_t rows = probs.dim(0), cols = probs.dim(1);
  std::vector<std::size_t> out(rows);
  auto d = probs.data();
  for (std::size_t r = 0; r < rows; ++r) out[r] = predict_class<T>(d.subspan(r * cols, cols));
  return out;
}

double classifier_flops(const ClassifierConfig& config, std::size_t height, std::size_t width) {
  config.validate();
  const std::size_t k = config.kernel_size;
  const std::size_t pad = k / 2;
  double flops = 0;
  std::size_t cin = config.in_channels, h = height, w = width;
  for (std::size_t cout : config.block_channels) {
    h = kernels::conv_out_extent(h, k, config.stride, pad);
    w = kernels::conv_out_extent(w, k, config.stride, pad);
    flops += 2.0 * static_cast<double>(k * k * cin * cout) * static_cast<double>(h * w);
    cin = cout;
  }
  flops += static_cast<double>(cin * h * w);
  flops += 2.0 * static_cast<double>(cin * config.num_classes);
  return flops;
}

template class Classifier<float>;
template class Classifier<double>;
template std::size_t predict_class<float>(std::span<const float>);
template std::size_t predict_class<double>(std::span<const double>);
template std::vector<std::size_t> predict_classes<float>(const Tensor<float>&);
template std::vector<std::size_t> predict_classes<double>(const Tensor<double>&);

}  // namespace nmr
