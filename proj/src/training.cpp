#include "nmroute/training.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include "json_util.hpp"
#include "nmroute/errors.hpp"
#include "nmroute/tensor_io.hpp"

namespace nmr {

namespace fs = std::filesystem;
using nlohmann::json;

double cosine_lr(std::size_t t, std::size_t total, double lr_max, double lr_min) {
  if (total == 0) return lr_max;
  const double frac = static_cast<double>(std::min(t, total)) / static_cast<double>(total);
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * frac));
}

// ---------------------------------------------------------------------------
// Adam

Adam::Adam(std::vector<NamedTensor<float>> params, AdamConfig config)
    : params_(std::move(params)), config_(config) {
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor.numel(), 0.0);
    v_.emplace_back(p.tensor.numel(), 0.0);
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

void Adam::step(double lr) {
  for (const auto& p : params_) {
    if (!p.tensor.requires_grad()) {
      throw ContractError("optimizer asked to update frozen parameter " + p.name);
    }
  }
  ++t_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = params_[k].tensor;
    auto w = p.mutable_data();
    const bool has = p.has_grad();
    std::span<const float> g = has ? p.grad() : std::span<const float>();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = has ? g[i] : 0.0;
      m[i] = b1 * m[i] + (1.0 - b1) * gi;
      v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
      const double mhat = m[i] / c1, vhat = v[i] / c2;
      w[i] = static_cast<float>(w[i] - lr * mhat / (std::sqrt(vhat) + config_.eps));
    }
  }
}

void Adam::save(const fs::path& dir) const {
  fs::create_directories(dir);
  json names = json::array();
  for (std::size_t k = 0; k < params_.size(); ++k) {
    const auto& shape = params_[k].tensor.shape();
    save_tensor(dir / (params_[k].name + ".m.nmt"), Tensor<double>(shape, m_[k]));
    save_tensor(dir / (params_[k].name + ".v.nmt"), Tensor<double>(shape, v_[k]));
    names.push_back(params_[k].name);
  }
  std::ofstream os(dir / "adam.json");
  os << json{{"t", t_}, {"params", names}}.dump(2) << "\n";
  if (!os) throw IoError("cannot write optimizer state to " + dir.string());
}

void Adam::load(const fs::path& dir) {
  std::ifstream is(dir / "adam.json");
  if (!is) throw IoError("optimizer state " + (dir / "adam.json").string() + " not found");
  json j;
  try {
    j = json::parse(is);
    t_ = j.at("t").get<std::size_t>();
    const auto names = j.at("params").get<std::vector<std::string>>();
    if (names.size() != params_.size()) throw FormatError("optimizer parameter list differs");
    for (std::size_t k = 0; k < params_.size(); ++k) {
      if (names[k] != params_[k].name) throw FormatError("optimizer parameter " + names[k] + " unexpected");
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed optimizer state: ") + e.what());
  }
  for (std::size_t k = 0; k < params_.size(); ++k) {
    const auto m = load_tensor<double>(dir / (params_[k].name + ".m.nmt"));
    const auto v = load_tensor<double>(dir / (params_[k].name + ".v.nmt"));
    if (m.shape() != params_[k].tensor.shape() || v.shape() != m.shape()) {
      throw FormatError("optimizer moment shape mismatch for " + params_[k].name);
    }
    m_[k].assign(m.data().begin(), m.data().end());
    v_[k].assign(v.data().begin(), v.data().end());
  }
}

// ---------------------------------------------------------------------------
// Configs

void StageConfig::validate(const std::string& name, bool allow_zero_epochs) const {
  if (!allow_zero_epochs && epochs == 0) throw ConfigError(name + ": epochs must be at least 1");
  if (!(lr_min > 0) || lr_max < lr_min) throw ConfigError(name + ": need lr_max >= lr_min > 0");
  if (batch_size == 0) throw ConfigError(name + ": batch size must be positive");
}

void TrainConfig::validate() const {
  stage1.validate("stage1", true);
  stage2.validate("stage2", true);
  stage3.validate("stage3", true);
  scratch.validate("scratch", true);
  loss.validate();
  if (lambda_w < 0) throw ConfigError("lambda_w must be non-negative");
  if (adam.beta1 < 0 || adam.beta1 >= 1 || adam.beta2 < 0 || adam.beta2 >= 1 || !(adam.eps > 0)) {
    throw ConfigError("adam: need 0 <= beta < 1 and eps > 0");
  }
  if (stage3_classifier_lr_max < 0 || stage3_classifier_lr_min < 0 ||
      (stage3_classifier_lr_max > 0 && stage3_classifier_lr_min > stage3_classifier_lr_max)) {
    throw ConfigError("stage3 classifier lr override must satisfy lr_max >= lr_min >= 0");
  }
}

void to_json(json& j, const StageConfig& c) {
  j = json{{"epochs", c.epochs}, {"lr_max", c.lr_max}, {"lr_min", c.lr_min}, {"batch_size", c.batch_size}};
}

void from_json(const json& j, StageConfig& c) {
  const std::string what = "stage";
  jsonutil::require_object(j, what);
  jsonutil::reject_unknown(j, {"epochs", "lr_max", "lr_min", "batch_size"}, what);
  jsonutil::read(j, "epochs", c.epochs, what);
  jsonutil::read(j, "lr_max", c.lr_max, what);
  jsonutil::read(j, "lr_min", c.lr_min, what);
  jsonutil::read(j, "batch_size", c.batch_size, what);
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"stage1", c.stage1},
           {"stage2", c.stage2},
           {"stage3", c.stage3},
           {"scratch", c.scratch},
           {"adam_beta1", c.adam.beta1},
           {"adam_beta2", c.adam.beta2},
           {"adam_eps", c.adam.eps},
           {"omega1", c.loss.omega1},
           {"omega2", c.loss.omega2},
           {"omega3", c.loss.omega3},
           {"lambda_w", c.lambda_w},
           {"sr_ste", c.sr_ste},
           {"seed", c.seed},
           {"stage3_freeze_restoration", c.stage3_freeze_restoration},
           {"stage3_classifier_lr_max", c.stage3_classifier_lr_max},
           {"stage3_classifier_lr_min", c.stage3_classifier_lr_min},
           {"singleton_finetune", c.singleton_finetune}};
}

void from_json(const json& j, TrainConfig& c) {
  const std::string what = "train";
  jsonutil::require_object(j, what);
  jsonutil::reject_unknown(j, {"stage1", "stage2", "stage3", "scratch", "adam_beta1", "adam_beta2",
                               "adam_eps", "omega1", "omega2", "omega3", "lambda_w", "sr_ste", "seed",
                               "stage3_freeze_restoration", "stage3_classifier_lr_max",
                               "stage3_classifier_lr_min", "singleton_finetune"},
                           what);
  jsonutil::read(j, "stage1", c.stage1, what);
  jsonutil::read(j, "stage2", c.stage2, what);
  jsonutil::read(j, "stage3", c.stage3, what);
  jsonutil::read(j, "scratch", c.scratch, what);
  jsonutil::read(j, "adam_beta1", c.adam.beta1, what);
  jsonutil::read(j, "adam_beta2", c.adam.beta2, what);
  jsonutil::read(j, "adam_eps", c.adam.eps, what);
  jsonutil::read(j, "omega1", c.loss.omega1, what);
  jsonutil::read(j, "omega2", c.loss.omega2, what);
  jsonutil::read(j, "omega3", c.loss.omega3, what);
  jsonutil::read(j, "lambda_w", c.lambda_w, what);
  jsonutil::read(j, "sr_ste", c.sr_ste, what);
  jsonutil::read(j, "seed", c.seed, what);
  jsonutil::read(j, "stage3_freeze_restoration", c.stage3_freeze_restoration, what);
  jsonutil::read(j, "stage3_classifier_lr_max", c.stage3_classifier_lr_max, what);
  jsonutil::read(j, "stage3_classifier_lr_min", c.stage3_classifier_lr_min, what);
  jsonutil::read(j, "singleton_finetune", c.singleton_finetune, what);
}

std::size_t ModelConfig::num_branches() const { return parse_branch_set(branches).size(); }

void ModelConfig::validate() const {
  try {
    restoration(true).validate();
  } catch (const ContractError& e) {
    throw ConfigError(std::string("model: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  if (!costs.empty() && costs.size() != num_branches()) {
    throw ConfigError("model: " + std::to_string(costs.size()) + " costs for " +
                      std::to_string(num_branches()) + " branches");
  }
  ClassifierConfig c = classifier;
  c.num_classes = std::max<std::size_t>(2, num_branches());
  c.in_channels = channels;
  try {
    c.validate();
  } catch (const ContractError& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
}

RestorationConfig ModelConfig::restoration(bool sr_ste) const {
  RestorationConfig r;
  r.depth = depth;
  r.width = width;
  r.channels = channels;
  r.residual = residual;
  r.mask_first_last = mask_first_last;
  r.shared_bn = shared_bn;
  r.weight_grad = sr_ste ? ops::WeightGrad::straight_through : ops::WeightGrad::masked;
  r.branches = parse_branch_set(branches, shared_bn);
  if (!costs.empty()) {
    if (costs.size() != r.branches.size()) throw ConfigError("model: cost list length mismatch");
    for (std::size_t i = 0; i < costs.size(); ++i) r.branches[i].cost = costs[i];
  }
  return r;
}

void to_json(json& j, const ModelConfig& c) {
  j = json{{"classifier_channels", c.classifier.block_channels},
           {"classifier_kernel", c.classifier.kernel_size},
           {"classifier_stride", c.classifier.stride},
           {"depth", c.depth},
           {"width", c.width},
           {"channels", c.channels},
           {"residual", c.residual},
           {"mask_first_last", c.mask_first_last},
           {"shared_bn", c.shared_bn},
           {"branches", c.branches},
           {"branch_costs", c.costs}};
}

void from_json(const json& j, ModelConfig& c) {
  const std::string what = "model";
  jsonutil::require_object(j, what);
  jsonutil::reject_unknown(j, {"classifier_channels", "classifier_kernel", "classifier_stride", "depth",
                               "width", "channels", "residual", "mask_first_last", "shared_bn",
                               "branches", "branch_costs"},
                           what);
  jsonutil::read(j, "classifier_channels", c.classifier.block_channels, what);
  jsonutil::read(j, "classifier_kernel", c.classifier.kernel_size, what);
  jsonutil::read(j, "classifier_stride", c.classifier.stride, what);
  jsonutil::read(j, "depth", c.depth, what);
  jsonutil::read(j, "width", c.width, what);
  jsonutil::read(j, "channels", c.channels, what);
  jsonutil::read(j, "residual", c.residual, what);
  jsonutil::read(j, "mask_first_last", c.mask_first_last, what);
  jsonutil::read(j, "shared_bn", c.shared_bn, what);
  jsonutil::read(j, "branches", c.branches, what);
  jsonutil::read(j, "branch_costs", c.costs, what);
}

// ---------------------------------------------------------------------------
// Model

namespace {

std::optional<Classifier<float>> make_classifier(const ModelConfig& config, std::uint64_t seed) {
  const std::size_t L = config.num_branches();
  if (L < 2) return std::nullopt;
  ClassifierConfig c = config.classifier;
  c.num_classes = L;
  c.in_channels = config.channels;
  auto rng = sample_rng(seed, 100, 0);
  return Classifier<float>(c, rng);
}

RestorationNet<float> make_net(const ModelConfig& config, bool sr_ste, std::uint64_t seed) {
  auto rng = sample_rng(seed, 101, 0);
  return RestorationNet<float>(config.restoration(sr_ste), rng);
}

}  // namespace

Model::Model(const ModelConfig& config, bool sr_ste, std::uint64_t seed)
    : config_(config),
      classifier_((config.validate(), make_classifier(config, seed))),
      net_(make_net(config, sr_ste, seed)) {}

Classifier<float>& Model::classifier() {
  if (!classifier_) throw ContractError("singleton branch sets have no classifier");
  return *classifier_;
}

const Classifier<float>& Model::classifier() const {
  if (!classifier_) throw ContractError("singleton branch sets have no classifier");
  return *classifier_;
}

std::vector<double> Model::costs() const {
  std::vector<double> c;
  for (const auto& b : net_.config().branches) c.push_back(b.cost);
  return c;
}

Tensor<float> Model::probabilities(const Tensor<float>& y) {
  NoGradGuard guard;
  if (!classifier_) return Tensor<float>::ones({y.dim(0), 1});
  return classifier_->forward(y, ops::Mode::eval).probs;
}

std::vector<std::size_t> Model::route(const Tensor<float>& y) {
  return predict_classes(probabilities(y));
}

std::vector<NamedTensor<float>> Model::parameters() const {
  std::vector<NamedTensor<float>> out;
  if (classifier_) out = classifier_->parameters();
  for (auto& p : net_.parameters()) out.push_back(std::move(p));
  return out;
}

std::vector<NamedBuffer<float>> Model::buffers() {
  std::vector<NamedBuffer<float>> out;
  if (classifier_) out = classifier_->buffers();
  for (auto& b : net_.buffers()) out.push_back(std::move(b));
  return out;
}

void add_sr_ste_decay(RestorationNet<float>& net, const std::vector<double>& pbar, double lambda) {
  if (pbar.size() != net.num_branches()) throw DimensionError("add_sr_ste_decay: one weight per branch");
  if (lambda < 0) throw ContractError("add_sr_ste_decay: lambda must be non-negative");
  if (lambda == 0) return;
  auto weights = net.conv_weights();
  for (std::size_t i = 0; i < net.num_branches(); ++i) {
    if (pbar[i] == 0) continue;
    const auto masks = net.branch_masks(i);
    const double coeff = lambda * pbar[i];
    for (std::size_t l = 0; l < weights.size(); ++l) {
      if (!masks[l]) continue;
      auto w = weights[l].data();
      auto g = weights[l].mutable_grad();
      const auto& bits = masks[l]->bits;
      for (std::size_t k = 0; k < w.size(); ++k) {
        if (!bits[k]) g[k] = static_cast<float>(g[k] + coeff * w[k]);
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Logs

namespace {

std::string fmt(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

json log_to_json(const EpochLog& l) {
  return json{{"stage", l.stage}, {"epoch", l.epoch}, {"lr", l.lr},   {"l_ce", l.l_ce},
              {"l_w", l.l_w},     {"l_e", l.l_e},     {"l_c", l.l_c}, {"l_f", l.l_f},
              {"mean_p", l.mean_p}, {"accuracy", l.accuracy}};
}

EpochLog log_from_json(const json& j) {
  EpochLog l;
  l.stage = j.at("stage");
  l.epoch = j.at("epoch");
  l.lr = j.at("lr");
  l.l_ce = j.at("l_ce");
  l.l_w = j.at("l_w");
  l.l_e = j.at("l_e");
  l.l_c = j.at("l_c");
  l.l_f = j.at("l_f");
  l.mean_p = j.at("mean_p").get<std::vector<double>>();
  l.accuracy = j.at("accuracy");
  return l;
}

}  // namespace

std::string log_csv_header(std::size_t num_branches) {
  std::string h = "epoch,stage,lr,L_CE,L_W,L_E,L_C,L_F";
  for (std::size_t i = 0; i < num_branches; ++i) h += ",mean_p_" + std::to_string(i);
  return h + ",classifier_accuracy";
}

std::string log_csv_row(const EpochLog& l) {
  std::string r = std::to_string(l.epoch) + "," + std::to_string(l.stage) + "," + fmt(l.lr) + "," +
                  fmt(l.l_ce) + "," + fmt(l.l_w) + "," + fmt(l.l_e) + "," + fmt(l.l_c) + "," + fmt(l.l_f);
  for (double p : l.mean_p) r += "," + fmt(p);
  return r + "," + fmt(l.accuracy);
}

void write_log_csv(const fs::path& path, const std::vector<EpochLog>& logs, std::size_t num_branches) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << log_csv_header(num_branches) << "\n";
  for (const auto& l : logs) os << log_csv_row(l) << "\n";
}

// ---------------------------------------------------------------------------
// Trainer

double classifier_accuracy(Model& model, const Dataset& data, std::size_t batch_size) {
  if (data.size() == 0) return 0;
  if (!model.routed()) {
    return std::count(data.labels.begin(), data.labels.end(), 0u) / static_cast<double>(data.size());
  }
  std::size_t correct = 0;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    std::vector<std::size_t> idx(std::min(batch_size, data.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const auto pred = model.route(data.degraded_batch(idx));
    for (std::size_t k = 0; k < idx.size(); ++k) correct += pred[k] == data.labels[idx[k]] ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

Trainer::Trainer(Model& model, TrainConfig config, const Dataset& train, const Dataset* val,
                 Pipeline pipeline)
    : model_(model), config_(std::move(config)), train_(train), val_(val) {
  config_.validate();
  if (train_.size() == 0) throw ContractError("training set is empty");
  const auto sample = train_.sample_shape();
  if (sample.size() != 3 || sample[0] != model_.config().channels) {
    throw DimensionError("dataset samples " + shape_str(sample) + " do not match model channels " +
                         std::to_string(model_.config().channels));
  }
  for (auto l : train_.labels) {
    if (model_.routed() && l >= model_.num_branches()) {
      throw DimensionError("dataset label " + std::to_string(l) + " exceeds the " +
                           std::to_string(model_.num_branches()) + " branches of the model");
    }
  }
  state_.pipeline = pipeline;
  state_.stage = pipeline == Pipeline::staged ? 1 : 4;
  state_.rng = sample_rng(config_.seed, 102, 0);
}

const StageConfig& Trainer::stage_config() const {
  switch (state_.stage) {
    case 1: return config_.stage1;
    case 2: return config_.stage2;
    case 3: return config_.stage3;
    default: return config_.scratch;
  }
}

std::size_t Trainer::final_stage() const { return state_.pipeline == Pipeline::staged ? 3 : 4; }

std::size_t Trainer::batches_per_epoch() const {
  const std::size_t b = stage_config().batch_size;
  return (train_.size() + b - 1) / b;
}

namespace {

bool stage_skipped(std::size_t stage, const Model& model, const TrainConfig& config) {
  if (stage == 1 && !model.routed()) return true;
  if (stage == 3 && !model.routed() && !config.singleton_finetune) return true;
  return false;
}

}  // namespace

void Trainer::begin_stage() {
  cls_opt_.reset();
  net_opt_.reset();
  bool train_cls = false, train_net = false;
  switch (state_.stage) {
    case 1: train_cls = true; break;
    case 2: train_net = true; break;
    case 3: train_cls = true; train_net = !config_.stage3_freeze_restoration; break;
    default: train_cls = true; train_net = true; break;
  }
  train_cls = train_cls && model_.routed();
  if (model_.routed()) model_.classifier().set_frozen(!train_cls);
  model_.net().set_frozen(!train_net);
  if (train_cls) cls_opt_.emplace(model_.classifier().parameters(), config_.adam);
  if (train_net) net_opt_.emplace(model_.net().parameters(), config_.adam);
}

double Trainer::classifier_accuracy() {
  return nmr::classifier_accuracy(model_, val_ ? *val_ : train_);
}

EpochLog Trainer::run_epoch() {
  const auto& sc = stage_config();
  const std::size_t n = train_.size(), B = sc.batch_size, nb = batches_per_epoch();
  const std::size_t total = sc.epochs * nb;
  const std::size_t L = model_.num_branches();
  const auto costs = model_.costs();
  const std::size_t stage = state_.stage;

  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), state_.rng);

  EpochLog log;
  log.stage = stage;
  log.epoch = state_.epoch;
  log.lr = cosine_lr(state_.step, total, sc.lr_max, sc.lr_min);
  log.mean_p.assign(L, 0.0);
  double sum_ce = 0, sum_w = 0, sum_e = 0, sum_c = 0, sum_f = 0;

  for (std::size_t b = 0; b < nb; ++b) {
    std::vector<std::size_t> idx(perm.begin() + static_cast<std::ptrdiff_t>(b * B),
                                 perm.begin() + static_cast<std::ptrdiff_t>(std::min(n, (b + 1) * B)));
    const double lr = cosine_lr(state_.step, total, sc.lr_max, sc.lr_min);
    const auto y = train_.degraded_batch(idx);
    const double weight = static_cast<double>(idx.size());
    Tensor<float> p;

    if (stage == 1) {
      std::vector<std::size_t> labels;
      for (auto i : idx) labels.push_back(train_.labels[i]);
      auto out = model_.classifier().forward(y, ops::Mode::train);
      auto ce = classification_loss(out.logits, labels);
      cls_opt_->zero_grad();
      ce.backward();
      cls_opt_->step(lr);
      sum_ce += ce.item() * weight;
      p = out.probs;
    } else {
      const auto x = train_.clean_batch(idx);
      const bool net_trains = net_opt_.has_value();
      const bool cls_trains = cls_opt_.has_value();
      if (cls_trains) {
        p = model_.classifier().forward(y, ops::Mode::train).probs;
      } else {
        p = model_.probabilities(y);
      }
      std::vector<Tensor<float>> outs;
      if (net_trains) {
        outs = model_.net().forward_all(y, ops::Mode::train);
      } else {
        NoGradGuard guard;
        outs = model_.net().forward_all(y, ops::Mode::eval);
      }
      auto lw = weighted_l1(p, outs, x);
      Tensor<float> le, lc, lf;
      if (stage == 2) {
        NoGradGuard guard;
        le = entropy_loss(p);
        lc = cost_loss(p, costs);
        lf = final_loss(lw, le, lc, config_.loss);
      } else {
        le = entropy_loss(p);
        lc = cost_loss(p, costs);
        lf = final_loss(lw, le, lc, config_.loss);
      }
      if (cls_opt_) cls_opt_->zero_grad();
      if (net_opt_) net_opt_->zero_grad();
      (stage == 2 ? lw : lf).backward();
      if (net_trains) {
        if (config_.sr_ste) {
          std::vector<double> pbar(L, 0.0);
          auto pd = p.data();
          for (std::size_t r = 0; r < idx.size(); ++r)
            for (std::size_t i = 0; i < L; ++i) pbar[i] += pd[r * L + i] / weight;
          add_sr_ste_decay(model_.net(), pbar, config_.lambda_w);
        }
        net_opt_->step(lr);
      }
      if (cls_trains) {
        double clr = lr;
        if (stage == 3 && config_.stage3_classifier_lr_max > 0) {
          const double lo = config_.stage3_classifier_lr_min > 0 ? config_.stage3_classifier_lr_min
                                                                 : config_.stage3_classifier_lr_max;
          clr = cosine_lr(state_.step, total, config_.stage3_classifier_lr_max, lo);
        }
        cls_opt_->step(clr);
      }
      sum_w += lw.item() * weight;
      sum_e += le.item() * weight;
      sum_c += lc.item() * weight;
      sum_f += lf.item() * weight;
    }
    auto pd = p.data();
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t i = 0; i < L; ++i) log.mean_p[i] += pd[r * L + i];
    ++state_.step;
  }
  const double dn = static_cast<double>(n);
  log.l_ce = sum_ce / dn;
  log.l_w = sum_w / dn;
  log.l_e = sum_e / dn;
  log.l_c = sum_c / dn;
  log.l_f = sum_f / dn;
  for (auto& v : log.mean_p) v /= dn;
  log.accuracy = classifier_accuracy();
  return log;
}

bool Trainer::run(std::size_t last_stage, std::optional<std::size_t> max_epochs) {
  std::size_t ran = 0;
  while (!state_.done) {
    if (state_.pipeline == Pipeline::staged && state_.stage > last_stage) return false;
    if (stage_skipped(state_.stage, model_, config_) || state_.epoch >= stage_config().epochs) {
      cls_opt_.reset();
      net_opt_.reset();
      if (state_.stage >= final_stage()) {
        state_.done = true;
        break;
      }
      ++state_.stage;
      state_.epoch = 0;
      state_.step = 0;
      continue;
    }
    if (max_epochs && ran >= *max_epochs) return false;
    if (!cls_opt_ && !net_opt_) begin_stage();
    state_.logs.push_back(run_epoch());
    ++state_.epoch;
    ++ran;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Persistence

namespace {

std::string param_file(const std::string& name) { return name + ".nmt"; }

json read_json(const fs::path& path, const std::string& what) {
  std::ifstream is(path);
  if (!is) throw IoError(what + " " + path.string() + " not found");
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw FormatError("malformed " + what + " " + path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << j.dump(2) << "\n";
}

}  // namespace

void write_parameters(const fs::path& dir, const std::vector<NamedTensor<float>>& params,
                      const std::vector<NamedBuffer<float>>& buffers) {
  fs::create_directories(dir);
  for (const auto& p : params) save_tensor(dir / param_file(p.name), p.tensor.detach());
  for (const auto& b : buffers) {
    save_tensor(dir / param_file(b.name), Tensor<float>({b.values->size()}, *b.values));
  }
}

void read_parameters(const fs::path& dir, const std::vector<NamedTensor<float>>& params,
                     const std::vector<NamedBuffer<float>>& buffers) {
  for (auto p : params) {
    const auto t = load_tensor<float>(dir / param_file(p.name));
    if (t.shape() != p.tensor.shape()) {
      throw DimensionError("parameter " + p.name + " is " + shape_str(t.shape()) + " on disk, model expects " +
                           shape_str(p.tensor.shape()));
    }
    std::copy(t.data().begin(), t.data().end(), p.tensor.mutable_data().begin());
  }
  for (const auto& b : buffers) {
    const auto t = load_tensor<float>(dir / param_file(b.name));
    if (t.numel() != b.values->size()) throw DimensionError("buffer " + b.name + " has the wrong length");
    b.values->assign(t.data().begin(), t.data().end());
  }
}

namespace {

json parameter_manifest(const std::vector<NamedTensor<float>>& params) {
  json list = json::array();
  for (const auto& p : params) list.push_back({{"name", p.name}, {"shape", p.tensor.shape()}});
  return list;
}

json restoration_manifest(const RestorationNet<float>& net) {
  json branches = json::array();
  for (const auto& b : net.config().branches) {
    branches.push_back({{"n", b.pattern.n}, {"m", b.pattern.m}, {"cost", b.cost}, {"bn_bank", b.bn_bank}});
  }
  json masked = json::array();
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    if (net.layer_masked(l)) masked.push_back(l);
  }
  return json{{"depth", net.config().depth},
              {"width", net.config().width},
              {"residual", net.config().residual},
              {"branches", branches},
              {"masked_layers", masked}};
}

bool model_sr_ste(const Model& model) {
  return model.net().config().weight_grad == ops::WeightGrad::straight_through;
}

}  // namespace

void save_model(const fs::path& dir, Model& model) {
  fs::create_directories(dir);
  write_parameters(dir / "params", model.parameters(), model.buffers());
  write_json(dir / "manifest.json", json{{"format", "nmroute-model"},
                                         {"version", 1},
                                         {"model", model.config()},
                                         {"sr_ste", model_sr_ste(model)},
                                         {"restoration", restoration_manifest(model.net())},
                                         {"parameters", parameter_manifest(model.parameters())}});
}

Model load_model(const fs::path& dir) {
  const json manifest = read_json(dir / "manifest.json", "model manifest");
  const auto format = manifest.value("format", "");
  if (format != "nmroute-model" && format != "nmroute-checkpoint") {
    throw FormatError((dir / "manifest.json").string() + " is not a model or checkpoint manifest");
  }
  ModelConfig config;
  bool sr_ste = true;
  try {
    config = manifest.at("model").get<ModelConfig>();
    sr_ste = manifest.at("sr_ste").get<bool>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed model manifest: ") + e.what());
  }
  Model model(config, sr_ste, 0);
  read_parameters(dir / "params", model.parameters(), model.buffers());
  return model;
}

void Trainer::save_checkpoint(const fs::path& dir) const {
  fs::create_directories(dir);
  auto& model = const_cast<Model&>(model_);
  write_parameters(dir / "params", model.parameters(), model.buffers());
  if (cls_opt_) cls_opt_->save(dir / "optim" / "classifier");
  if (net_opt_) net_opt_->save(dir / "optim" / "restoration");
  {
    std::ofstream os(dir / "rng.txt");
    os << state_.rng << "\n";
    if (!os) throw IoError("cannot write " + (dir / "rng.txt").string());
  }
  json logs = json::array();
  for (const auto& l : state_.logs) logs.push_back(log_to_json(l));
  write_json(dir / "manifest.json",
             json{{"format", "nmroute-checkpoint"},
                  {"version", 1},
                  {"model", model_.config()},
                  {"sr_ste", model_sr_ste(model_)},
                  {"train", config_},
                  {"restoration", restoration_manifest(model_.net())},
                  {"parameters", parameter_manifest(model.parameters())},
                  {"state",
                   {{"pipeline", state_.pipeline == Pipeline::staged ? "staged" : "scratch"},
                    {"stage", state_.stage},
                    {"epoch", state_.epoch},
                    {"step", state_.step},
                    {"done", state_.done},
                    {"optimizers", {{"classifier", cls_opt_.has_value()}, {"restoration", net_opt_.has_value()}}}}},
                  {"logs", logs}});
  write_log_csv(dir / "log.csv", state_.logs, model_.num_branches());
}

void Trainer::load_checkpoint(const fs::path& dir) {
  const json manifest = read_json(dir / "manifest.json", "checkpoint manifest");
  if (manifest.value("format", "") != "nmroute-checkpoint") {
    throw FormatError((dir / "manifest.json").string() + " is not a checkpoint manifest");
  }
  if (manifest.at("model") != json(model_.config())) {
    throw ConfigError("checkpoint " + dir.string() + " was written for a different model config");
  }
  read_parameters(dir / "params", model_.parameters(), model_.buffers());
  bool has_cls = false, has_net = false;
  try {
    const auto& s = manifest.at("state");
    state_.pipeline = s.at("pipeline").get<std::string>() == "staged" ? Pipeline::staged : Pipeline::scratch;
    state_.stage = s.at("stage");
    state_.epoch = s.at("epoch");
    state_.step = s.at("step");
    state_.done = s.at("done");
    has_cls = s.at("optimizers").at("classifier");
    has_net = s.at("optimizers").at("restoration");
    state_.logs.clear();
    for (const auto& l : manifest.at("logs")) state_.logs.push_back(log_from_json(l));
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed checkpoint state: ") + e.what());
  }
  {
    std::ifstream is(dir / "rng.txt");
    if (!is || !(is >> state_.rng)) throw FormatError("bad RNG state in " + dir.string());
  }
  cls_opt_.reset();
  net_opt_.reset();
  if (has_cls || has_net) {
    begin_stage();
    if (cls_opt_.has_value() != has_cls || net_opt_.has_value() != has_net) {
      throw ConfigError("checkpoint optimizer layout does not match the training config");
    }
    if (cls_opt_) cls_opt_->load(dir / "optim" / "classifier");
    if (net_opt_) net_opt_->load(dir / "optim" / "restoration");
  } else if (!state_.done) {
    // Between stages: the next run() call creates fresh optimizers.
    const bool routed = model_.routed();
    if (routed) model_.classifier().set_frozen(false);
    model_.net().set_frozen(false);
  }
}

}  // namespace nmr
