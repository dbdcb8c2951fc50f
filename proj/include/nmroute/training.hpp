#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "nmroute/classifier.hpp"
#include "nmroute/data.hpp"
#include "nmroute/losses.hpp"
#include "nmroute/restoration.hpp"

namespace nmr {

// lr_min + (lr_max - lr_min) * (1 + cos(pi * t / T)) / 2.
double cosine_lr(std::size_t t, std::size_t total, double lr_max, double lr_min);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam over a fixed list of parameters. Each parameter's
/// current grad (zero when absent) is the update direction; callers add any
/// regularization gradient into it beforehand.
class Adam {
 public:
  Adam(std::vector<NamedTensor<float>> params, AdamConfig config);

  // Throws ContractError if any parameter no longer requires grad (frozen).
  void step(double lr);
  void zero_grad();

  std::size_t steps() const { return t_; }
  const std::vector<NamedTensor<float>>& params() const { return params_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }

  void save(const std::filesystem::path& dir) const;
  void load(const std::filesystem::path& dir);

 private:
  std::vector<NamedTensor<float>> params_;
  AdamConfig config_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

struct StageConfig {
  std::size_t epochs = 1;
  double lr_max = 1e-3;
  double lr_min = 1e-6;
  std::size_t batch_size = 32;

  void validate(const std::string& name, bool allow_zero_epochs) const;
};

struct TrainConfig {
  StageConfig stage1{30, 1e-3, 1e-6, 32};
  StageConfig stage2{60, 1e-4, 1e-6, 32};
  StageConfig stage3{60, 1e-5, 1e-7, 32};
  // Budget of the end-to-end baseline that skips stages 1 and 2.
  StageConfig scratch{120, 1e-4, 1e-6, 32};
  AdamConfig adam;
  LossWeights loss;
  double lambda_w = 2e-4;
  bool sr_ste = true;  // false: plain STE (masked weight gradients, no decay)
  std::uint64_t seed = 1;
  // Stage-3 knobs for diagnostics runs.
  bool stage3_freeze_restoration = false;
  double stage3_classifier_lr_max = 0;  // 0: use stage3.lr_max / lr_min
  double stage3_classifier_lr_min = 0;
  // Singleton branch sets have no classifier; when set, stage 3 still
  // fine-tunes the lone branch on L_W so budgets match routed models.
  bool singleton_finetune = true;

  void validate() const;
};

void to_json(nlohmann::json& j, const StageConfig& c);
void from_json(const nlohmann::json& j, StageConfig& c);
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct ModelConfig {
  ClassifierConfig classifier;
  std::size_t depth = 5;
  std::size_t width = 16;
  std::size_t channels = 1;
  bool residual = true;
  bool mask_first_last = false;
  bool shared_bn = false;
  std::string branches = "1&2&4";
  std::vector<double> costs;  // empty: n/m per branch

  void validate() const;
  std::size_t num_branches() const;
  RestorationConfig restoration(bool sr_ste) const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// Classifier plus shared restoration network. Singleton branch sets carry
/// no classifier and route everything to branch 0.
class Model {
 public:
  Model(const ModelConfig& config, bool sr_ste, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  bool routed() const { return classifier_.has_value(); }
  std::size_t num_branches() const { return net_.num_branches(); }
  Classifier<float>& classifier();
  const Classifier<float>& classifier() const;
  RestorationNet<float>& net() { return net_; }
  const RestorationNet<float>& net() const { return net_; }
  std::vector<double> costs() const;

  // Eval-mode class probabilities [B, L]; all ones for singleton sets.
  Tensor<float> probabilities(const Tensor<float>& y);
  std::vector<std::size_t> route(const Tensor<float>& y);

  std::vector<NamedTensor<float>> parameters() const;
  std::vector<NamedBuffer<float>> buffers();

 private:
  ModelConfig config_;
  std::optional<Classifier<float>> classifier_;
  RestorationNet<float> net_;
};

// Adds lambda * sum_i pbar_i * (1 - mask_i) ⊙ W to the grad of every masked
// conv weight, over branches with a sparse pattern.
void add_sr_ste_decay(RestorationNet<float>& net, const std::vector<double>& pbar, double lambda);

/// One row of the per-epoch CSV log.
struct EpochLog {
  std::size_t stage = 0;
  std::size_t epoch = 0;
  double lr = 0;
  double l_ce = 0, l_w = 0, l_e = 0, l_c = 0, l_f = 0;
  std::vector<double> mean_p;
  double accuracy = 0;
};

std::string log_csv_header(std::size_t num_branches);
std::string log_csv_row(const EpochLog& log);
void write_log_csv(const std::filesystem::path& path, const std::vector<EpochLog>& logs,
                   std::size_t num_branches);

enum class Pipeline { staged, scratch };

/// Resumable training state. Stages run 1, 2, 3 (staged) or only the
/// scratch stage (numbered 4); `stage` is the stage in progress and `epoch`
/// the next epoch to run inside it.
struct TrainState {
  Pipeline pipeline = Pipeline::staged;
  std::size_t stage = 1;
  std::size_t epoch = 0;
  std::size_t step = 0;  // optimizer steps taken inside the current stage
  bool done = false;
  std::mt19937_64 rng;
  std::vector<EpochLog> logs;
};

class Trainer {
 public:
  // `val` (optional) provides held-out classifier accuracy for the logs.
  Trainer(Model& model, TrainConfig config, const Dataset& train, const Dataset* val = nullptr,
          Pipeline pipeline = Pipeline::staged);

  // Runs up to and including `last_stage` (1..3 for staged pipelines), or
  // until `max_epochs` more epochs have completed. Returns true when done.
  bool run(std::size_t last_stage = 3, std::optional<std::size_t> max_epochs = std::nullopt);

  const TrainState& state() const { return state_; }
  const std::vector<EpochLog>& logs() const { return state_.logs; }
  const TrainConfig& config() const { return config_; }

  void save_checkpoint(const std::filesystem::path& dir) const;
  void load_checkpoint(const std::filesystem::path& dir);

 private:
  void begin_stage();
  EpochLog run_epoch();
  const StageConfig& stage_config() const;
  std::size_t batches_per_epoch() const;
  std::size_t final_stage() const;
  double classifier_accuracy();

  Model& model_;
  TrainConfig config_;
  const Dataset& train_;
  const Dataset* val_;
  TrainState state_;
  std::optional<Adam> cls_opt_;
  std::optional<Adam> net_opt_;
};

// Eval-mode held-out accuracy of the classifier against pseudo labels.
double classifier_accuracy(Model& model, const Dataset& data, std::size_t batch_size = 64);

void save_model(const std::filesystem::path& dir, Model& model);
// Loads parameters and buffers into a model built from the saved config.
Model load_model(const std::filesystem::path& dir);

// Parameter tensors and buffers as files under dir/params.
void write_parameters(const std::filesystem::path& dir, const std::vector<NamedTensor<float>>& params,
                      const std::vector<NamedBuffer<float>>& buffers);
void read_parameters(const std::filesystem::path& dir, const std::vector<NamedTensor<float>>& params,
                     const std::vector<NamedBuffer<float>>& buffers);

}  // namespace nmr
