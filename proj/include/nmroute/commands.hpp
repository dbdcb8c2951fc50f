#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "nmroute/data.hpp"
#include "nmroute/eval.hpp"
#include "nmroute/training.hpp"

namespace nmr::cli {

struct EvalSettings {
  KernelPath path = KernelPath::compressed;
  std::size_t batch_size = 64;
  std::optional<std::size_t> force_branch;
  bool svg = true;
};

/// Everything a command needs. `seed` is copied into the synthesis and
/// training configs by resolve(), so one number controls all randomness.
struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::filesystem::path out_dir = "out";
  SynthConfig synth;
  ModelConfig model;
  TrainConfig train;
  EvalSettings eval;
  BenchConfig bench;
  std::vector<std::string> ablation_sets{"1", "2", "4", "1&2", "1&4", "2&4", "1&2&4"};

  void resolve();
  void validate() const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

// Reads a JSON config file; ConfigError on malformed content, IoError when
// the file cannot be read.
ExperimentConfig load_config(const std::filesystem::path& path);

// Writes out_dir/config.json and echoes the config and seed to `log`.
void record_config(const ExperimentConfig& config, std::ostream& log);

void cmd_synth(const ExperimentConfig& config, std::ostream& log);
void cmd_pretrain(const ExperimentConfig& config, const std::filesystem::path& data_dir, std::ostream& log);
// Resumes from `checkpoint` (a pretrain output), or starts from scratch when
// absent and `all_stages` is set.
void cmd_train(const ExperimentConfig& config, const std::filesystem::path& data_dir,
               const std::optional<std::filesystem::path>& checkpoint, bool all_stages, std::ostream& log);
void cmd_eval(const ExperimentConfig& config, const std::filesystem::path& data_dir,
              const std::filesystem::path& model_dir, std::ostream& log);
void cmd_bench(const ExperimentConfig& config, std::ostream& log);
void cmd_ablate(const ExperimentConfig& config, const std::filesystem::path& data_dir, std::ostream& log);

// Maps an exception to an exit code and a one-line diagnostic.
struct Failure {
  int code;
  std::string kind;
};
Failure classify_error(const std::exception& e);

}  // namespace nmr::cli
