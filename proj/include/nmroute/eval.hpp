#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "nmroute/data.hpp"
#include "nmroute/nm.hpp"
#include "nmroute/training.hpp"

namespace nmr {

// 10 log10(max^2 / MSE); +inf for identical inputs.
double psnr(std::span<const float> a, std::span<const float> b, double max_val = 1.0);
double psnr(const Tensor<float>& a, const Tensor<float>& b, double max_val = 1.0);

/// Windowed SSIM over [C, H, W] (or [H, W]) images: 11x11 Gaussian window
/// with sigma 1.5, K1 = 0.01, K2 = 0.03, valid windows only, averaged over
/// windows and channels.
double ssim(const Tensor<float>& a, const Tensor<float>& b, double max_val = 1.0);

// Text form used in CSV files: "inf" for infinite values.
std::string format_number(double v);

struct EvalRow {
  std::string model;  // "routed", "branch<i>" or "dense"
  std::string group;  // generating sigma, or "all"
  std::size_t count = 0;
  double psnr = 0;
  double ssim = 0;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  std::vector<std::string> branch_names;  // pattern per branch, e.g. "2:4"
  std::vector<double> routing;             // fraction of samples per branch
  // routing_by_group[g][i]: fraction of group g routed to branch i.
  std::vector<std::string> groups;
  std::vector<std::vector<double>> routing_by_group;
  std::vector<double> branch_flops;
  double classifier_flops = 0;
  double average_flops = 0;
  double dense_flops = 0;
  double average_flops_percent = 0;
  std::size_t base_parameters = 0;   // dense restoration net with a single BN bank
  std::size_t total_parameters = 0;  // everything the routed model stores
  std::size_t classifier_parameters = 0;
  std::optional<std::size_t> forced_branch;

  const EvalRow& row(const std::string& model, const std::string& group = "all") const;
  double routed_fraction(const std::string& group, std::size_t branch) const;
};

struct EvalOptions {
  KernelPath path = KernelPath::compressed;
  // Route every sample to this branch instead of the classifier's argmax.
  std::optional<std::size_t> force_branch;
  std::size_t batch_size = 64;
};

EvalReport evaluate(Model& model, const Dataset& data, const EvalOptions& options = {});

void write_report_csv(const std::filesystem::path& path, const EvalReport& report);
nlohmann::json report_json(const EvalReport& report);
void write_report_json(const std::filesystem::path& path, const EvalReport& report);

// Mean-probability curves over all logged epochs.
std::string probability_curve_svg(const std::vector<EpochLog>& logs, std::size_t num_branches);
// PSNR against FLOPs percentage for each fixed branch and the routed model.
std::string psnr_flops_svg(const EvalReport& report);

struct BenchRow {
  std::size_t rows = 0, cols = 0, n = 0;
  std::string pattern;
  double dense_ms = 0, masked_ms = 0, compressed_ms = 0;
  std::size_t dense_bytes = 0, value_bytes = 0, index_bytes = 0, group_count = 0;
  double max_abs_diff = 0;  // compressed vs masked-dense
  bool equivalent = false;  // max_abs_diff <= 1e-4
};

struct BenchConfig {
  std::vector<std::size_t> sizes{64, 128, 256};
  std::vector<std::string> patterns{"1:4", "2:4", "4:4"};
  std::size_t n_cols = 64;
  std::size_t repeats = 11;
  std::uint64_t seed = 1;
};

// Times dense, masked-dense and compressed products for square weights and
// reports medians. Correctness is gated; speed is only reported.
std::vector<BenchRow> bench_kernels(const BenchConfig& config);
void write_bench_csv(const std::filesystem::path& path, const std::vector<BenchRow>& rows);

/// Trains a model for the given configs and evaluates it on the test split.
struct ExperimentResult {
  std::vector<EpochLog> logs;
  double stage1_accuracy = 0;
  EvalReport report;
};

ExperimentResult run_experiment(const ModelConfig& model_config, const TrainConfig& train_config,
                                const DatasetBundle& data, const EvalOptions& eval_options = {},
                                Pipeline pipeline = Pipeline::staged);

struct AblationRow {
  std::string branches;
  std::vector<std::string> groups;
  std::vector<double> psnr;  // routed PSNR per group, then "all" last
  double average_flops_percent = 0;
  std::vector<double> routing;
};

// Trains and evaluates one model per branch set ("1", "2&4", ...).
std::vector<AblationRow> ablate_classification_types(const std::vector<std::string>& sets,
                                                     const DatasetBundle& data,
                                                     const ModelConfig& model_config,
                                                     const TrainConfig& train_config);
void write_ablation_csv(const std::filesystem::path& path, const std::vector<AblationRow>& rows);

}  // namespace nmr
