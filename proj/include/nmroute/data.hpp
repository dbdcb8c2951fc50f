#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "nmroute/tensor.hpp"

namespace nmr {

/// Per-sample RNG stream derived from (seed, stream, index), so samples can be
/// generated in any order with identical results.
std::mt19937_64 sample_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t index);

// Procedural clean image in [0, 1]: smooth gradients, random rectangles and
// band-limited sinusoid textures.
Tensor<float> procedural_clean(std::size_t channels, std::size_t height, std::size_t width,
                               std::mt19937_64& rng);

// (sigma / 255) * eps, eps ~ N(0, I), before any clamping.
Tensor<float> gaussian_noise(const Shape& shape, double sigma, std::mt19937_64& rng);
// y = clamp(x + gaussian_noise(...), 0, 1).
Tensor<float> synth_gaussian(const Tensor<float>& x, double sigma, std::mt19937_64& rng);

// Population variance over every element.
double variance(std::span<const float> values);
double residual_variance(const Tensor<float>& y, const Tensor<float>& x);

/// Difficulty tiers fit on a distribution of residual variances.
struct DifficultyTiers {
  std::vector<double> medians;     // strictly increasing, one per class
  std::vector<double> thresholds;  // L - 1 boundaries

  std::size_t num_classes() const { return medians.size(); }
  // Class whose interval holds `var`: the count of thresholds below it.
  std::size_t classify(double var) const;
};

// Splits sorted variances into L equal-count tiers. Throws ContractError on an
// empty list, L == 0, or tiers whose medians do not strictly increase.
DifficultyTiers compute_tiers(std::vector<double> variances, std::size_t num_classes);

struct LabeledSample {
  Tensor<float> degraded;  // [C, H, W]
  Tensor<float> clean;     // [C, H, W]
  std::size_t pseudo_class = 0;
  double remapped_variance = 0;  // before clamping
  std::size_t clamped = 0;       // pixels the final clamp changed
};

// Rescales R = y - x to the variance of its tier median and re-adds it.
// Throws ContractError when Var[R] == 0.
LabeledSample residual_remap(const Tensor<float>& y, const Tensor<float>& x,
                             const DifficultyTiers& tiers);

// Mean of the frames; throws ContractError if empty or shapes differ.
Tensor<float> deblur_fuse(const std::vector<Tensor<float>>& frames);
// Class for a fused count: the index of frames.size() in `frame_counts`.
std::size_t fused_class(std::size_t frame_count, const std::vector<std::size_t>& frame_counts);
// Synthetic frame sequence: copies of x shifted horizontally by one pixel each
// (edge-replicated), as seen by a camera panning during exposure.
std::vector<Tensor<float>> shifted_frames(const Tensor<float>& x, std::size_t count);

// patch x patch tiles of a [C, H, W] image with the given stride, row-major order.
std::vector<Tensor<float>> extract_patches(const Tensor<float>& image, std::size_t patch,
                                           std::size_t stride);
Tensor<float> random_crop(const Tensor<float>& image, std::size_t patch, std::mt19937_64& rng);

// Binary or ASCII PGM/PPM (P2, P3, P5, P6) to [C, H, W] in [0, 1]. With
// channels == 1, colour images are averaged to gray.
Tensor<float> read_pnm(const std::filesystem::path& path, std::size_t channels);
void write_pgm(const std::filesystem::path& path, const Tensor<float>& image);

struct SynthConfig {
  std::vector<double> sigmas{15, 25, 50};
  std::size_t num_classes = 3;
  std::size_t channels = 1;
  std::size_t patch_size = 32;
  std::size_t train_samples = 300;
  std::size_t test_samples = 90;
  std::uint64_t seed = 1;
  bool remap = true;        // replace generated residuals by tier-median ones
  std::string source_dir;   // optional directory of PGM/PPM cleans

  void validate() const;
};

void to_json(nlohmann::json& j, const SynthConfig& c);
void from_json(const nlohmann::json& j, SynthConfig& c);

/// One split: stacked degraded/clean images [N, C, H, W] with labels and the
/// generating noise level of each sample.
struct Dataset {
  Tensor<float> degraded;
  Tensor<float> clean;
  std::vector<std::size_t> labels;
  std::vector<double> sigmas;

  std::size_t size() const { return labels.size(); }
  Shape sample_shape() const;
  std::vector<std::size_t> histogram(std::size_t num_classes) const;
  // Samples at the given indices, in order.
  Dataset subset(const std::vector<std::size_t>& indices) const;
  Tensor<float> degraded_batch(const std::vector<std::size_t>& indices) const;
  Tensor<float> clean_batch(const std::vector<std::size_t>& indices) const;
};

struct DatasetBundle {
  SynthConfig config;
  DifficultyTiers tiers;
  Dataset train;
  Dataset test;
  double clamp_fraction = 0;  // pixels changed by the post-remap clamp, train and test
};

DatasetBundle synthesize(const SynthConfig& config);

void write_dataset(const std::filesystem::path& dir, const DatasetBundle& bundle);
DatasetBundle read_dataset(const std::filesystem::path& dir);

}  // namespace nmr
