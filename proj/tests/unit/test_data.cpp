#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>

#include <unistd.h>

#include "nmroute/data.hpp"
#include "nmroute/errors.hpp"

using namespace nmr;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("nmroute_test_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

double var_of(std::span<const float> v) {
  double m = 0;
  for (float x : v) m += x;
  m /= static_cast<double>(v.size());
  double s = 0;
  for (float x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size());
}

}  // namespace

TEST(Synthesis, SampleRngIsAPureFunctionOfItsKey) {
  auto a = sample_rng(1, 0, 5), b = sample_rng(1, 0, 5), c = sample_rng(1, 1, 5);
  EXPECT_EQ(a(), b());
  EXPECT_NE(sample_rng(1, 0, 5)(), c());
}

TEST(Synthesis, ProceduralCleanStaysInRange) {
  for (int i = 0; i < 20; ++i) {
    auto rng = sample_rng(3, 0, i);
    auto x = procedural_clean(i % 2 ? 3 : 1, 32, 32, rng);
    for (float v : x.data()) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
  }
}

TEST(Synthesis, GaussianNoiseHasRequestedVariance) {
  std::mt19937_64 rng(1);
  auto n = gaussian_noise({1, 256, 256}, 25.0, rng);
  const double expected = (25.0 / 255) * (25.0 / 255);
  EXPECT_NEAR(var_of(n.data()) / expected, 1.0, 0.02);
  EXPECT_THROW(gaussian_noise({4}, -1.0, rng), ContractError);
}

TEST(Tiers, EqualCountQuantilesAndMidpointThresholds) {
  const auto t = compute_tiers({9, 1, 5, 3, 7, 2, 8, 4, 6}, 3);
  EXPECT_EQ(t.medians, (std::vector<double>{2, 5, 8}));
  EXPECT_EQ(t.thresholds, (std::vector<double>{3.5, 6.5}));
  EXPECT_EQ(t.classify(1.0), 0u);
  EXPECT_EQ(t.classify(3.5), 0u);
  EXPECT_EQ(t.classify(3.6), 1u);
  EXPECT_EQ(t.classify(100.0), 2u);
  const auto even = compute_tiers({4, 3, 2, 1}, 2);
  EXPECT_EQ(even.medians, (std::vector<double>{1.5, 3.5}));
  EXPECT_EQ(even.thresholds, (std::vector<double>{2.5}));
}

TEST(Tiers, RejectsDegenerateInputs) {
  EXPECT_THROW(compute_tiers({}, 3), ContractError);
  EXPECT_THROW(compute_tiers({1, 2, 3}, 0), ContractError);
  EXPECT_THROW(compute_tiers({1, 2}, 3), ContractError);
  EXPECT_THROW(compute_tiers({1, 1, 1, 1, 1, 1}, 3), ContractError);
}

TEST(Remap, GaussianResidualsMapToTheirGeneratingTier) {
  const std::vector<double> sigmas{15, 25, 50};
  std::vector<Tensor<float>> ys, xs;
  std::vector<std::size_t> tier;
  std::vector<double> vars;
  std::mt19937_64 rng(5);
  for (std::size_t s = 0; s < 90; ++s) {
    auto x = procedural_clean(1, 32, 32, rng);
    auto n = gaussian_noise(x.shape(), sigmas[s % 3], rng);
    std::vector<float> y(x.numel());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = x.data()[i] + n.data()[i];
    ys.emplace_back(x.shape(), y);
    xs.push_back(x);
    tier.push_back(s % 3);
    vars.push_back(residual_variance(ys.back(), x));
  }
  const auto tiers = compute_tiers(vars, 3);
  for (std::size_t s = 0; s < ys.size(); ++s) {
    const auto out = residual_remap(ys[s], xs[s], tiers);
    EXPECT_EQ(out.pseudo_class, tier[s]);
    EXPECT_NEAR(out.remapped_variance / tiers.medians[tier[s]], 1.0, 1e-6);
    for (float v : out.degraded.data()) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
  }
}

TEST(Remap, ZeroResidualIsRejectedAndClampIsCounted) {
  const auto tiers = compute_tiers({0.01, 0.02}, 2);
  Tensor<float> x({1, 4, 4}, 0.5f);
  EXPECT_THROW(residual_remap(x, x, tiers), ContractError);
  Tensor<float> bright({1, 4, 4}, 0.98f);
  std::vector<float> y(16);
  for (std::size_t i = 0; i < 16; ++i) y[i] = 0.98f + (i % 2 ? 0.3f : -0.3f);
  const auto out = residual_remap(Tensor<float>({1, 4, 4}, y), bright, tiers);
  EXPECT_GT(out.clamped, 0u);
}

TEST(Deblur, FusionIsTheFrameMean) {
  Tensor<float> a({1, 1, 2}, std::vector<float>{0, 1}), b({1, 1, 2}, std::vector<float>{1, 1});
  const auto f = deblur_fuse({a, b});
  EXPECT_FLOAT_EQ(f.data()[0], 0.5f);
  EXPECT_FLOAT_EQ(f.data()[1], 1.0f);
  EXPECT_THROW(deblur_fuse({}), ContractError);
  EXPECT_THROW(deblur_fuse({a, Tensor<float>({1, 2, 1})}), DimensionError);
  EXPECT_EQ(fused_class(7, {5, 7, 9}), 1u);
  EXPECT_THROW(fused_class(6, {5, 7, 9}), ContractError);
}

TEST(Deblur, ShiftedFramesReplicateTheEdge) {
  Tensor<float> x({1, 1, 3}, std::vector<float>{1, 2, 3});
  const auto frames = shifted_frames(x, 3);
  ASSERT_EQ(frames.size(), 3u);
  EXPECT_EQ(std::vector<float>(frames[0].data().begin(), frames[0].data().end()), (std::vector<float>{1, 2, 3}));
  EXPECT_EQ(std::vector<float>(frames[1].data().begin(), frames[1].data().end()), (std::vector<float>{2, 3, 3}));
  EXPECT_EQ(std::vector<float>(frames[2].data().begin(), frames[2].data().end()), (std::vector<float>{3, 3, 3}));
}

TEST(Patches, ExtractionOrderAndCount) {
  std::vector<float> v(64);
  for (std::size_t i = 0; i < 64; ++i) v[i] = static_cast<float>(i);
  Tensor<float> img({1, 8, 8}, v);
  const auto patches = extract_patches(img, 4, 2);
  ASSERT_EQ(patches.size(), 9u);
  EXPECT_EQ(patches[1].data()[0], 2.0f);
  EXPECT_EQ(patches[3].data()[0], 16.0f);
  EXPECT_EQ(patches[8].data()[15], 63.0f);
  EXPECT_THROW(extract_patches(img, 9, 1), DimensionError);
  std::mt19937_64 rng(1);
  EXPECT_EQ(random_crop(img, 5, rng).shape(), (Shape{1, 5, 5}));
}

TEST(Pnm, RoundTripAndAsciiAndColour) {
  const auto dir = temp_dir("pnm");
  std::vector<float> v{0, 1.0f / 255, 128.0f / 255, 1};
  write_pgm(dir / "a.pgm", Tensor<float>({1, 2, 2}, v));
  const auto back = read_pnm(dir / "a.pgm", 1);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_FLOAT_EQ(back.data()[i], v[i]);

  std::ofstream(dir / "b.pgm") << "P2\n# comment\n2 1\n4\n0 4\n";
  const auto ascii = read_pnm(dir / "b.pgm", 1);
  EXPECT_FLOAT_EQ(ascii.data()[0], 0.0f);
  EXPECT_FLOAT_EQ(ascii.data()[1], 1.0f);

  std::ofstream(dir / "c.ppm") << "P3\n1 1\n255\n255 0 0\n";
  EXPECT_FLOAT_EQ(read_pnm(dir / "c.ppm", 1).data()[0], 1.0f / 3);
  EXPECT_EQ(read_pnm(dir / "c.ppm", 3).shape(), (Shape{3, 1, 1}));

  std::ofstream(dir / "bad.pgm") << "P9\n";
  EXPECT_THROW(read_pnm(dir / "bad.pgm", 1), FormatError);
  EXPECT_THROW(read_pnm(dir / "missing.pgm", 1), IoError);
  fs::remove_all(dir);
}

TEST(SynthConfig, ValidationAndJson) {
  SynthConfig c;
  c.train_samples = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = SynthConfig{};
  c.sigmas = {10, 20};
  c.seed = 9;
  nlohmann::json j = c;
  const auto back = j.get<SynthConfig>();
  EXPECT_EQ(back.sigmas, c.sigmas);
  EXPECT_EQ(back.seed, 9u);
  j["bogus"] = 1;
  EXPECT_THROW(j.get<SynthConfig>(), ConfigError);
  EXPECT_THROW(nlohmann::json({{"patch_size", "big"}}).get<SynthConfig>(), ConfigError);
}

TEST(Synthesize, BalancedTiersAndDeterminism) {
  SynthConfig c;
  c.train_samples = 300;
  c.test_samples = 30;
  c.patch_size = 16;
  const auto a = synthesize(c);
  const auto h = a.train.histogram(3);
  for (auto n : h) EXPECT_NEAR(static_cast<double>(n), 100.0, 10.0);
  EXPECT_EQ(a.train.degraded.shape(), (Shape{300, 1, 16, 16}));
  const auto b = synthesize(c);
  EXPECT_TRUE(std::equal(a.train.degraded.data().begin(), a.train.degraded.data().end(), b.train.degraded.data().begin()));
  EXPECT_EQ(a.test.labels, b.test.labels);
}

TEST(Synthesize, DatasetDirectoryIsByteIdenticalAcrossRuns) {
  SynthConfig c;
  c.train_samples = 30;
  c.test_samples = 9;
  c.patch_size = 16;
  const auto bundle = synthesize(c);
  const auto d1 = temp_dir("ds1"), d2 = temp_dir("ds2");
  write_dataset(d1, bundle);
  write_dataset(d2, synthesize(c));
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(d1)) {
    if (!e.is_regular_file()) continue;
    ++files;
    EXPECT_EQ(slurp(e.path()), slurp(d2 / fs::relative(e.path(), d1))) << e.path();
  }
  EXPECT_GE(files, 9u);
  const auto back = read_dataset(d1);
  EXPECT_EQ(back.train.labels, bundle.train.labels);
  EXPECT_EQ(back.test.sigmas, bundle.test.sigmas);
  EXPECT_EQ(back.tiers.medians, bundle.tiers.medians);
  EXPECT_THROW(read_dataset(d1 / "nothing"), IoError);
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST(Dataset, SubsetAndBatches) {
  SynthConfig c;
  c.train_samples = 12;
  c.test_samples = 3;
  c.patch_size = 16;
  const auto b = synthesize(c);
  const auto s = b.train.subset({4, 1});
  EXPECT_EQ(s.size(), 2u);
  EXPECT_EQ(s.labels[0], b.train.labels[4]);
  const auto batch = b.train.degraded_batch({1});
  EXPECT_TRUE(std::equal(batch.data().begin(), batch.data().end(), s.degraded.data().begin() + 256));
  EXPECT_THROW(b.train.subset({99}), ContractError);
}
