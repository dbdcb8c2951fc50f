#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "nmroute/classifier.hpp"
#include "nmroute/errors.hpp"
#include "nmroute/gradcheck.hpp"
#include "nmroute/losses.hpp"
#include "nmroute/restoration.hpp"

using namespace nmr;

namespace {

RestorationConfig small_net(const std::string& branches = "1&2&4", bool shared_bn = false) {
  RestorationConfig c;
  c.depth = 5;
  c.width = 16;
  c.channels = 1;
  c.shared_bn = shared_bn;
  c.branches = parse_branch_set(branches, shared_bn);
  return c;
}

}  // namespace

TEST(Classifier, FlopsLayerByLayerOn64x64) {
  ClassifierConfig c;  // 1 -> 8 -> 16 -> 32 -> 32, k = 3, stride 2, pad 1
  // Spatial extents 32, 16, 8, 4.
  const double b1 = 2.0 * 9 * 1 * 8 * 32 * 32;
  const double b2 = 2.0 * 9 * 8 * 16 * 16 * 16;
  const double b3 = 2.0 * 9 * 16 * 32 * 8 * 8;
  const double b4 = 2.0 * 9 * 32 * 32 * 4 * 4;
  const double pool = 32.0 * 4 * 4;
  const double head = 2.0 * 32 * 3;
  EXPECT_EQ(classifier_flops(c, 64, 64), b1 + b2 + b3 + b4 + pool + head);
  EXPECT_EQ(classifier_flops(c, 64, 64), 1622720.0);
}

TEST(Classifier, ForwardShapesAndSimplex) {
  std::mt19937_64 rng(1);
  Classifier<float> cls(ClassifierConfig{}, rng);
  auto y = Tensor<float>::uniform({4, 1, 32, 32}, rng, 0, 1);
  auto out = cls.forward(y, ops::Mode::train);
  EXPECT_EQ(out.logits.shape(), (Shape{4, 3}));
  EXPECT_TRUE(on_simplex(out.probs, 1e-5));
  EXPECT_THROW(cls.forward(Tensor<float>({1, 1, 8, 8}), ops::Mode::eval), DimensionError);
  EXPECT_THROW(cls.forward(Tensor<float>({1, 3, 32, 32}), ops::Mode::eval), DimensionError);
}

TEST(Classifier, ArgmaxTiesGoToCheaperClass) {
  const std::vector<float> p{0.4f, 0.4f, 0.2f};
  EXPECT_EQ(predict_class<float>(p), 0u);
  const std::vector<float> q{0.1f, 0.45f, 0.45f};
  EXPECT_EQ(predict_class<float>(q), 1u);
}

TEST(Classifier, FreezingStopsGradients) {
  std::mt19937_64 rng(2);
  Classifier<float> cls(ClassifierConfig{}, rng);
  cls.set_frozen(true);
  for (const auto& p : cls.parameters()) EXPECT_FALSE(p.tensor.requires_grad());
  cls.set_frozen(false);
  for (const auto& p : cls.parameters()) EXPECT_TRUE(p.tensor.requires_grad());
}

TEST(BranchSet, ParsesCostsAndBanks) {
  const auto b = parse_branch_set("1&2&4");
  ASSERT_EQ(b.size(), 3u);
  EXPECT_EQ(b[0].pattern, NmPattern(1, 4));
  EXPECT_DOUBLE_EQ(b[0].cost, 0.25);
  EXPECT_DOUBLE_EQ(b[2].cost, 1.0);
  EXPECT_EQ(b[1].bn_bank, 1u);
  const auto s = parse_branch_set("2:8&8:8", true);
  EXPECT_EQ(s[0].pattern, NmPattern(2, 8));
  EXPECT_EQ(s[1].bn_bank, 0u);
  EXPECT_EQ(branch_set_str(b), "1&2&4");
  EXPECT_THROW(parse_branch_set(""), ContractError);
  EXPECT_THROW(parse_branch_set("1&&4"), ContractError);
  EXPECT_THROW(parse_branch_set("x"), ContractError);
  RestorationConfig c;
  c.branches = parse_branch_set("4&1");
  EXPECT_THROW(c.validate(), ContractError);
}

TEST(Restoration, FlopsLayerByLayer) {
  std::mt19937_64 rng(3);
  RestorationNet<float> net(small_net(), rng);
  const double hw = 32.0 * 32.0;
  const double first = 2.0 * 9 * 16 * hw, last = 2.0 * 144 * 1 * hw;
  const double mid_dense = 2.0 * 144 * 16 * hw;
  EXPECT_EQ(net.dense_flops(32, 32), first + 3 * mid_dense + last);
  EXPECT_EQ(net.branch_flops(0, 32, 32), first + 3 * (mid_dense / 4) + last);
  EXPECT_EQ(net.branch_flops(1, 32, 32), first + 3 * (mid_dense / 2) + last);
  EXPECT_EQ(net.branch_flops(2, 32, 32), net.dense_flops(32, 32));
  EXPECT_EQ(net.layer_flops(2, 0, 32, 32), mid_dense / 4);
}

TEST(Restoration, ParameterCountsAndNames) {
  std::mt19937_64 rng(4);
  RestorationNet<float> net(small_net(), rng);
  const std::size_t convs = (9 * 16 + 16) + 3 * (144 * 16) + (144 + 1);
  const std::size_t bn_per_bank = 3 * 2 * 16;
  EXPECT_EQ(net.parameter_count(), convs + 3 * bn_per_bank);
  std::set<std::string> names;
  for (const auto& p : net.parameters()) EXPECT_TRUE(names.insert(p.name).second) << p.name;
  RestorationNet<float> shared(small_net("1&2&4", true), rng);
  EXPECT_EQ(shared.parameter_count(), convs + bn_per_bank);
}

TEST(Restoration, BranchMasksFollowPatterns) {
  std::mt19937_64 rng(5);
  RestorationNet<float> net(small_net(), rng);
  for (std::size_t b = 0; b < 3; ++b) {
    const auto masks = net.branch_masks(b);
    ASSERT_EQ(masks.size(), 5u);
    EXPECT_FALSE(masks.front().has_value());
    EXPECT_FALSE(masks.back().has_value());
    for (std::size_t l = 1; l + 1 < 5; ++l) {
      if (b == 2) {
        EXPECT_FALSE(masks[l].has_value());
      } else {
        ASSERT_TRUE(masks[l].has_value());
        EXPECT_TRUE(masks[l]->satisfies_pattern());
        EXPECT_EQ(masks[l]->pattern, net.config().branches[b].pattern);
      }
    }
  }
}

TEST(Restoration, CompressedPathMatchesMaskedDense) {
  std::mt19937_64 rng(6);
  auto cfg = small_net("1&2&4");
  cfg.mask_first_last = true;
  RestorationNet<float> net(cfg, rng);
  // Populate running statistics so eval-mode BN is not the identity.
  for (std::size_t b = 0; b < 3; ++b) net.forward_branch(Tensor<float>::uniform({4, 1, 16, 16}, rng, 0, 1), b, ops::Mode::train);
  auto y = Tensor<float>::uniform({3, 1, 20, 24}, rng, 0, 1);
  for (std::size_t b = 0; b < 3; ++b) {
    const auto a = net.forward_branch(y, b, ops::Mode::eval, KernelPath::masked_dense);
    const auto c = net.forward_branch(y, b, ops::Mode::eval, KernelPath::compressed);
    ASSERT_EQ(a.shape(), y.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) ASSERT_NEAR(a.data()[i], c.data()[i], 1e-4);
  }
  EXPECT_THROW(net.forward_branch(y, 0, ops::Mode::train, KernelPath::compressed), ContractError);
  EXPECT_THROW(net.forward_branch(y, 3, ops::Mode::eval), ContractError);
  EXPECT_THROW(net.forward_branch(Tensor<float>({1, 3, 8, 8}), 0, ops::Mode::eval), DimensionError);
}

TEST(Restoration, EachBranchUpdatesOnlyItsOwnBank) {
  std::mt19937_64 rng(7);
  RestorationNet<float> net(small_net(), rng);
  auto y = Tensor<float>::uniform({4, 1, 16, 16}, rng, 0, 1);
  auto snapshot = [&] {
    std::vector<std::vector<float>> s;
    for (std::size_t k = 0; k < 3; ++k)
      for (std::size_t l = 0; l < net.bn_layer_count(); ++l) s.push_back(net.bank(k, l).running_mean);
    return s;
  };
  const auto before = snapshot();
  net.forward_branch(y, 1, ops::Mode::train);
  const auto after = snapshot();
  for (std::size_t l = 0; l < net.bn_layer_count(); ++l) {
    EXPECT_EQ(after[0 * 3 + l], before[0 * 3 + l]);
    EXPECT_NE(after[1 * 3 + l], before[1 * 3 + l]);
    EXPECT_EQ(after[2 * 3 + l], before[2 * 3 + l]);
  }
  // Eval forwards never touch statistics.
  net.forward_branch(y, 0, ops::Mode::eval);
  EXPECT_EQ(snapshot(), after);
}

TEST(Restoration, ResidualOutputSubtractsPrediction) {
  std::mt19937_64 rng(8);
  auto cfg = small_net("4");
  RestorationNet<double> net(cfg, rng);
  // Zero last layer: predicted residual is zero, output equals input.
  for (const auto& p : net.parameters()) {
    if (p.name.find("conv4") != std::string::npos) {
      for (auto& v : p.tensor.node()->data) v = 0;
    }
  }
  auto y = Tensor<double>::uniform({2, 1, 8, 8}, rng, 0, 1);
  const auto out = net.forward_branch(y, 0, ops::Mode::eval);
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_DOUBLE_EQ(out.data()[i], y.data()[i]);
}

// Loss values.

TEST(Losses, EntropyReferenceValues) {
  Tensor<double> uniform({1, 3}, std::vector<double>{1.0 / 3, 1.0 / 3, 1.0 / 3});
  EXPECT_NEAR(entropy_loss(uniform).item(), std::log(3.0), 1e-9);
  Tensor<double> one_hot({3}, std::vector<double>{0, 1, 0});
  EXPECT_EQ(entropy_loss(one_hot).item(), 0.0);
  Tensor<double> off({1, 3}, std::vector<double>{0.5, 0.5, 0.5});
  EXPECT_THROW(entropy_loss(off), ContractError);
}

TEST(Losses, CostLossIsExpectedCostOnRandomSimplexPoints) {
  std::mt19937_64 rng(9);
  std::exponential_distribution<double> e(1.0);
  const std::vector<double> costs{0.25, 0.5, 1.0};
  for (int i = 0; i < 1000; ++i) {
    double a = e(rng), b = e(rng), c = e(rng);
    const double s = a + b + c;
    Tensor<double> p({1, 3}, std::vector<double>{a / s, b / s, c / s});
    const double expected = p.data()[0] * costs[0] + p.data()[1] * costs[1] + p.data()[2] * costs[2];
    EXPECT_DOUBLE_EQ(cost_loss(p, costs).item(), expected);
  }
  EXPECT_THROW(cost_loss(Tensor<double>({1, 3}, 1.0 / 3), {1.0, 2.0}), DimensionError);
}

TEST(Losses, WeightedL1WorkedExample) {
  Tensor<double> p({1, 3}, std::vector<double>{0.2, 0.3, 0.5});
  Tensor<double> target({1, 1, 2, 2}, 0.0);
  // Per-branch mean absolute errors 1.0, 0.5 and 0.1.
  std::vector<Tensor<double>> outs{Tensor<double>({1, 1, 2, 2}, std::vector<double>{1, -1, 1, -1}),
                                   Tensor<double>({1, 1, 2, 2}, 0.5),
                                   Tensor<double>({1, 1, 2, 2}, std::vector<double>{0.1, 0.1, -0.1, 0.1})};
  EXPECT_NEAR(weighted_l1(p, outs, target).item(), 0.40, 1e-9);
}

TEST(Losses, FinalLossCombinesWithWeights) {
  Tensor<double> lw({}, 2.0), le({}, 3.0), lc({}, 5.0);
  LossWeights w{1.0, 0.05, 0.1};
  EXPECT_NEAR(final_loss(lw, le, lc, w).item(), 2.0 + 0.15 + 0.5, 1e-12);
  EXPECT_THROW((LossWeights{0.0, 0.1, 0.1}.validate()), ContractError);
  EXPECT_THROW((LossWeights{1.0, -0.1, 0.1}.validate()), ContractError);
}

TEST(Losses, ClassificationLossMatchesLogSumExp) {
  Tensor<double> z({1, 3}, std::vector<double>{0.0, 1.0, 2.0});
  const double lse = std::log(1.0 + std::exp(1.0) + std::exp(2.0));
  EXPECT_NEAR(classification_loss(z, {0}).item(), lse, 1e-12);
}

class LossGradcheck : public ::testing::TestWithParam<int> {};

TEST_P(LossGradcheck, AllLossesIncludingPathIntoProbabilities) {
  const auto seed = static_cast<std::uint64_t>(GetParam());
  std::mt19937_64 rng(seed);
  using F = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;
  const std::size_t B = 3, L = 3;
  auto logits = Tensor<double>::uniform({B, L}, rng, -2, 2);
  logits.set_requires_grad(true);
  auto target = Tensor<double>::uniform({B, 1, 4, 4}, rng, 0, 1);
  std::vector<Tensor<double>> outs;
  for (std::size_t i = 0; i < L; ++i) {
    outs.push_back(Tensor<double>::uniform({B, 1, 4, 4}, rng, 0, 1));
    outs.back().set_requires_grad(true);
  }
  const std::vector<double> costs{0.25, 0.5, 1.0};
  const LossWeights w{1.0, 0.05, 0.1};
  const double h = 1e-6, tol = 1e-4;

  EXPECT_LT(gradcheck<double>(F([&](const auto& v) { return entropy_loss(ops::softmax(v[0])); }), {logits}, h), tol);
  EXPECT_LT(gradcheck<double>(F([&](const auto& v) { return cost_loss(ops::softmax(v[0]), costs); }), {logits}, h), tol);
  EXPECT_LT(gradcheck<double>(F([&](const auto& v) {
                                return weighted_l1(ops::softmax(v[0]), {v[1], v[2], v[3]}, target);
                              }),
                              {logits, outs[0], outs[1], outs[2]}, h),
            tol);
  EXPECT_LT(gradcheck<double>(F([&](const auto& v) {
                                const auto p = ops::softmax(v[0]);
                                return final_loss(weighted_l1(p, {v[1], v[2], v[3]}, target), entropy_loss(p),
                                                  cost_loss(p, costs), w);
                              }),
                              {logits, outs[0], outs[1], outs[2]}, h),
            tol);
  EXPECT_LT(gradcheck<double>(F([&](const auto& v) { return classification_loss(v[0], {2, 0, 1}); }), {logits}, h), tol);
}

INSTANTIATE_TEST_SUITE_P(Seeds, LossGradcheck, ::testing::Range(1, 21));
