#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "atlasbench/viz.hpp"

namespace atlasbench::viz {
namespace {

VizConfig still(std::size_t steps) {
  VizConfig c;
  c.steps = steps;
  c.jitter_px = 0;
  c.scale_min = c.scale_max = 1.0;
  c.rotation = 0;
  return c;
}

std::vector<double> one_hot(std::size_t n, std::size_t i) {
  std::vector<double> v(n, 0.0);
  v[i] = 1.0;
  return v;
}

double cosine(std::span<const float> a, std::span<const double> b) {
  double d = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    d += a[i] * b[i];
    na += double(a[i]) * a[i];
    nb += b[i] * b[i];
  }
  return d / std::sqrt(na * nb);
}

TEST(Objective, WorkedValues) {
  const std::vector<double> y{1, 0};
  // Aligned: h.y = 2, cos = 1, angle 0 (clamped to 0.1).
  const std::vector<double> h{2, 0};
  EXPECT_DOUBLE_EQ(objective(h, y, ObjectiveMode::kCosinePower), 2.0);
  EXPECT_NEAR(objective(h, y, ObjectiveMode::kAnglePower), 2.0 * 1e-4, 1e-15);
  // 45 degrees: h.y = 1, cos^4 = 1/4.
  const std::vector<double> h45{1, 1};
  EXPECT_NEAR(objective(h45, y, ObjectiveMode::kCosinePower), 0.25, 1e-12);
  EXPECT_NEAR(objective(h45, y, ObjectiveMode::kAnglePower), std::pow(std::numbers::pi / 4, 4), 1e-12);
  // Orthogonal: cosine clamped to 0.1 but h.y = 0.
  const std::vector<double> h90{0, 3};
  EXPECT_DOUBLE_EQ(objective(h90, y, ObjectiveMode::kCosinePower), 0.0);
  // Zero activation.
  const std::vector<double> zero{0, 0};
  EXPECT_DOUBLE_EQ(objective(zero, y, ObjectiveMode::kCosinePower), 0.0);
  EXPECT_DOUBLE_EQ(objective(zero, y, ObjectiveMode::kAnglePower), 0.0);
}

TEST(Objective, RejectsMismatchedWidthAndZeroTarget) {
  const std::vector<double> h{1, 2, 3}, y{1, 0}, z{0, 0, 0};
  EXPECT_THROW(objective(h, y, ObjectiveMode::kCosinePower), DimensionError);
  EXPECT_THROW(objective(h, z, ObjectiveMode::kCosinePower), ContractError);
}

TEST(Objective, ScaleInvariantInTarget) {
  Rng rng(3);
  std::vector<double> h(12), y(12), y2(12);
  for (auto& v : h) v = rng.normal();
  for (std::size_t i = 0; i < y.size(); ++i) {
    y[i] = h[i] + 0.3 * rng.normal();
    y2[i] = 2 * y[i];
  }
  for (auto mode : {ObjectiveMode::kCosinePower, ObjectiveMode::kAnglePower}) {
    EXPECT_NEAR(objective(h, y2, mode), 2 * objective(h, y, mode), 1e-10);
  }
}

TEST(Objective, GradientMatchesFiniteDifferences) {
  Rng rng(11);
  for (auto mode : {ObjectiveMode::kCosinePower, ObjectiveMode::kAnglePower}) {
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<double> h(9), y(9);
      for (auto& v : y) v = rng.normal();
      // Mix so that some trials sit near the target and some far away.
      const double mix = rng.uniform(0.0, 1.0);
      for (std::size_t i = 0; i < h.size(); ++i) h[i] = mix * y[i] + (1 - mix) * rng.normal();
      const auto g = objective_with_gradient(h, y, mode);
      for (std::size_t i = 0; i < h.size(); ++i) {
        const double eps = 1e-6;
        auto hp = h, hm = h;
        hp[i] += eps;
        hm[i] -= eps;
        const double fd = (objective(hp, y, mode) - objective(hm, y, mode)) / (2 * eps);
        EXPECT_NEAR(g.gradient[i], fd, 1e-5 * (1 + std::abs(fd))) << "trial " << trial << " i " << i;
      }
    }
  }
}

TEST(Config, JsonRoundTripAndHash) {
  VizConfig c;
  c.steps = 17;
  c.mode = ObjectiveMode::kAnglePower;
  c.parameterization = Parameterization::kFourier;
  c.seed = 99;
  const auto back = VizConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  EXPECT_EQ(back.hash(), c.hash());
  VizConfig d = c;
  d.learning_rate = 0.01;
  EXPECT_NE(d.hash(), c.hash());
  EXPECT_EQ(parse_mode("angle-power"), ObjectiveMode::kAnglePower);
  EXPECT_EQ(parse_mode("paper-literal"), ObjectiveMode::kAnglePower);
  EXPECT_THROW(parse_mode("cosine"), ContractError);
  VizConfig bad;
  bad.init_high = 1.5;
  EXPECT_THROW(bad.validate(), ContractError);
}

TEST(Transform, DisabledRangesGiveIdentity) {
  Rng rng(5);
  const auto c = still(1);
  EXPECT_TRUE(c.transforms_disabled());
  for (int i = 0; i < 10; ++i) EXPECT_TRUE(sample_transform(c, rng).is_identity());
}

TEST(Transform, JitterOnlyIsIntegerTranslationWithinRange) {
  auto c = still(1);
  c.jitter_px = 2;
  Rng rng(7);
  for (int i = 0; i < 200; ++i) {
    const auto t = sample_transform(c, rng);
    EXPECT_DOUBLE_EQ(t.m[0], 1.0);
    EXPECT_DOUBLE_EQ(t.m[4], 1.0);
    EXPECT_DOUBLE_EQ(t.m[2], std::round(t.m[2]));
    EXPECT_LE(std::abs(t.m[2]), 3.0);
    EXPECT_LE(std::abs(t.m[5]), 3.0);
  }
}

TEST(Transform, ScaleAndRotationStayInRange) {
  VizConfig c;
  Rng rng(8);
  for (int i = 0; i < 200; ++i) {
    const auto t = sample_transform(c, rng);
    // Linear part is (1/s) R(-r): determinant 1/s^2.
    const double det = t.m[0] * t.m[4] - t.m[1] * t.m[3];
    const double s = 1.0 / std::sqrt(det);
    EXPECT_GE(s, c.scale_min - 1e-12);
    EXPECT_LE(s, c.scale_max + 1e-12);
    const double r = std::atan2(t.m[3], t.m[0]);
    EXPECT_LE(std::abs(r), c.rotation + 1e-12);
  }
}

class VizModel : public ::testing::Test {
 protected:
  model::ModelParams mlp = model::build_model(model::ModelSpec::mlp(1, 8, 8, {24, 16}, 4), 21);
};

TEST_F(VizModel, ZeroStepsReturnsInitWithinRange) {
  auto c = still(0);
  const VizTarget t{one_hot(64, 3), "input", TargetKind::kNeuron, 3};
  const auto r = optimize_input(mlp, t, c);
  ASSERT_EQ(r.image.shape(), (Shape{1, 8, 8}));
  EXPECT_TRUE(r.trace.empty());
  for (float v : r.image.storage()) {
    EXPECT_GE(v, c.init_low);
    EXPECT_LE(v, c.init_high);
  }
  EXPECT_DOUBLE_EQ(r.initial_alignment, r.final_alignment);
}

// Identity extractor: the optimum of the cosine objective over [0,1]^n for a
// one-hot target is the basis image.
TEST_F(VizModel, IdentityExtractorRecoversBasisImage) {
  auto c = still(300);
  c.init_low = 0.0;
  c.init_high = 0.1;
  for (std::size_t idx : {0u, 27u, 63u}) {
    const VizTarget t{one_hot(64, idx), "input", TargetKind::kNeuron, idx};
    const auto r = optimize_input(mlp, t, c);
    EXPECT_GE(cosine(r.image.storage(), t.direction), 0.99) << idx;
    EXPECT_GE(r.final_alignment, 0.99);
  }
}

TEST(VizIdentity, FullSizeBasisImages) {
  const auto m = model::build_model(model::ModelSpec::mlp(1, 28, 28, {8}, 10), 2);
  auto c = still(300);
  c.init_low = 0.0;
  c.init_high = 0.1;
  Rng rng(4);
  for (int k = 0; k < 3; ++k) {
    const std::size_t idx = rng.below(784);
    const VizTarget t{one_hot(784, idx), "input", TargetKind::kNeuron, idx};
    const auto r = optimize_input(m, t, c);
    EXPECT_GE(cosine(r.image.storage(), t.direction), 0.99) << idx;
  }
}

// Mid-gray init: the cosine with a one-hot starts below the 0.1 floor, where
// only the target pixel receives gradient, and the [0,1] box caps it there.
TEST(VizIdentity, DefaultInitStallsBelowCosineFloor) {
  const auto m = model::build_model(model::ModelSpec::mlp(1, 28, 28, {8}, 10), 2);
  auto c = still(100);
  const VizTarget t{one_hot(784, 400), "input", TargetKind::kNeuron, 400};
  const auto r = optimize_input(m, t, c);
  EXPECT_LT(r.initial_alignment, 0.1);
  EXPECT_LT(r.final_alignment, 0.1);
  EXPECT_NEAR(r.image[400], 1.0f, 1e-6);
}

// For a non-one-hot target the box-constrained optimum saturates, so the
// reference is the pixel-space optimum of the same problem.
TEST_F(VizModel, FourierReachesPixelOptimum) {
  auto c = still(1500);
  c.init_low = 0.0;
  c.init_high = 0.1;
  std::vector<double> bump(64);
  for (std::size_t i = 0; i < 64; ++i) bump[i] = std::exp(-(std::pow(i / 8 - 3.0, 2) + std::pow(i % 8 - 4.0, 2)) / 4.0);
  const VizTarget t{bump, "input", TargetKind::kNeuron, 20};
  const auto pixel = optimize_input(mlp, t, c);
  c.parameterization = Parameterization::kFourier;
  const auto fourier = optimize_input(mlp, t, c);
  EXPECT_NEAR(fourier.trace.back(), pixel.trace.back(), 0.02 * pixel.trace.back());
  EXPECT_GT(fourier.trace.back(), 2 * fourier.trace.front());
  for (float v : fourier.image.storage()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST_F(VizModel, FourierInitReproducesPixelInit) {
  auto c = still(0);
  const VizTarget t{one_hot(64, 1), "input", TargetKind::kNeuron, 1};
  const auto a = optimize_input(mlp, t, c);
  c.parameterization = Parameterization::kFourier;
  const auto b = optimize_input(mlp, t, c);
  for (std::size_t i = 0; i < a.image.numel(); ++i) EXPECT_NEAR(a.image[i], b.image[i], 1e-5);
}

TEST_F(VizModel, HiddenLayerObjectiveRises) {
  VizConfig c;
  c.steps = 150;
  Rng rng(9);
  std::vector<double> y(16);
  for (auto& v : y) v = std::abs(rng.normal());
  const VizTarget t{y, "hidden2", TargetKind::kAtlasCell, 5};
  const auto r = optimize_input(mlp, t, c);
  ASSERT_EQ(r.trace.size(), 150u);
  double head = 0, tail = 0;
  for (std::size_t i = 0; i < 10; ++i) {
    head += r.trace[i];
    tail += r.trace[140 + i];
  }
  EXPECT_GT(tail, head);
}

TEST_F(VizModel, DeterministicAndParamsUntouched) {
  VizConfig c;
  c.steps = 20;
  const VizTarget t{one_hot(24, 2), "hidden1", TargetKind::kNeuron, 2};
  const auto before = model::params_checksum(mlp);
  const auto a = optimize_input(mlp, t, c);
  const auto b = optimize_input(mlp, t, c);
  EXPECT_EQ(a.image.storage(), b.image.storage());
  EXPECT_EQ(a.trace, b.trace);
  EXPECT_EQ(model::params_checksum(mlp), before);
  c.seed = 1;
  EXPECT_NE(optimize_input(mlp, t, c).image.storage(), a.image.storage());
}

TEST_F(VizModel, TargetScaleDoublesTrace) {
  auto c = still(10);
  Rng rng(2);
  std::vector<double> y(16), y2(16);
  for (std::size_t i = 0; i < 16; ++i) {
    y[i] = rng.normal();
    y2[i] = 2 * y[i];
  }
  const auto a = optimize_input(mlp, {y, "hidden2", TargetKind::kNeuron, 0}, c);
  const auto b = optimize_input(mlp, {y2, "hidden2", TargetKind::kNeuron, 0}, c);
  ASSERT_EQ(a.trace.size(), b.trace.size());
  // Adam is invariant to a constant gradient scale, so the paths coincide.
  for (std::size_t i = 0; i < a.trace.size(); ++i) EXPECT_NEAR(b.trace[i], 2 * a.trace[i], 1e-4 * (1 + std::abs(a.trace[i])));
}

// Minimizing (h.y) angle^4 favors h.y -> 0 over a small angle: the image goes dark.
TEST_F(VizModel, AnglePowerCollapsesActivation) {
  auto c = still(200);
  c.mode = ObjectiveMode::kAnglePower;
  c.init_low = 0.0;
  c.init_high = 0.1;
  const VizTarget t{one_hot(64, 9), "input", TargetKind::kNeuron, 9};
  const auto r = optimize_input(mlp, t, c);
  EXPECT_LT(r.trace.back(), r.trace.front());
  EXPECT_LT(r.image[9], 1e-3f);
}

TEST_F(VizModel, UnknownLayerAndWrongWidthRejected) {
  const auto c = still(1);
  EXPECT_THROW(optimize_input(mlp, {one_hot(24, 0), "conv9", TargetKind::kNeuron, 0}, c), ContractError);
  EXPECT_THROW(optimize_input(mlp, {one_hot(5, 0), "hidden1", TargetKind::kNeuron, 0}, c), DimensionError);
  EXPECT_THROW(optimize_input(mlp, {std::vector<double>(24, 0.0), "hidden1", TargetKind::kNeuron, 0}, c),
               ContractError);
}

TEST(VizCnn, SpatialTapUsesMeanOverPositions) {
  const auto m = model::build_model(model::ModelSpec::cnn(1, 8, 8, {4, 6}, 10, 3), 5);
  VizConfig c;
  c.steps = 30;
  const VizTarget t{one_hot(6, 1), "conv2b", TargetKind::kNeuron, 1};
  const auto r = optimize_input(m, t, c);
  EXPECT_EQ(r.trace.size(), 30u);
  EXPECT_TRUE(r.image.all_finite());
}

TEST_F(VizModel, RenderTargetsKeepsOrderAndFailures) {
  auto c = still(15);
  std::vector<VizTarget> ts;
  for (std::size_t i = 0; i < 4; ++i) ts.push_back({one_hot(16, i), "hidden2", TargetKind::kAtlasCell, 10 + i});
  ts[2].direction.assign(16, 0.0);
  const auto out = render_targets(mlp, ts, c);
  ASSERT_EQ(out.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(out[i].index, 10 + i);
  EXPECT_FALSE(out[2].result.has_value());
  EXPECT_NE(out[2].error.find("target 12"), std::string::npos);
  // Each target depends only on its own seed, not on the batch it ran in.
  const auto solo = optimize_input(mlp, ts[3], c);
  ASSERT_TRUE(out[3].result.has_value());
  EXPECT_EQ(out[3].result->image.storage(), solo.image.storage());
}

TEST(VizTargets, AtlasTargetsFollowMask) {
  atlas::AtlasGrid grid;
  grid.g = 2;
  grid.layer = "hidden1";
  grid.mask = {1, 0, 1, 1};
  grid.directions = Tensor<double>({4, 3});
  for (std::size_t i = 0; i < 12; ++i) grid.directions[i] = double(i);
  const auto ts = atlas_targets(grid);
  ASSERT_EQ(ts.size(), 3u);
  EXPECT_EQ(ts[1].index, 2u);
  EXPECT_EQ(ts[1].direction, (std::vector<double>{6, 7, 8}));
  EXPECT_EQ(ts[1].layer, "hidden1");

  const auto ns = neuron_targets(atlas::neuron_directions(5, 2, 3), "logits");
  ASSERT_EQ(ns.size(), 2u);
  EXPECT_EQ(ns[0].kind, TargetKind::kNeuron);
  EXPECT_DOUBLE_EQ(ns[0].direction[ns[0].index], 1.0);
}

}  // namespace
}  // namespace atlasbench::viz
