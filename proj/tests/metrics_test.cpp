#include <gtest/gtest.h>

#include <random>

#include "crft/error.hpp"
#include "crft/metrics.hpp"
#include "support/oracles.hpp"

using namespace crft;
using crft::testing::random_tensor;

TEST(Aepe, UniformThreeFourIsFive) {
  std::vector<double> v(2 * 16);
  for (std::size_t i = 0; i < 16; ++i) {
    v[i] = 3.0;
    v[16 + i] = 4.0;
  }
  EXPECT_EQ(aepe(Tensor(Shape{1, 2, 4, 4}, v), Tensor(Shape{1, 2, 4, 4}), Mask(16, 1)), 5.0);
  EXPECT_EQ(aepe(Tensor(Shape{2, 4, 4}, v), Tensor(Shape{2, 4, 4}), Mask(16, 1)), 5.0);
}

TEST(Aepe, MatchesBruteForceOracle) {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 50; ++t) {
    const std::size_t h = 1 + rng() % 9, w = 1 + rng() % 9;
    Tensor a = random_tensor({2, h, w}, rng, -5, 5, false), b = random_tensor({2, h, w}, rng, -5, 5, false);
    Mask m(h * w);
    for (auto& x : m) x = rng() % 4 != 0;
    m[rng() % m.size()] = 1;
    std::vector<double> av(a.values().begin(), a.values().end()), bv(b.values().begin(), b.values().end());
    EXPECT_NEAR(aepe(a, b, m), crft::testing::aepe_oracle(av, bv, m), 1e-12);
  }
}

TEST(Aepe, Errors) {
  EXPECT_THROW(aepe(Tensor(Shape{2, 2, 2}), Tensor(Shape{2, 2, 2}), Mask(4, 0)), ShapeError);
  EXPECT_THROW(aepe(Tensor(Shape{2, 2, 2}), Tensor(Shape{2, 2, 3}), Mask(4, 1)), ShapeError);
  EXPECT_THROW(aepe(Tensor(Shape{3, 2, 2}), Tensor(Shape{3, 2, 2}), Mask(4, 1)), ShapeError);
}

TEST(Cmr, DefaultGrid) {
  auto t = default_thresholds();
  ASSERT_EQ(t.size(), 50u);
  EXPECT_DOUBLE_EQ(t.front(), 0.1);
  EXPECT_DOUBLE_EQ(t.back(), 5.0);
}

TEST(Cmr, HandExamples) {
  EvalReport r = cmr_curve({0.5, 1.0, 2.0, 4.0}, {0.5, 1.0, 1.5, 5.0});
  EXPECT_EQ(r.cmr, (std::vector<double>{0.0, 25.0, 50.0, 100.0}));
  EXPECT_EQ(r.mean, 1.875);
  EXPECT_THROW(cmr_curve({}, {1.0}), ConfigError);
  EXPECT_THROW(cmr_curve({1.0}, {2.0, 1.0}), ConfigError);
}

TEST(Cmr, MatchesBruteForceAndIsMonotone) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.0, 6.0);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> a(1 + rng() % 30);
    for (double& x : a) x = u(rng);
    if (t % 5 == 0) a[0] = 1.0;  // exactly on a threshold
    EvalReport r = cmr_curve(a, default_thresholds());
    for (std::size_t i = 0; i < r.thresholds.size(); ++i) {
      std::size_t below = 0;
      for (double x : a) below += x < r.thresholds[i];
      EXPECT_DOUBLE_EQ(r.cmr[i], 100.0 * below / a.size());
      if (i) EXPECT_GE(r.cmr[i], r.cmr[i - 1]);
    }
  }
}

TEST(Cmr, JsonRoundTripAndCsv) {
  EvalReport r = cmr_curve({0.25, 3.0}, default_thresholds());
  r.label = "x";
  r.per_sample_coarse = {1.0, 2.0};
  r.mean_coarse = 1.5;
  EvalReport back = EvalReport::from_json(r.to_json());
  EXPECT_EQ(back.per_sample, r.per_sample);
  EXPECT_EQ(back.cmr, r.cmr);
  EXPECT_EQ(back.mean_coarse, 1.5);
  EXPECT_EQ(back.label, "x");
  const std::string csv = r.cmr_csv();
  EXPECT_EQ(csv.rfind("threshold,cmr\n", 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 51);
  EXPECT_THROW(EvalReport::from_json(json{{"mean_aepe", "no"}}), ConfigError);
}

TEST(Cmr, MergeRequiresMatchingGrids) {
  EvalReport a = cmr_curve({1.0}, default_thresholds()), b = cmr_curve({2.0}, default_thresholds());
  const std::string csv = merge_cmr_csv({a, b}, {"a", "b"});
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "threshold,a,b");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 51);
  EvalReport c = cmr_curve({1.0}, {1.0, 2.0});
  EXPECT_THROW(merge_cmr_csv({a, c}, {"a", "c"}), ConfigError);
}

TEST(Checkerboard, TileTwoOnFourByFour) {
  std::vector<double> av(16, 0.0), bv(16, 1.0);
  Tensor f = checkerboard_fuse(Tensor(Shape{4, 4}, av), Tensor(Shape{1, 1, 4, 4}, bv), 2);
  const std::vector<double> expect{0, 0, 1, 1, 0, 0, 1, 1, 1, 1, 0, 0, 1, 1, 0, 0};
  EXPECT_EQ(std::vector<double>(f.values().begin(), f.values().end()), expect);
}

TEST(Checkerboard, FullHeightTileGivesStripes) {
  Tensor a(Shape{4, 6}, 0.25), b(Shape{4, 6}, 0.75);
  // tile == H: one row of tiles, so vertical stripes
  Tensor stripes = checkerboard_fuse(a, b, 4);
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 6; ++x) EXPECT_EQ(stripes[y * 6 + x], x < 4 ? 0.25 : 0.75);
  Tensor s = checkerboard_fuse(a, b, 3);
  EXPECT_EQ(s[0], 0.25);
  EXPECT_EQ(s[3], 0.75);
  EXPECT_THROW(checkerboard_fuse(a, b, 0), ConfigError);
  EXPECT_THROW(checkerboard_fuse(a, b, 5), ConfigError);
  EXPECT_THROW(checkerboard_fuse(a, Tensor(Shape{4, 5}), 2), ShapeError);
}

TEST(FlowMagnitude, Hypot) {
  Tensor f(Shape{1, 2, 1, 2}, std::vector<double>{3, 0, 4, -2});
  EXPECT_EQ(flow_magnitude(f), (std::vector<double>{5.0, 2.0}));
}
