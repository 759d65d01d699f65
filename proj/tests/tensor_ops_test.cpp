#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "crft/error.hpp"
#include "crft/ops.hpp"
#include "support/oracles.hpp"

using namespace crft;
using crft::testing::gradcheck;
using crft::testing::random_tensor;

namespace {

constexpr double kPrimTol = 1e-4;

// Projects an arbitrary-shape output onto a fixed random direction so every
// output element contributes to the checked gradient.
Tensor project(const Tensor& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Tensor r = random_tensor(y.shape(), rng, -1.0, 1.0, false);
  return sum(mul(y, r));
}

IndexMap make_index(std::vector<std::int64_t> v) {
  return std::make_shared<const std::vector<std::int64_t>>(std::move(v));
}

}  // namespace

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(Tensor(Shape{2, 3}, std::vector<double>(5)), ShapeError);
  Tensor t(Shape{2, 3}, 1.5);
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(shape_str(t.shape()), "[2,3]");
}

TEST(Autodiff, SumOfSquaresGradIsTwoX) {
  std::mt19937_64 rng(1);
  Tensor x = random_tensor({5}, rng);
  backward(sum(mul(x, x)));
  for (std::size_t i = 0; i < 5; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 2.0 * x[i]);
}

TEST(Autodiff, ConstantLossLeavesGradsAbsent) {
  Tensor x(Shape{3}, 2.0);
  Tensor loss = sum(mul(x, x));
  EXPECT_FALSE(loss.requires_grad());
  backward(loss);
  EXPECT_FALSE(x.has_grad());
}

TEST(Autodiff, SecondBackwardThrows) {
  std::mt19937_64 rng(2);
  Tensor x = random_tensor({4}, rng);
  Tensor loss = sum(relu(x));
  backward(loss);
  EXPECT_THROW(backward(loss), GraphError);
}

TEST(Autodiff, NonScalarBackwardThrows) {
  std::mt19937_64 rng(3);
  Tensor x = random_tensor({4}, rng);
  EXPECT_THROW(backward(relu(x)), GraphError);
}

TEST(Autodiff, NoGradGuardRecordsNothing) {
  std::mt19937_64 rng(4);
  Tensor x = random_tensor({4}, rng);
  NoGradGuard ng;
  Tensor y = relu(x);
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(y.is_leaf());
}

TEST(Autodiff, GraphIsTopological) {
  std::mt19937_64 rng(5);
  Tensor x = random_tensor({3}, rng);
  Tensor a = relu(x);
  Tensor b = mul(a, x);
  Tensor c = add(b, a);
  Graph g = Graph::collect(sum(c));
  ASSERT_EQ(g.size(), 4u);
  for (std::size_t i = 1; i < g.size(); ++i) {
    EXPECT_LT(g.entries()[i - 1].node->seq, g.entries()[i].node->seq);
  }
}

TEST(Autodiff, SharedSubexpressionAccumulates) {
  Tensor x(Shape{1}, std::vector<double>{3.0});
  x.set_requires_grad(true);
  Tensor y = mul(x, x);
  backward(sum(add(y, y)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 12.0);
}

TEST(Autodiff, NonFiniteOutputRaises) {
  Tensor a(Shape{1}, std::vector<double>{1.0});
  Tensor b(Shape{1}, std::vector<double>{0.0});
  EXPECT_THROW(div(a, b), NumericError);
}

TEST(Autodiff, ReplayIsBitIdentical) {
  std::mt19937_64 rng(6);
  Tensor x = random_tensor({1, 2, 5, 5}, rng);
  Tensor w = random_tensor({3, 2, 3, 3}, rng);
  Tensor y1 = gelu(conv2d(x, w, Tensor(), 1, 1));
  Tensor y2 = gelu(conv2d(x, w, Tensor(), 1, 1));
  ASSERT_EQ(y1.numel(), y2.numel());
  for (std::size_t i = 0; i < y1.numel(); ++i) EXPECT_EQ(y1[i], y2[i]);
}

TEST(Conv2d, ScalarKernelScales) {
  Tensor x(Shape{1, 1, 2, 2}, 1.0);
  Tensor w(Shape{1, 1, 1, 1}, std::vector<double>{2.0});
  Tensor y = conv2d(x, w, Tensor(), 1, 0);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  for (double v : y.values()) EXPECT_EQ(v, 2.0);
}

TEST(Conv2d, IdentityKernel) {
  std::mt19937_64 rng(7);
  Tensor x = random_tensor({1, 1, 4, 5}, rng);
  Tensor w(Shape{1, 1, 3, 3}, 0.0);
  w.mutable_values()[4] = 1.0;
  Tensor y = conv2d(x, w, Tensor(), 1, 1);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(Conv2d, MatchesNestedLoopOracle) {
  std::mt19937_64 rng(8);
  for (auto [stride, pad] : {std::pair<std::size_t, std::size_t>{1, 0}, {1, 1}, {2, 1}}) {
    Tensor x = random_tensor({1, 2, 5, 5}, rng);
    Tensor w = random_tensor({3, 2, 3, 3}, rng);
    Tensor b = random_tensor({3}, rng);
    Tensor y = conv2d(x, w, b, stride, pad);
    std::size_t ho = 0, wo = 0;
    std::vector<double> xv(x.values().begin(), x.values().end());
    std::vector<double> wv(w.values().begin(), w.values().end());
    std::vector<double> bv(b.values().begin(), b.values().end());
    auto ref = crft::testing::conv2d_oracle(xv, 1, 2, 5, 5, wv, 3, 3, 3, bv, stride, pad, ho, wo);
    ASSERT_EQ(y.shape(), (Shape{1, 3, ho, wo}));
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-10);
  }
}

TEST(Conv2d, ShapeErrorsNameDimension) {
  Tensor x(Shape{1, 2, 4, 4});
  Tensor w(Shape{1, 3, 3, 3});
  try {
    conv2d(x, w, Tensor(), 1, 1);
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("dimension 1"), std::string::npos);
  }
  EXPECT_THROW(conv2d(x, Tensor(Shape{1, 2, 2, 2}), Tensor(), 1, 0), ShapeError);
  EXPECT_THROW(conv2d(x, Tensor(Shape{1, 2, 3, 3}), Tensor(), 0, 0), ShapeError);
  EXPECT_THROW(conv2d(Tensor(Shape{1, 2, 1, 1}), Tensor(Shape{1, 2, 5, 5}), Tensor(), 1, 1),
               ShapeError);
}

TEST(Softmax, SymmetricAndStable) {
  Tensor a = softmax_lastdim(Tensor(Shape{2}, std::vector<double>{0.0, 0.0}));
  EXPECT_DOUBLE_EQ(a[0], 0.5);
  EXPECT_DOUBLE_EQ(a[1], 0.5);
  Tensor b = softmax_lastdim(Tensor(Shape{2}, std::vector<double>{100.0, 0.0}));
  EXPECT_NEAR(b[0], 1.0, 1e-40);
  EXPECT_NEAR(b[1], 0.0, 1e-40);
  Tensor c = softmax_lastdim(Tensor(Shape{2}, std::vector<double>{1000.0, -1000.0}));
  EXPECT_EQ(c[0], 1.0);
}

TEST(Softmax, MatchesExtendedPrecisionOracle) {
  std::mt19937_64 rng(9);
  for (int rep = 0; rep < 20; ++rep) {
    Tensor x = random_tensor({7}, rng, -5.0, 5.0, false);
    Tensor y = softmax_lastdim(x);
    auto ref = crft::testing::softmax_oracle({x.values().begin(), x.values().end()});
    for (std::size_t i = 0; i < 7; ++i) EXPECT_NEAR(y[i], static_cast<double>(ref[i]), 1e-12);
  }
}

TEST(Softmax, RowsAreDistributions) {
  std::mt19937_64 rng(10);
  Tensor y = softmax_lastdim(random_tensor({6, 9}, rng, -30.0, 30.0, false));
  for (std::size_t r = 0; r < 6; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < 9; ++j) {
      const double v = y[r * 9 + j];
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
}

TEST(Softmax, MaskedKeysGetZeroWeight) {
  std::mt19937_64 rng(11);
  Tensor x = random_tensor({2, 3, 4}, rng, -2.0, 2.0, false);
  auto mask = std::make_shared<const std::vector<std::uint8_t>>(
      std::vector<std::uint8_t>{1, 0, 1, 1, 0, 0, 1, 0});
  Tensor y = masked_softmax_lastdim(reshape(x, {6, 4}), mask, 3);
  for (std::size_t r = 0; r < 6; ++r) {
    const std::size_t g = r / 3;
    std::vector<double> kept;
    for (std::size_t j = 0; j < 4; ++j) {
      if ((*mask)[g * 4 + j]) kept.push_back(x[r * 4 + j]);
      else EXPECT_EQ(y[r * 4 + j], 0.0);
    }
    auto ref = crft::testing::softmax_oracle(kept);
    std::size_t t = 0;
    for (std::size_t j = 0; j < 4; ++j) {
      if ((*mask)[g * 4 + j]) EXPECT_NEAR(y[r * 4 + j], static_cast<double>(ref[t++]), 1e-12);
    }
  }
}

TEST(Linear, IdentityAndBias) {
  std::mt19937_64 rng(12);
  Tensor x = random_tensor({2, 3}, rng, -1, 1, false);
  Tensor eye(Shape{3, 3}, std::vector<double>{1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tensor y = linear(x, eye, Tensor(Shape{3}, 0.0));
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(y[i], x[i]);
  Tensor b(Shape{3}, std::vector<double>{0.5, -1, 2});
  Tensor z = linear(Tensor(Shape{2, 3}, 0.0), random_tensor({3, 3}, rng), b);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(z[i], b[i % 3]);
}

TEST(Linear, MatchesHandDotProduct) {
  std::mt19937_64 rng(13);
  Tensor w = random_tensor({4, 3}, rng, -1, 1, false);
  Tensor x = random_tensor({3}, rng, -1, 1, false);
  Tensor b = random_tensor({4}, rng, -1, 1, false);
  Tensor y = linear(x, w, b);
  for (std::size_t o = 0; o < 4; ++o) {
    const double ref = w[o * 3] * x[0] + w[o * 3 + 1] * x[1] + w[o * 3 + 2] * x[2] + b[o];
    EXPECT_NEAR(y[o], ref, 1e-14);
  }
  EXPECT_THROW(linear(Tensor(Shape{2}), w, b), ShapeError);
}

TEST(Gelu, ZeroAtZero) { EXPECT_EQ(gelu(Tensor(Shape{1}, 0.0))[0], 0.0); }

TEST(Gelu, GradientMatchesFiniteDifference) {
  for (double v : {-1.0, 0.5, 2.0}) {
    Tensor x(Shape{1}, std::vector<double>{v});
    x.set_requires_grad(true);
    backward(sum(gelu(x)));
    auto f = [](double z) {
      return 0.5 * z * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (z + 0.044715 * z * z * z)));
    };
    const double h = 1e-5;
    EXPECT_NEAR(x.grad()[0], (f(v + h) - f(v - h)) / (2 * h), 1e-6);
  }
}

TEST(LayerNorm, ConstantSliceIsZero) {
  Tensor y = layer_norm_lastdim(Tensor(Shape{2, 5}, 3.25));
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(MinMax, ConstantRowIsZeroAndRangeIsUnit) {
  Tensor x(Shape{2, 3}, std::vector<double>{2, 2, 2, -1, 3, 1});
  Tensor y = minmax_normalize_rows(x);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(y[j], 0.0);
  EXPECT_DOUBLE_EQ(y[3], 0.0);
  EXPECT_DOUBLE_EQ(y[4], 1.0);
  EXPECT_DOUBLE_EQ(y[5], 0.5);
}

TEST(Permute, MovesAxes) {
  Tensor x(Shape{2, 3}, std::vector<double>{0, 1, 2, 3, 4, 5});
  Tensor y = permute(x, {1, 0});
  EXPECT_EQ(y.shape(), (Shape{3, 2}));
  EXPECT_EQ(std::vector<double>(y.values().begin(), y.values().end()),
            (std::vector<double>{0, 3, 1, 4, 2, 5}));
  EXPECT_THROW(permute(x, {0, 0}), ShapeError);
}

TEST(Resize, ConstantStaysConstant) {
  Tensor y = resize_bilinear(Tensor(Shape{1, 2, 3, 4}, 1.75), 6, 8);
  for (double v : y.values()) EXPECT_DOUBLE_EQ(v, 1.75);
}

// Finite-difference sweep over every primitive with random inputs of at most
// 64 elements.
class PrimitiveGrad : public ::testing::Test {
 protected:
  std::mt19937_64 rng{2024};
  void check(const std::function<Tensor()>& fn, std::vector<Tensor> leaves) {
    auto r = gradcheck(fn, std::move(leaves));
    EXPECT_GT(r.checked, 0u);
    EXPECT_LE(r.max_rel_err, kPrimTol);
  }
};

TEST_F(PrimitiveGrad, Elementwise) {
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({3, 4}, rng, 0.5, 2.0);
  Tensor s = random_tensor({1}, rng);
  check([&] { return project(add(a, b), 1); }, {a, b});
  check([&] { return project(sub(a, b), 2); }, {a, b});
  check([&] { return project(mul(a, b), 3); }, {a, b});
  check([&] { return project(div(a, b), 4); }, {a, b});
  check([&] { return project(scale(a, -1.7), 5); }, {a});
  check([&] { return project(add_scalar(a, 0.3), 6); }, {a});
  check([&] { return project(scale_by(a, s), 7); }, {a, s});
}

TEST_F(PrimitiveGrad, Activations) {
  Tensor a = random_tensor({4, 5}, rng, -2, 2);
  check([&] { return project(relu(a), 8); }, {a});
  check([&] { return project(gelu(a), 9); }, {a});
  check([&] { return project(sigmoid(a), 10); }, {a});
  check([&] { return project(abs(a), 11); }, {a});
}

TEST_F(PrimitiveGrad, Reductions) {
  Tensor a = random_tensor({2, 7}, rng);
  check([&] { return sum(a); }, {a});
  check([&] { return scale(mean(a), 3.0); }, {a});
  check([&] { return l1_norm(a); }, {a});
}

TEST_F(PrimitiveGrad, Layout) {
  Tensor a = random_tensor({2, 3, 4}, rng);
  Tensor b = random_tensor({2, 2, 4}, rng);
  check([&] { return project(reshape(a, {6, 4}), 12); }, {a});
  check([&] { return project(permute(a, {2, 0, 1}), 13); }, {a});
  check([&] { return project(concat({a, b}, 1), 14); }, {a, b});
  Tensor c = random_tensor({2, 3, 2}, rng);
  check([&] { return project(concat({a, c}, 2), 15); }, {a, c});
}

TEST_F(PrimitiveGrad, GatherScatter) {
  Tensor a = random_tensor({10}, rng);
  auto idx = make_index({3, -1, 0, 9, 3, 5, -1, 2});
  check([&] { return project(gather(a, idx, {2, 4}), 16); }, {a});
  Tensor b = random_tensor({8}, rng);
  check([&] { return project(scatter_add(b, idx, {10}), 17); }, {b});
}

TEST_F(PrimitiveGrad, LinearAndMatmul) {
  Tensor x = random_tensor({2, 3, 4}, rng);
  Tensor w = random_tensor({5, 4}, rng);
  Tensor bias = random_tensor({5}, rng);
  check([&] { return project(linear(x, w, bias), 18); }, {x, w, bias});
  check([&] { return project(linear(x, w, Tensor()), 19); }, {x, w});
  for (bool ta : {false, true}) {
    for (bool tb : {false, true}) {
      Tensor a = random_tensor(ta ? Shape{2, 4, 3} : Shape{2, 3, 4}, rng);
      Tensor b = random_tensor(tb ? Shape{2, 5, 4} : Shape{2, 4, 5}, rng);
      check([&] { return project(matmul(a, b, ta, tb), 20); }, {a, b});
      Tensor a2 = random_tensor(ta ? Shape{4, 3} : Shape{3, 4}, rng);
      Tensor b2 = random_tensor(tb ? Shape{5, 4} : Shape{4, 5}, rng);
      check([&] { return project(matmul(a2, b2, ta, tb), 21); }, {a2, b2});
    }
  }
}

TEST_F(PrimitiveGrad, Normalizers) {
  Tensor a = random_tensor({3, 6}, rng, -3, 3);
  check([&] { return project(softmax_lastdim(a), 22); }, {a});
  auto mask = std::make_shared<const std::vector<std::uint8_t>>(
      std::vector<std::uint8_t>{1, 1, 0, 1, 0, 1});
  check([&] { return project(masked_softmax_lastdim(a, mask, 3), 23); }, {a});
  check([&] { return project(layer_norm_lastdim(a), 24); }, {a});
  check([&] { return project(minmax_normalize_rows(a), 25); }, {a});
}

TEST_F(PrimitiveGrad, Convolution) {
  Tensor x = random_tensor({2, 2, 4, 4}, rng);
  Tensor w = random_tensor({2, 2, 3, 3}, rng);
  Tensor b = random_tensor({2}, rng);
  check([&] { return project(conv2d(x, w, b, 1, 1), 26); }, {x, w, b});
  check([&] { return project(conv2d(x, w, b, 2, 1), 27); }, {x, w, b});
  Tensor w1 = random_tensor({3, 2, 1, 1}, rng);
  check([&] { return project(conv2d(x, w1, Tensor(), 1, 0), 28); }, {x, w1});
}

TEST_F(PrimitiveGrad, Sampling) {
  Tensor map = random_tensor({2, 2, 4, 4}, rng);
  Tensor coords = random_tensor({2, 2, 2, 3}, rng, -0.7, 3.6);
  check([&] { return project(bilinear_sample(map, coords), 29); }, {map, coords});
  Tensor shared = random_tensor({1, 3, 3, 4}, rng);
  Tensor c3 = random_tensor({3, 2, 2, 2}, rng, 0.1, 1.9);
  check([&] { return project(bilinear_sample(shared, c3), 30); }, {shared, c3});
  Tensor small = random_tensor({1, 2, 3, 4}, rng);
  check([&] { return project(resize_bilinear(small, 6, 8), 31); }, {small});
  check([&] { return project(resize_bilinear(small, 2, 3), 32); }, {small});
}

TEST_F(PrimitiveGrad, ComposedConvGeluSum) {
  Tensor x = random_tensor({1, 1, 4, 4}, rng);
  Tensor w = random_tensor({1, 1, 3, 3}, rng);
  Tensor b = random_tensor({1}, rng);
  check([&] { return sum(gelu(conv2d(x, w, b, 1, 1))); }, {x, w, b});
}

TEST(BilinearSample, OutOfBoundsFlags) {
  Tensor map(Shape{1, 1, 1, 4}, std::vector<double>{0, 1, 2, 3});
  Tensor coords(Shape{1, 2, 1, 4}, std::vector<double>{1, 2, 3, 4, 0, 0, 0, 0});
  std::vector<std::uint8_t> oob;
  Tensor y = bilinear_sample(map, coords, &oob);
  EXPECT_EQ(std::vector<double>(y.values().begin(), y.values().end()),
            (std::vector<double>{1, 2, 3, 3}));
  EXPECT_EQ(oob, (std::vector<std::uint8_t>{0, 0, 0, 1}));
}
