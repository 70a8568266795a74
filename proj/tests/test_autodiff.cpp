#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "support.hpp"

using namespace pit;
using pit::test::Gen;
using pit::test::naive_conv;

namespace {

std::vector<double> vals(const Var& v) { return {v.value().begin(), v.value().end()}; }

}  // namespace

TEST(Elementwise, Hadamard) {
  Tape t;
  Var y = mul(t.constant(Tensor::vector({1, 2, 3})), t.constant(Tensor::vector({4, 5, 6})));
  EXPECT_EQ(vals(y), (std::vector<double>{4, 10, 18}));
}

TEST(Elementwise, SumOfAbs) {
  Tape t;
  EXPECT_EQ(sum(abs(t.constant(Tensor::vector({-1, 2, -3})))).item(), 6.0);
}

TEST(Elementwise, ShapeMismatchNamesBothShapes) {
  Tape t;
  try {
    add(t.constant(Tensor({2, 3})), t.constant(Tensor({3, 2})));
    FAIL();
  } catch (const Error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos);
    EXPECT_NE(msg.find("[3x2]"), std::string::npos);
  }
}

TEST(Elementwise, NonFiniteOutputRaises) {
  Tape t;
  Var big = t.constant(Tensor::vector({1e300}));
  EXPECT_THROW(mul(big, big), NonFiniteError);
}

TEST(Reductions, ColumnProduct) {
  Tape t;
  Var y = column_product(t.constant(Tensor({2, 3}, {1, 1, 0, 1, 1, 1})));
  EXPECT_EQ(y.shape(), (Shape{3}));
  EXPECT_EQ(vals(y), (std::vector<double>{1, 1, 0}));
}

TEST(Reductions, MatmulInnerDimensionChecked) {
  Tape t;
  EXPECT_THROW(matmul(t.constant(Tensor({2, 3})), t.constant(Tensor({2, 3}))), Error);
  Var y = matmul(t.constant(Tensor({2, 2}, {1, 2, 3, 4})), t.constant(Tensor({2, 1}, {5, 6})));
  EXPECT_EQ(vals(y), (std::vector<double>{17, 39}));
}

TEST(Reductions, MeanAndScale) {
  Tape t;
  EXPECT_EQ(mean(t.constant(Tensor::vector({1, 2, 3, 6}))).item(), 3.0);
  EXPECT_EQ(vals(scale(t.constant(Tensor::vector({1, -2})), 3.0)), (std::vector<double>{3, -6}));
}

TEST(Conv1d, HandEvaluatedKernelTwo) {
  Tape t;
  Var y = conv1d_causal(t.constant(Tensor({1, 3}, {1, 2, 3})), t.constant(Tensor({1, 1, 2}, {1, 1})),
                        std::nullopt, 1);
  EXPECT_EQ(vals(y), (std::vector<double>{1, 3, 5}));
}

TEST(Conv1d, HandEvaluatedDilationTwo) {
  Tape t;
  Var y = conv1d_causal(t.constant(Tensor({1, 5}, {1, 2, 3, 4, 5})),
                        t.constant(Tensor({1, 1, 2}, {1, 1})), std::nullopt, 2);
  EXPECT_EQ(vals(y), (std::vector<double>{1, 2, 4, 6, 8}));
}

TEST(Conv1d, IdentityKernelAnyDilation) {
  Gen g(3);
  Tensor x = g.tensor({2, 7});
  for (std::size_t d : {1u, 2u, 5u}) {
    Tape t;
    Tensor w({2, 2, 1}, {1, 0, 0, 1});
    Var y = conv1d_causal(t.constant(x), t.constant(w), std::nullopt, d);
    EXPECT_TRUE(bitwise_equal(y.value(), x.data()));
  }
}

TEST(Conv1d, MatchesDirectEvaluation) {
  Gen g(11);
  for (int trial = 0; trial < 20; ++trial) {
    const auto ci = static_cast<std::size_t>(g.integer(1, 3));
    const auto co = static_cast<std::size_t>(g.integer(1, 3));
    const auto k = static_cast<std::size_t>(g.integer(1, 5));
    const auto d = static_cast<std::size_t>(g.integer(1, 4));
    const auto len = static_cast<std::size_t>(g.integer(1, 12));
    Tensor x = g.tensor({ci, len}), w = g.tensor({co, ci, k}), b = g.tensor({co});
    Tape t;
    Var y = conv1d_causal(t.constant(x), t.constant(w), t.constant(b), d);
    const auto expect = naive_conv(x.values(), ci, len, w.values(), co, k, d, b.values());
    ASSERT_EQ(y.size(), expect.size());
    for (std::size_t i = 0; i < expect.size(); ++i) EXPECT_NEAR(y.value()[i], expect[i], 1e-12);
  }
}

TEST(Conv1d, BatchedEqualsPerSample) {
  Gen g(5);
  Tensor x = g.tensor({3, 2, 9}), w = g.tensor({4, 2, 3}), b = g.tensor({4});
  Tape t;
  Var y = conv1d_causal(t.constant(x), t.constant(w), t.constant(b), 2);
  ASSERT_EQ(y.shape(), (Shape{3, 4, 9}));
  for (std::size_t n = 0; n < 3; ++n) {
    Tensor xn({2, 9}, std::vector<double>(x.values().begin() + n * 18, x.values().begin() + (n + 1) * 18));
    Var yn = conv1d_causal(t.constant(xn), t.constant(w), t.constant(b), 2);
    EXPECT_TRUE(bitwise_equal(yn.value(), y.value().subspan(n * 36, 36)));
  }
}

TEST(Conv1d, Errors) {
  Tape t;
  EXPECT_THROW(conv1d_causal(t.constant(Tensor({2, 4})), t.constant(Tensor({1, 3, 2})), std::nullopt, 1),
               Error);
  EXPECT_THROW(conv1d_causal(t.constant(Tensor({1, 4})), t.constant(Tensor({1, 1, 2})), std::nullopt, 0),
               Error);
}

TEST(Conv1d, CausalityProperty) {
  Gen g(21);
  for (int trial = 0; trial < 30; ++trial) {
    const auto len = static_cast<std::size_t>(g.integer(2, 16));
    Tensor x = g.tensor({2, len}), w = g.tensor({2, 2, static_cast<std::size_t>(g.integer(1, 5))});
    const auto d = static_cast<std::size_t>(g.integer(1, 3));
    const auto cut = static_cast<std::size_t>(g.integer(0, static_cast<int>(len) - 2));
    Tensor x2 = x;
    for (std::size_t l = 0; l < 2; ++l) x2[l * len + cut + 1] += 1.0;
    Tape t;
    Var y1 = conv1d_causal(t.constant(x), t.constant(w), std::nullopt, d);
    Var y2 = conv1d_causal(t.constant(x2), t.constant(w), std::nullopt, d);
    for (std::size_t m = 0; m < 2; ++m)
      for (std::size_t tt = 0; tt <= cut; ++tt)
        EXPECT_EQ(std::bit_cast<std::uint64_t>(y1.value()[m * len + tt]),
                  std::bit_cast<std::uint64_t>(y2.value()[m * len + tt]));
  }
}

TEST(Conv1d, DilationEqualsZeroStuffedKernel) {
  Gen g(8);
  for (int trial = 0; trial < 30; ++trial) {
    const auto k = static_cast<std::size_t>(g.integer(1, 4));
    const auto d = static_cast<std::size_t>(g.integer(1, 4));
    Tensor x = g.tensor({2, 15}), w = g.tensor({3, 2, k});
    const std::size_t kx = (k - 1) * d + 1;
    Tensor wx({3, 2, kx});
    for (std::size_t r = 0; r < 6; ++r)
      for (std::size_t i = 0; i < k; ++i) wx[r * kx + i * d] = w[r * k + i];
    Tape t;
    Var a = conv1d_causal(t.constant(x), t.constant(w), std::nullopt, d);
    Var b = conv1d_causal(t.constant(x), t.constant(wx), std::nullopt, 1);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a.value()[i], b.value()[i], 1e-12);
  }
}

TEST(Heaviside, ForwardThreshold) {
  Tape t;
  EXPECT_EQ(vals(heaviside_ste(t.constant(Tensor::vector({1.0, 0.5, 0.49})), 0.5)),
            (std::vector<double>{1, 1, 0}));
  EXPECT_EQ(vals(heaviside_ste(t.constant(Tensor::vector({0, 0, 0})), 0.5)),
            (std::vector<double>{0, 0, 0}));
}

TEST(Heaviside, StraightThroughGradient) {
  Tensor g = Tensor::vector({0.9, 0.1});
  g.set_requires_grad(true);
  Tape t;
  Var y = heaviside_ste(t.leaf(g), 0.5);
  t.backward(sum(mul(y, t.constant(Tensor::vector({0.3, -0.2})))));
  EXPECT_DOUBLE_EQ(g.grad()[0], 0.3);
  EXPECT_DOUBLE_EQ(g.grad()[1], -0.2);
}

TEST(Heaviside, Idempotent) {
  Gen gen(2);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor g = gen.tensor({6}, 0.0, 1.0);
    const double delta = gen.real(0.05, 0.95);
    Tape t;
    Var once = heaviside_ste(t.constant(g), delta);
    Var twice = heaviside_ste(once, delta);
    EXPECT_EQ(vals(once), vals(twice));
  }
}

TEST(Backward, QuadraticGradient) {
  Tensor w = Tensor::vector({1, 2});
  w.set_requires_grad(true);
  Tape t;
  Var wv = t.leaf(w);
  t.backward(sum(mul(wv, wv)));
  EXPECT_EQ(w.grad()[0], 2.0);
  EXPECT_EQ(w.grad()[1], 4.0);
}

TEST(Backward, ConvWeightGradientIsShiftedSum) {
  Tensor w({1, 1, 2}, {0.3, -0.7});
  w.set_requires_grad(true);
  Tape t;
  Var y = conv1d_causal(t.constant(Tensor({1, 3}, {1, 2, 3})), t.leaf(w), std::nullopt, 1);
  t.backward(sum(y));
  EXPECT_EQ(w.grad()[0], 6.0);
  EXPECT_EQ(w.grad()[1], 3.0);
}

TEST(Backward, IndependentLossGivesZeroGradient) {
  Tensor w = Tensor::vector({1, 2});
  w.set_requires_grad(true);
  Tape t;
  t.leaf(w);
  t.backward(sum(t.constant(Tensor::vector({4, 5}))));
  EXPECT_EQ(w.grad()[0], 0.0);
  EXPECT_EQ(w.grad()[1], 0.0);
}

TEST(Backward, TwiceIsAnError) {
  Tensor w = Tensor::vector({1});
  w.set_requires_grad(true);
  Tape t;
  Var loss = sum(t.leaf(w));
  t.backward(loss);
  EXPECT_THROW(t.backward(loss), Error);
  EXPECT_THROW(t.constant(w), Error);
}

TEST(Backward, NonScalarLossIsAnError) {
  Tensor w = Tensor::vector({1, 2});
  w.set_requires_grad(true);
  Tape t;
  EXPECT_THROW(t.backward(t.leaf(w)), Error);
}

TEST(Backward, AbsSubgradientAtZeroIsZero) {
  Tensor w = Tensor::vector({0.0, -2.0});
  w.set_requires_grad(true);
  Tape t;
  t.backward(sum(abs(t.leaf(w))));
  EXPECT_EQ(w.grad()[0], 0.0);
  EXPECT_EQ(w.grad()[1], -1.0);
}

TEST(Backward, NoGradTapeSkipsLeaves) {
  Tensor w = Tensor::vector({1, 2});
  w.set_requires_grad(true);
  Tape t;
  t.no_grad = true;
  Var y = sum(mul(t.leaf(w), t.leaf(w)));
  EXPECT_FALSE(t.needs_grad(y));
}

TEST(MaskTaps, ZeroMaskZeroesWeightsAndGradient) {
  Gen g(4);
  Tensor w = g.tensor({2, 2, 5});
  w.set_requires_grad(true);
  Tensor mask = Tensor::vector({1, 0, 1, 0, 1});
  Tape t;
  Var mw = mask_taps(t.leaf(w), t.constant(mask));
  for (std::size_t r = 0; r < 4; ++r) {
    EXPECT_EQ(mw.value()[r * 5 + 1], 0.0);
    EXPECT_EQ(mw.value()[r * 5 + 2], w[r * 5 + 2]);
  }
  Var y = conv1d_causal(t.constant(g.tensor({2, 8})), mw, std::nullopt, 1);
  t.backward(sum(mul(y, y)));
  for (std::size_t r = 0; r < 4; ++r) {
    EXPECT_EQ(w.grad()[r * 5 + 1], 0.0);
    EXPECT_EQ(w.grad()[r * 5 + 3], 0.0);
  }
}

TEST(Pool, WindowAndGlobal) {
  Tape t;
  Tensor x({1, 1, 4}, {1, 2, 3, 5});
  EXPECT_EQ(vals(avg_pool_time(t.constant(x), 2)), (std::vector<double>{1.5, 4}));
  Var g = avg_pool_time(t.constant(x), 0);
  EXPECT_EQ(g.shape(), (Shape{1, 1}));
  EXPECT_EQ(g.item(), 2.75);
}

TEST(Linear, AffineMap) {
  Tape t;
  Var y = linear(t.constant(Tensor({1, 2}, {1, 2})), t.constant(Tensor({2, 2}, {1, 0, 1, 1})),
                 t.constant(Tensor::vector({0.5, -1})));
  EXPECT_EQ(vals(y), (std::vector<double>{1.5, 2}));
}

TEST(Bce, LogitZeroTargetOneIsLn2) {
  Tape t;
  EXPECT_NEAR(bce_with_logits(t.constant(Tensor::vector({0})), t.constant(Tensor::vector({1}))).item(),
              std::log(2.0), 1e-15);
}
