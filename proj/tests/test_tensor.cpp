#include <bitgen/ops.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "oracles.hpp"

using namespace bitgen;

TEST(Randn, ZeroStdGivesZeros) {
  Tensor t = randn({4}, real(0), 7);
  for (real v : t.data()) EXPECT_EQ(v, real(0));
}

TEST(Randn, SampleStdConverges) {
  Tensor t = randn({100000}, real(0.05), 1);
  double s = 0, ss = 0;
  for (real v : t.data()) s += v;
  const double mu = s / t.numel();
  for (real v : t.data()) ss += (v - mu) * (v - mu);
  const double sd = std::sqrt(ss / t.numel());
  EXPECT_GE(sd, 0.049);
  EXPECT_LE(sd, 0.051);
  EXPECT_NEAR(mu, 0.0, 1e-3);
}

TEST(Randn, Deterministic) {
  Tensor a = randn({3, 5}, real(1), 42), b = randn({3, 5}, real(1), 42);
  EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
}

TEST(Randn, EmptyShapeThrows) { EXPECT_THROW(randn({}, real(1), 0), ShapeError); }

TEST(Matmul, Identity) {
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor m({2, 2}, {1, 2, 3, 4});
  Tensor r = matmul(eye, m);
  EXPECT_EQ(std::vector<real>(r.data().begin(), r.data().end()), (std::vector<real>{1, 2, 3, 4}));
}

TEST(Matmul, HandArithmetic) {
  Tensor r = matmul(Tensor({1, 2}, {1, -1}), Tensor({2, 1}, {2, 3}));
  EXPECT_EQ(r.item(), real(-1));
}

TEST(Matmul, ShapeMismatchThrows) {
  EXPECT_THROW(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);
}

TEST(Conv2d, PointwiseScales) {
  Tensor x = randn({1, 1, 3, 3}, real(1), 3);
  Tensor y = conv2d(x, Tensor::full({1, 1, 1, 1}, 2), 0);
  for (int64_t i = 0; i < 9; ++i) EXPECT_EQ(y.data()[i], 2 * x.data()[i]);
}

TEST(Conv2d, OverlapCounts) {
  Tensor y = conv2d(Tensor::ones({1, 1, 3, 3}), Tensor::ones({1, 1, 3, 3}), 1);
  EXPECT_EQ(y.data()[4], real(9));
  EXPECT_EQ(y.data()[0], real(4));
  EXPECT_EQ(y.data()[8], real(4));
  EXPECT_EQ(y.data()[1], real(6));
}

namespace {

Tensor abs_of(const Tensor& t) {
  Tensor out = t.clone();
  for (real& v : out.data()) v = std::abs(v);
  return out;
}

// Summation-order rounding bound: fan_in * eps * sum |x w| per output.
void expect_conv_close(const Tensor& x, const Tensor& w, int pad) {
  auto expect = oracle::naive_conv2d(x, w, pad);
  auto magnitude = oracle::naive_conv2d(abs_of(x), abs_of(w), pad);
  Tensor y = conv2d(x, w, pad);
  ASSERT_EQ(static_cast<size_t>(y.numel()), expect.size());
  const double fan_in = double(w.dim(1) * w.dim(2) * w.dim(3));
  for (size_t i = 0; i < expect.size(); ++i) {
    const double bound = fan_in * std::numeric_limits<real>::epsilon() * magnitude[i];
    ASSERT_LE(std::abs(double(y.data()[i]) - double(expect[i])), bound) << i;
  }
}

}  // namespace

TEST(Conv2d, MatchesNaiveLoopWithinRounding) {
  Tensor x = randn({2, 3, 5, 5}, real(1), 11);
  Tensor w = randn({4, 3, 3, 3}, real(1), 12);
  expect_conv_close(x, w, 1);
}

TEST(Conv2d, MatchesNaiveLoopForSmallShapes) {
  uint64_t seed = 100;
  for (int64_t h = 1; h <= 8; h += 3)
    for (int64_t w = 1; w <= 8; w += 2)
      for (int64_t k : {1, 3})
        for (int pad : {0, 1}) {
          if (h + 2 * pad < k || w + 2 * pad < k) continue;
          Tensor x = randn({2, 3, h, w}, real(1), ++seed);
          Tensor wt = randn({2, 3, k, k}, real(1), ++seed);
          expect_conv_close(x, wt, pad);
        }
}

TEST(Conv2d, ChannelMismatchThrows) {
  EXPECT_THROW(conv2d(Tensor::zeros({1, 2, 3, 3}), Tensor::zeros({1, 3, 3, 3}), 1), ShapeError);
}

TEST(Elementwise, KnownValues) {
  EXPECT_EQ(sigmoid(Tensor::scalar(0)).item(), real(0.5));
  EXPECT_EQ(logit(Tensor::scalar(0.5)).item(), real(0));
  EXPECT_NEAR(elu(Tensor::scalar(-50)).item(), -1.0, 1e-6);
  EXPECT_EQ(elu(Tensor::scalar(1)).item(), real(1));
  EXPECT_THROW(logit(Tensor::scalar(1)), DomainError);
  EXPECT_THROW(logit(Tensor::scalar(0)), DomainError);
}

TEST(Elementwise, GluWithZeroGateHalvesInput) {
  Tensor a = randn({2, 3, 2, 2}, real(1), 5);
  Tensor x = concat({a, Tensor::zeros({2, 3, 2, 2})}, 1);
  Tensor y = glu(x);
  ASSERT_EQ(y.shape(), a.shape());
  for (int64_t i = 0; i < a.numel(); ++i) EXPECT_EQ(y.data()[i], a.data()[i] * real(0.5));
  EXPECT_THROW(glu(Tensor::zeros({1, 3, 2, 2})), ShapeError);
}

TEST(Backward, SumGivesOnes) {
  Tensor x = randn({5}, real(1), 9);
  x.requires_grad_();
  sum(x).backward();
  for (real g : x.grad()) EXPECT_EQ(g, real(1));
}

TEST(Backward, SumOfSquaresGivesTwiceX) {
  Tensor x = randn({5}, real(1), 9);
  x.requires_grad_();
  sum(x * x).backward();
  for (int64_t i = 0; i < 5; ++i) EXPECT_EQ(x.grad()[i], 2 * x.data()[i]);
}

TEST(Backward, NonScalarLossThrows) {
  Tensor x = randn({5}, real(1), 9);
  x.requires_grad_();
  EXPECT_THROW((x * x).backward(), ShapeError);
}

TEST(Tape, TopologicalOrderVisitsEachNodeOnce) {
  Tensor x = randn({3}, real(1), 1);
  x.requires_grad_();
  Tensor y = x * x;
  Tensor z = y + y;  // y is shared
  Tensor loss = sum(z);
  Tape tape = Tape::record(loss);
  auto nodes = tape.nodes();
  EXPECT_EQ(nodes.size(), 4u);  // x, y, z, loss
  for (size_t i = 0; i < nodes.size(); ++i)
    for (const auto& in : nodes[i]->inputs) {
      auto it = std::find(nodes.begin(), nodes.end(), in.get());
      ASSERT_NE(it, nodes.end());
      EXPECT_LT(static_cast<size_t>(it - nodes.begin()), i);
    }
  loss.backward();
  for (int64_t i = 0; i < 3; ++i) EXPECT_EQ(x.grad()[i], 4 * x.data()[i]);
}

TEST(Tape, ReplayIsBitIdentical) {
  auto run = [] {
    Tensor w = randn({4, 3}, real(1), 77);
    w.requires_grad_();
    Tensor x = randn({3, 2}, real(1), 78);
    sum(tanh(matmul(w, x))).backward();
    return std::vector<real>(w.grad().begin(), w.grad().end());
  };
  EXPECT_EQ(run(), run());
}

TEST(Shape, SpaceToDepthRoundTrip) {
  Tensor x = randn({2, 3, 4, 6}, real(1), 4);
  Tensor y = depth_to_space(space_to_depth(x));
  EXPECT_TRUE(std::equal(x.data().begin(), x.data().end(), y.data().begin()));
  EXPECT_EQ(space_to_depth(x).shape(), (Shape{2, 12, 2, 3}));
}

TEST(NoGrad, SuppressesRecording) {
  Tensor x = randn({3}, real(1), 1);
  x.requires_grad_();
  NoGradGuard guard;
  Tensor y = x * x;
  EXPECT_FALSE(y.requires_grad());
}
