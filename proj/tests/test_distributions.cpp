#include <bitgen/distributions.hpp>
#include <bitgen/ops.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"

using namespace bitgen;

namespace {

Logistic scalar_logistic(double mu, double log_s, int64_t n = 1) {
  return {Tensor::full({n}, static_cast<real>(mu)), Tensor::full({n}, static_cast<real>(log_s))};
}

LogisticMixture random_mixture(int64_t n, int64_t k, int64_t d, uint64_t seed) {
  return {randn({n, k, d}, 1, seed), randn({n, k, d}, 2, seed + 1), randn({n, k, d}, real(0.5), seed + 2)};
}

double mix_cdf_ref(const LogisticMixture& m, int64_t k, int64_t d, int64_t idx, double x) {
  double zmax = -1e300;
  for (int64_t c = 0; c < k; ++c) zmax = std::max(zmax, double(m.logits.data()[c * d + idx]));
  double z = 0, acc = 0;
  for (int64_t c = 0; c < k; ++c) z += std::exp(m.logits.data()[c * d + idx] - zmax);
  for (int64_t c = 0; c < k; ++c) {
    const double pi = std::exp(m.logits.data()[c * d + idx] - zmax) / z;
    const double s = std::exp(double(m.log_s.data()[c * d + idx]));
    acc += pi / (1 + std::exp(-(x - m.mu.data()[c * d + idx]) / s));
  }
  return acc;
}

}  // namespace

TEST(Logistic, CdfAtLocationIsHalf) {
  EXPECT_NEAR(logistic_cdf(scalar_logistic(1.3, 0.4), Tensor::full({1}, 1.3f)).item(), 0.5, 1e-7);
}

TEST(Logistic, PeakDensity) {
  const double log_s = 0.7;
  EXPECT_NEAR(logistic_log_prob(scalar_logistic(-2, log_s), Tensor::full({1}, -2)).item(),
              -std::log(4 * std::exp(log_s)), 1e-6);
}

TEST(Logistic, DensityIntegratesToOne) {
  const double mu = 0.3, s = 0.8;
  const int steps = 20000;
  Tensor grid({steps + 1});
  for (int i = 0; i <= steps; ++i) grid.data()[i] = static_cast<real>(mu - 40 * s + 80 * s * i / steps);
  Tensor lp = logistic_log_prob(scalar_logistic(mu, std::log(s), steps + 1), grid);
  double acc = 0;
  const double dx = 80 * s / steps;
  for (int i = 0; i <= steps; ++i) acc += (i == 0 || i == steps ? 0.5 : 1.0) * std::exp(double(lp.data()[i]));
  EXPECT_NEAR(acc * dx, 1.0, 1e-4);
}

TEST(Logistic, SampleFollowsDistribution) {
  const int64_t n = 100000;
  Logistic d = scalar_logistic(2, std::log(0.5), n);
  Tensor z = logistic_sample(d, 3);
  double mean = 0, below = 0;
  for (real v : z.data()) {
    mean += v;
    below += v < 2.5;
  }
  EXPECT_NEAR(mean / n, 2.0, 0.02);
  EXPECT_NEAR(below / n, 1 / (1 + std::exp(-1.0)), 0.005);
  Tensor z2 = logistic_sample(d, 3);
  EXPECT_TRUE(std::equal(z.data().begin(), z.data().end(), z2.data().begin()));
}

TEST(Logistic, RowNoiseIndependentOfBatch) {
  std::vector<uint64_t> seeds{11, 12, 13};
  Tensor a = logistic_noise_rows({3, 5}, seeds);
  Tensor b = logistic_noise_rows({1, 5}, std::span<const uint64_t>(seeds).subspan(1, 1));
  for (int64_t i = 0; i < 5; ++i) EXPECT_EQ(a.data()[5 + i], b.data()[i]);
}

TEST(DiscretizedLogistic, SumsToOne) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> mu_d(-20, 275), ls_d(-1, 4);
  for (int trial = 0; trial < 100; ++trial) {
    Logistic d = scalar_logistic(mu_d(rng), ls_d(rng), 256);
    Tensor x({256});
    for (int i = 0; i < 256; ++i) x.data()[i] = static_cast<real>(i);
    Tensor lp = discretized_logistic_log_prob(d, x);
    double total = 0;
    for (real v : lp.data()) total += std::exp(double(v));
    ASSERT_NEAR(total, 1.0, 1e-6) << "trial " << trial;
  }
}

TEST(DiscretizedLogistic, FarLeftPutsMassOnZero) {
  Logistic d = scalar_logistic(-1000, 0, 2);
  Tensor lp = discretized_logistic_log_prob(d, Tensor({2}, {0, 1}));
  EXPECT_NEAR(lp.data()[0], 0.0, 1e-7);
  EXPECT_EQ(lp.data()[1], static_cast<real>(kLogProbFloor));
}

TEST(DiscretizedLogistic, MirrorSymmetry) {
  for (int x : {0, 1, 17, 128, 254, 255}) {
    Logistic a = scalar_logistic(40.3, 1.2), b = scalar_logistic(255 - 40.3, 1.2);
    const real la = discretized_logistic_log_prob(a, Tensor::full({1}, real(x))).item();
    const real lb = discretized_logistic_log_prob(b, Tensor::full({1}, real(255 - x))).item();
    EXPECT_NEAR(la, lb, 1e-5) << x;
  }
}

TEST(DiscretizedLogistic, RejectsOutOfRange) {
  Logistic d = scalar_logistic(0, 0);
  EXPECT_THROW(discretized_logistic_log_prob(d, Tensor::full({1}, 256)), DomainError);
  EXPECT_THROW(discretized_logistic_log_prob(d, Tensor::full({1}, 1.5f)), DomainError);
}

TEST(KlMc, IdenticalDistributionsGiveZero) {
  Logistic q{randn({4, 6}, 1, 1), randn({4, 6}, 1, 2)};
  Tensor z = randn({4, 6}, 3, 3);
  Tensor kl = kl_mc(q, q, z);
  ASSERT_EQ(kl.shape(), (Shape{4}));
  for (real v : kl.data()) EXPECT_EQ(v, real(0));
}

TEST(KlMc, FiniteForTinyScale) {
  Logistic q = scalar_logistic(0, std::log(1e-4), 1000), p = scalar_logistic(0.5, 0, 1000);
  Tensor kl = kl_mc(q, p, logistic_sample(q, 9));
  for (real v : kl.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(KlMc, MeanMatchesQuadrature) {
  const int64_t n = 100000;
  Logistic q = scalar_logistic(0, 0, n), p = scalar_logistic(1, 0, n);
  Tensor z = logistic_sample(q, 21);
  Tensor kl = kl_mc({reshape(q.mu, {n, 1}), reshape(q.log_s, {n, 1})}, {reshape(p.mu, {n, 1}), reshape(p.log_s, {n, 1})},
                    reshape(z, {n, 1}));
  double m = 0, ss = 0;
  for (real v : kl.data()) m += v;
  m /= n;
  for (real v : kl.data()) ss += (v - m) * (v - m);
  const double se = std::sqrt(ss / (n - 1) / n);
  auto logistic_pdf = [](double x, double mu) {
    const double z = x - mu;
    return std::exp(-z) / std::pow(1 + std::exp(-z), 2);
  };
  const double truth = oracle::trapezoid(
      [&](double x) {
        const double qd = logistic_pdf(x, 0);
        return qd > 0 ? qd * (std::log(qd) - std::log(logistic_pdf(x, 1))) : 0.0;
      },
      -60, 60, 200000);
  EXPECT_NEAR(m, truth, 2 * se);
}

TEST(MixLogCdf, SingleComponentMatchesLogistic) {
  Tensor mu = randn({3, 1, 4}, 1, 1), ls = randn({3, 1, 4}, real(0.3), 2), x = randn({3, 4}, 2, 3);
  LogisticMixture m{Tensor::zeros({3, 1, 4}), mu, ls};
  Tensor a = mix_log_cdf(m, x);
  Tensor b = logistic_cdf({reshape(mu, {3, 4}), reshape(ls, {3, 4})}, x);
  for (int64_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.data()[i], b.data()[i], 1e-6);
}

TEST(MixLogCdf, TailLimits) {
  LogisticMixture m = random_mixture(1, 3, 2, 4);
  Tensor p = mix_log_cdf(m, Tensor({1, 2}, {1e4f, -1e4f}));
  EXPECT_EQ(p.data()[0], real(1));
  EXPECT_EQ(p.data()[1], real(0));
}

TEST(MixLogCdf, MatchesDirectFormula) {
  LogisticMixture m = random_mixture(1, 5, 6, 8);
  Tensor x = randn({1, 6}, 2, 9);
  Tensor p = mix_log_cdf(m, x);
  for (int64_t i = 0; i < 6; ++i) EXPECT_NEAR(p.data()[i], mix_cdf_ref(m, 5, 6, i, x.data()[i]), 1e-6);
}

TEST(MixLogCdf, StrictlyIncreasingOnGrid) {
  const int64_t grid = 1000;
  for (uint64_t s = 0; s < 5; ++s) {
    LogisticMixture one = random_mixture(1, 8, 1, 100 + s);
    LogisticMixture m{repeat_axis(one.logits, 0, grid), repeat_axis(one.mu, 0, grid), repeat_axis(one.log_s, 0, grid)};
    Tensor x({grid, 1});
    for (int64_t i = 0; i < grid; ++i) x.data()[i] = static_cast<real>(-6 + 12.0 * i / (grid - 1));
    Tensor lc = mix_log_terms(m, x).log_cdf;
    for (int64_t i = 1; i < grid; ++i) ASSERT_LT(lc.data()[i - 1], lc.data()[i]);
  }
}

TEST(MixLogCdf, DerivativeMatchesFiniteDifference) {
  LogisticMixture m = random_mixture(1, 4, 8, 12);
  Tensor x = randn({1, 8}, 1, 13);
  Tensor d = mix_log_cdf_deriv(m, x);
  const double h = 1e-3;
  for (int64_t i = 0; i < 8; ++i) {
    const double fd = (mix_cdf_ref(m, 4, 8, i, x.data()[i] + h) - mix_cdf_ref(m, 4, 8, i, x.data()[i] - h)) / (2 * h);
    EXPECT_NEAR(d.data()[i], fd, 1e-4 * std::max(1.0, fd));
    EXPECT_GT(d.data()[i], 0);
  }
}

TEST(MixLogCdf, SingleComponentPeakDensity) {
  LogisticMixture m{Tensor::zeros({1, 1, 1}), Tensor::full({1, 1, 1}, 0.5f), Tensor::full({1, 1, 1}, -0.2f)};
  EXPECT_NEAR(mix_log_cdf_deriv(m, Tensor::full({1, 1}, 0.5f)).item(), 1 / (4 * std::exp(-0.2)), 1e-6);
}

TEST(MixLogCdfInverse, RoundTrip) {
  LogisticMixture m = random_mixture(4, 4, 16, 20);
  Tensor x = randn({4, 16}, 3, 21);
  Tensor back = mix_logit_inverse(m, mix_log_terms(m, x).log_cdf - mix_log_terms(m, x).log_sf);
  for (int64_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(back.data()[i], x.data()[i], 1e-5);
  Tensor p = mix_log_cdf(m, x);
  Tensor back_p = mix_log_cdf_inverse(m, p);
  for (int64_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(back_p.data()[i], x.data()[i], 1e-4);
  EXPECT_EQ(last_inverse_stats().unconverged, 0);
}

TEST(MixLogCdfInverse, SingleComponentMedianIsLocation) {
  LogisticMixture m{Tensor::zeros({1, 1, 1}), Tensor::full({1, 1, 1}, 1.7f), Tensor::full({1, 1, 1}, 0.3f)};
  EXPECT_NEAR(mix_log_cdf_inverse(m, Tensor::full({1, 1}, 0.5f)).item(), 1.7, 1e-6);
}

TEST(MixLogCdfInverse, Monotone) {
  LogisticMixture one = random_mixture(1, 6, 1, 30);
  const int64_t n = 200;
  LogisticMixture m{repeat_axis(one.logits, 0, n), repeat_axis(one.mu, 0, n), repeat_axis(one.log_s, 0, n)};
  Tensor p({n, 1});
  for (int64_t i = 0; i < n; ++i) p.data()[i] = static_cast<real>((i + 0.5) / n);
  Tensor x = mix_log_cdf_inverse(m, p);
  for (int64_t i = 1; i < n; ++i) EXPECT_LT(x.data()[i - 1], x.data()[i]);
}

TEST(MixLogCdfInverse, RejectsOutsideUnitInterval) {
  LogisticMixture m = random_mixture(1, 2, 1, 1);
  EXPECT_THROW(mix_log_cdf_inverse(m, Tensor::full({1, 1}, 1)), DomainError);
  EXPECT_THROW(mix_log_cdf_inverse(m, Tensor::full({1, 1}, 0)), DomainError);
}
