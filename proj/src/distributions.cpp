#include <bitgen/distributions.hpp>

#include <bitgen/ops.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <vector>

BITGEN_NAMESPACE_BEGIN

namespace {

thread_local InverseStats t_inverse_stats;

double log_sigmoid_d(double v) { return v >= 0 ? -std::log1p(std::exp(-v)) : v - std::log1p(std::exp(v)); }
double sigmoid_d(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

real noise_value(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(kUniformClamp, 1.0 - kUniformClamp);
  const double u = dist(rng);
  return static_cast<real>(std::log(u) - std::log1p(-u));
}

void require_same(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
}

// x [N, ...] -> [N, K, ...] by repetition along a new axis 1.
Tensor expand_components(const Tensor& x, int64_t k) {
  Shape s = x.shape();
  s.insert(s.begin() + 1, 1);
  return repeat_axis(reshape(x, s), 1, k);
}

Tensor squeeze_components(const Tensor& x) {
  Shape s = x.shape();
  s.erase(s.begin() + 1);
  return reshape(x, std::move(s));
}

void check_mixture(const LogisticMixture& m, const Tensor& x) {
  require_same(m.logits, m.mu, "mixture");
  require_same(m.logits, m.log_s, "mixture");
  Shape expect = x.shape();
  if (expect.empty()) throw ShapeError("mixture: x needs a leading batch axis");
  expect.insert(expect.begin() + 1, m.logits.ndim() > 1 ? m.logits.dim(1) : 0);
  if (m.logits.shape() != expect) {
    throw ShapeError("mixture: parameters " + shape_str(m.logits.shape()) + " do not match x " +
                     shape_str(x.shape()));
  }
}

// Solves logit(CDF(x)) = t per element by bisection in double precision.
std::vector<double> invert_logit(const LogisticMixture& m, const Shape& x_shape, std::span<const double> targets) {
  const int64_t n = x_shape[0], k = m.logits.dim(1);
  const int64_t rest = shape_numel(x_shape) / std::max<int64_t>(n, 1);
  auto lg = m.logits.data(), mu = m.mu.data(), ls = m.log_s.data();
  std::vector<double> out(targets.size());
  InverseStats stats;
  std::vector<double> logpi(static_cast<size_t>(k)), mus(static_cast<size_t>(k)), inv_s(static_cast<size_t>(k));
  std::vector<double> tc(static_cast<size_t>(k)), ts(static_cast<size_t>(k));
  for (int64_t b = 0; b < n; ++b)
    for (int64_t r = 0; r < rest; ++r) {
      double lmax = -std::numeric_limits<double>::infinity(), mu_min = 1e300, mu_max = -1e300, s_max = 0;
      for (int64_t c = 0; c < k; ++c) {
        const size_t idx = static_cast<size_t>((b * k + c) * rest + r);
        logpi[c] = lg[idx];
        lmax = std::max(lmax, logpi[c]);
        mus[c] = mu[idx];
        inv_s[c] = std::exp(-static_cast<double>(ls[idx]));
        mu_min = std::min(mu_min, mus[c]);
        mu_max = std::max(mu_max, mus[c]);
        s_max = std::max(s_max, 1.0 / inv_s[c]);
      }
      double z = 0;
      for (int64_t c = 0; c < k; ++c) z += std::exp(logpi[c] - lmax);
      const double lz = lmax + std::log(z);
      for (int64_t c = 0; c < k; ++c) logpi[c] -= lz;

      auto logit_cdf = [&](double x) {
        double mc = -1e300, ms = -1e300;
        for (int64_t c = 0; c < k; ++c) {
          const double zz = (x - mus[c]) * inv_s[c];
          tc[c] = logpi[c] + log_sigmoid_d(zz);
          ts[c] = logpi[c] + log_sigmoid_d(-zz);
          mc = std::max(mc, tc[c]);
          ms = std::max(ms, ts[c]);
        }
        double ac = 0, as = 0;
        for (int64_t c = 0; c < k; ++c) {
          ac += std::exp(tc[c] - mc);
          as += std::exp(ts[c] - ms);
        }
        return (mc + std::log(ac)) - (ms + std::log(as));
      };

      const size_t e = static_cast<size_t>(b * rest + r);
      const double t = targets[e];
      double lo = mu_min - 30 * s_max, hi = mu_max + 30 * s_max;
      for (int i = 0; i < 64 && logit_cdf(lo) > t; ++i) lo -= hi - lo;
      for (int i = 0; i < 64 && logit_cdf(hi) < t; ++i) hi += hi - lo;
      double x = 0.5 * (lo + hi);
      int64_t it = 0;
      bool converged = false;
      for (; it < 200; ++it) {
        x = 0.5 * (lo + hi);
        const double f = logit_cdf(x) - t;
        if (std::abs(f) < 1e-10) {
          converged = true;
          break;
        }
        if (f < 0) {
          lo = x;
        } else {
          hi = x;
        }
        if (hi - lo <= 4 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(x))) {
          converged = true;
          break;
        }
      }
      if (!converged) ++stats.unconverged;
      stats.max_iterations = std::max(stats.max_iterations, it);
      out[e] = x;
    }
  t_inverse_stats = stats;
  return out;
}

}  // namespace

Tensor logistic_log_prob(const Logistic& d, const Tensor& x) {
  require_same(d.mu, x, "logistic_log_prob");
  Tensor z = (x - d.mu) * exp(neg(d.log_s));
  return log_sigmoid(z) + log_sigmoid(neg(z)) - d.log_s;
}

Tensor logistic_cdf(const Logistic& d, const Tensor& x) {
  require_same(d.mu, x, "logistic_cdf");
  return sigmoid((x - d.mu) * exp(neg(d.log_s)));
}

Tensor logistic_noise(const Shape& shape, uint64_t seed) {
  Tensor t(shape);
  std::mt19937_64 rng(mix_seed(seed));
  for (real& v : t.data()) v = noise_value(rng);
  return t;
}

Tensor logistic_noise_rows(const Shape& shape, std::span<const uint64_t> row_seeds) {
  if (shape.empty() || static_cast<int64_t>(row_seeds.size()) != shape[0]) {
    throw ShapeError("logistic_noise_rows: need one seed per row of " + shape_str(shape));
  }
  Tensor t(shape);
  const int64_t per_row = shape[0] == 0 ? 0 : t.numel() / shape[0];
  auto d = t.data();
  for (int64_t r = 0; r < shape[0]; ++r) {
    std::mt19937_64 rng(mix_seed(row_seeds[r]));
    for (int64_t i = 0; i < per_row; ++i) d[r * per_row + i] = noise_value(rng);
  }
  return t;
}

Tensor logistic_sample(const Logistic& d, const Tensor& eps) {
  require_same(d.mu, eps, "logistic_sample");
  return d.mu + exp(d.log_s) * eps;
}

Tensor logistic_sample(const Logistic& d, uint64_t seed) { return logistic_sample(d, logistic_noise(d.mu.shape(), seed)); }

Tensor discretized_logistic_log_prob(const Logistic& d, const Tensor& x) {
  require_same(d.mu, x, "discretized_logistic_log_prob");
  require_same(d.mu, d.log_s, "discretized_logistic_log_prob");
  auto xs = x.data(), mus = d.mu.data(), lss = d.log_s.data();
  const size_t count = xs.size();
  std::vector<real> out(count);
  // Per element: d(out)/d(mu) and d(out)/d(log_s).
  std::vector<real> dmu(count), dls(count);
  for (size_t i = 0; i < count; ++i) {
    const double xv = xs[i];
    if (!(xv >= 0 && xv <= 255) || xv != std::floor(xv)) {
      throw DomainError("discretized_logistic_log_prob: x = " + std::to_string(xv) + " is not an integer in [0, 255]");
    }
    const double inv_s = std::exp(-static_cast<double>(lss[i]));
    const double c = xv - mus[i];
    const double a = (c + 0.5) * inv_s, b = (c - 0.5) * inv_s;
    double lp, g_a = 0, g_b = 0, g_ls_extra = 0;
    if (xv == 0) {
      lp = log_sigmoid_d(a);
      g_a = sigmoid_d(-a);
    } else if (xv == 255) {
      lp = log_sigmoid_d(-b);
      g_b = -sigmoid_d(b);
    } else {
      // sigma(a) - sigma(b) = sigma(a) * sigma(-b) * (1 - exp(-(a - b))), a - b = 1/s.
      lp = log_sigmoid_d(a) + log_sigmoid_d(-b) + std::log(-std::expm1(-inv_s));
      g_a = sigmoid_d(-a);
      g_b = -sigmoid_d(b);
      g_ls_extra = -inv_s / std::expm1(inv_s);
    }
    if (lp < kLogProbFloor) {
      out[i] = static_cast<real>(kLogProbFloor);
      continue;
    }
    out[i] = static_cast<real>(lp);
    dmu[i] = static_cast<real>(-(g_a + g_b) * inv_s);
    dls[i] = static_cast<real>(-g_a * a - g_b * b + g_ls_extra);
  }
  return make_result(x.shape(), std::move(out), {d.mu, d.log_s}, "discretized_logistic",
                     [dmu = std::move(dmu), dls = std::move(dls)](TensorImpl& o) {
                       auto gm = input_grad(o, 0);
                       for (size_t i = 0; i < gm.size(); ++i) gm[i] += o.grad[i] * dmu[i];
                       auto gs = input_grad(o, 1);
                       for (size_t i = 0; i < gs.size(); ++i) gs[i] += o.grad[i] * dls[i];
                     });
}

Tensor kl_mc(const Logistic& q, const Logistic& p, const Tensor& z) {
  return sum_rows(logistic_log_prob(q, z) - logistic_log_prob(p, z));
}

MixLogTerms mix_log_terms(const LogisticMixture& m, const Tensor& x) {
  check_mixture(m, x);
  const int64_t k = m.logits.dim(1);
  Tensor log_pi = m.logits - repeat_axis(log_sum_exp(m.logits, 1), 1, k);
  Tensor z = (expand_components(x, k) - m.mu) * exp(neg(m.log_s));
  Tensor lc = log_sigmoid(z), ls = log_sigmoid(neg(z));
  return {squeeze_components(log_sum_exp(log_pi + lc, 1)), squeeze_components(log_sum_exp(log_pi + ls, 1)),
          squeeze_components(log_sum_exp(log_pi + lc + ls - m.log_s, 1))};
}

Tensor mix_log_cdf(const LogisticMixture& m, const Tensor& x) { return exp(mix_log_terms(m, x).log_cdf); }

Tensor mix_log_cdf_deriv(const LogisticMixture& m, const Tensor& x) { return exp(mix_log_terms(m, x).log_pdf); }

Tensor mix_log_cdf_inverse(const LogisticMixture& m, const Tensor& p) {
  check_mixture(m, p);
  std::vector<double> t(static_cast<size_t>(p.numel()));
  auto ps = p.data();
  for (size_t i = 0; i < t.size(); ++i) {
    const double v = ps[i];
    if (!(v > 0 && v < 1)) throw DomainError("mix_log_cdf_inverse: p = " + std::to_string(v) + " outside (0, 1)");
    t[i] = std::log(v) - std::log1p(-v);
  }
  std::vector<double> x = invert_logit(m, p.shape(), t);
  return Tensor(p.shape(), std::vector<real>(x.begin(), x.end()));
}

Tensor mix_logit_inverse(const LogisticMixture& m, const Tensor& t) {
  check_mixture(m, t);
  auto ts = t.data();
  std::vector<double> target(ts.begin(), ts.end());
  std::vector<double> x = invert_logit(m, t.shape(), target);
  return Tensor(t.shape(), std::vector<real>(x.begin(), x.end()));
}

const InverseStats& last_inverse_stats() { return t_inverse_stats; }

BITGEN_NAMESPACE_END
