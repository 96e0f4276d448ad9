#pragma once

#include <bitgen/tensor.hpp>

#include <cstdint>
#include <span>

BITGEN_NAMESPACE_BEGIN

inline constexpr double kUniformClamp = 1e-7;
// Lower bound applied to discretised log-probabilities: log(1e-12).
inline constexpr double kLogProbFloor = -27.631021115928547;

// Logistic distribution with location mu and scale exp(log_s), elementwise.
struct Logistic {
  Tensor mu;
  Tensor log_s;
};

Tensor logistic_log_prob(const Logistic& d, const Tensor& x);
Tensor logistic_cdf(const Logistic& d, const Tensor& x);

// Standard logistic noise logit(u), u ~ U(1e-7, 1 - 1e-7). A constant.
Tensor logistic_noise(const Shape& shape, uint64_t seed);
// Same, with row r of the leading axis drawn from its own seed.
Tensor logistic_noise_rows(const Shape& shape, std::span<const uint64_t> row_seeds);

// Reparameterised sample mu + s * eps for given standard noise.
Tensor logistic_sample(const Logistic& d, const Tensor& eps);
Tensor logistic_sample(const Logistic& d, uint64_t seed);

// log P(x) for integer x in [0, 255] under a logistic discretised into unit
// bins, with open-ended edge bins. mu and s are in pixel units. Values below
// kLogProbFloor are floored (and receive no gradient).
Tensor discretized_logistic_log_prob(const Logistic& d, const Tensor& x);

// Single-sample KL estimate log q(z) - log p(z), summed over all but the
// leading axis. Shape [N].
Tensor kl_mc(const Logistic& q, const Logistic& p, const Tensor& z);

// Mixture of K logistics. Parameters have shape [N, K, ...] and describe a
// mixture for every element of a tensor of shape [N, ...].
struct LogisticMixture {
  Tensor logits;
  Tensor mu;
  Tensor log_s;
};

// log CDF, log(1 - CDF) and log density of the mixture at x, all computed in
// log space.
struct MixLogTerms {
  Tensor log_cdf;
  Tensor log_sf;
  Tensor log_pdf;
};
MixLogTerms mix_log_terms(const LogisticMixture& m, const Tensor& x);

Tensor mix_log_cdf(const LogisticMixture& m, const Tensor& x);
Tensor mix_log_cdf_deriv(const LogisticMixture& m, const Tensor& x);

// Bisection inverse of the mixture CDF. Not differentiable.
// Throws DomainError for p outside (0, 1).
Tensor mix_log_cdf_inverse(const LogisticMixture& m, const Tensor& p);
// Inverse in the logit domain: solves logit(CDF(x)) = t elementwise, which
// keeps full precision in the tails.
Tensor mix_logit_inverse(const LogisticMixture& m, const Tensor& t);

struct InverseStats {
  int64_t max_iterations = 0;
  int64_t unconverged = 0;
};
// Statistics of the most recent inverse call on this thread.
const InverseStats& last_inverse_stats();

BITGEN_NAMESPACE_END
