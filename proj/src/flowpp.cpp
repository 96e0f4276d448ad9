#include <bitgen/flowpp.hpp>

#include <bitgen/ops.hpp>

#include <cmath>
#include <string>

BITGEN_NAMESPACE_BEGIN

namespace {

constexpr real kLogSMin = -7, kLogSMax = 7;
constexpr real kExitInitScale = real(0.1);

void require_finite(const Tensor& t, const std::string& what) {
  for (real v : t.data())
    if (!std::isfinite(v)) throw NumericError("non-finite value in " + what);
}

void check_image(const Tensor& x, const ModelConfig& c, const char* what) {
  if (x.ndim() != 4 || x.dim(1) != c.channels || x.dim(2) != c.height || x.dim(3) != c.width) {
    throw ShapeError(std::string(what) + ": input " + shape_str(x.shape()) + " does not match the configured image shape");
  }
}

real log_clamp_lo() { return static_cast<real>(std::log(kUniformClamp)); }
real log_clamp_hi() { return static_cast<real>(std::log1p(-kUniformClamp)); }

}  // namespace

Tensor checkerboard_mask(int64_t channels, int64_t height, int64_t width, int parity) {
  Tensor m = Tensor::zeros({1, channels, height, width});
  auto d = m.data();
  for (int64_t c = 0; c < channels; ++c)
    for (int64_t y = 0; y < height; ++y)
      for (int64_t x = 0; x < width; ++x)
        d[(c * height + y) * width + x] = ((y + x) % 2 == parity) ? 1 : 0;
  return m;
}

Tensor channel_mask(int64_t channels, int64_t height, int64_t width, int parity) {
  Tensor m = Tensor::zeros({1, channels, height, width});
  auto d = m.data();
  const int64_t split = (channels + 1) / 2;
  for (int64_t c = 0; c < channels; ++c) {
    const bool first = c < split;
    const real v = (first == (parity == 0)) ? 1 : 0;
    for (int64_t i = 0; i < height * width; ++i) d[c * height * width + i] = v;
  }
  return m;
}

std::vector<Tensor> make_masks(int64_t height, int64_t width, int64_t channels, int64_t count, bool channel_stripes) {
  if (count < 2) throw std::invalid_argument("make_masks: count must be >= 2");
  std::vector<Tensor> out;
  for (int64_t i = 0; i < count; ++i) {
    const int parity = static_cast<int>(i % 2);
    const bool stripe = channel_stripes && channels >= 2 && (i / 2) % 2 == 1;
    out.push_back(stripe ? channel_mask(channels, height, width, parity)
                         : checkerboard_mask(channels, height, width, parity));
  }
  return out;
}

// ---- blocks and couplings --------------------------------------------------------

Tensor FlowBlock::branch(const Tensor& x) const {
  Tensor h = layer_norm(x, *ln_gamma, *ln_beta);
  if (binary_activations) {
    h = conv->forward(ste_sign_activation(h), true);
    return glu(gate->forward(ste_sign_activation(h), true));
  }
  h = conv->forward(elu(h));
  return glu(gate->forward(elu(h)));
}

Tensor FlowBlock::forward(const Tensor& x) const { return x + branch(x); }

Tensor Coupling::hidden(const Tensor& x, const Tensor* cond) const {
  Tensor m = repeat_axis(mask, 0, x.dim(0));
  std::vector<Tensor> parts = {x * m, m};
  if (cond) parts.push_back(*cond);
  Tensor h = entry->forward(concat(parts, 1));
  for (const FlowBlock& b : blocks) h = b.forward(h);
  return h;
}

Coupling::Params Coupling::params(const Tensor& x, const Tensor* cond) const {
  const int64_t n = x.dim(0), c = x.dim(1), hh = x.dim(2), ww = x.dim(3), k = components;
  Tensor o = reshape(exit->forward(elu(hidden(x, cond))), {n, 3 * k + 2, c, hh, ww});
  Params p;
  p.mix.logits = slice(o, 1, 0, k);
  p.mix.mu = slice(o, 1, k, k);
  p.mix.log_s = clamp(slice(o, 1, 2 * k, k), kLogSMin, kLogSMax);
  p.a = mul_scalar(tanh(reshape(slice(o, 1, 3 * k, 1), {n, c, hh, ww})), 2);
  p.b = reshape(slice(o, 1, 3 * k + 1, 1), {n, c, hh, ww});
  return p;
}

std::pair<Tensor, Tensor> Coupling::forward(const Tensor& x, const Tensor* cond) const {
  const Params p = params(x, cond);
  const MixLogTerms t = mix_log_terms(p.mix, x);
  const real lo = log_clamp_lo(), hi = log_clamp_hi();
  Tensor lc = clamp(t.log_cdf, lo, hi);
  Tensor ls = clamp(t.log_sf, lo, hi);
  Tensor y2 = (lc - ls) * exp(p.a) + p.b;
  Tensor m = repeat_axis(mask, 0, x.dim(0));
  Tensor free = add_scalar(neg(m), 1);
  Tensor logdet = sum_rows((t.log_pdf - lc - ls + p.a) * free);
  return {where(m, x, y2), logdet};
}

Tensor Coupling::inverse(const Tensor& y, const Tensor* cond) const {
  NoGradGuard no_grad;
  const Params p = params(y, cond);
  const real lo = log_clamp_lo(), hi = log_clamp_hi();
  Tensor t = clamp((y - p.b) * exp(neg(p.a)), lo - hi, hi - lo);
  Tensor x2 = mix_logit_inverse(p.mix, t);
  if (last_inverse_stats().unconverged > 0) {
    throw NumericError("coupling inverse: bisection did not converge for " +
                       std::to_string(last_inverse_stats().unconverged) + " elements");
  }
  return where(repeat_axis(mask, 0, y.dim(0)), y, x2);
}

FlowResult flow_forward(const std::vector<Coupling>& layers, const Tensor& x, const Tensor* cond) {
  FlowResult r{x, Tensor::zeros({x.dim(0)})};
  for (const Coupling& c : layers) {
    auto [y, ld] = c.forward(r.z, cond);
    r.z = y;
    r.logdet = r.logdet + ld;
  }
  return r;
}

Tensor flow_inverse(const std::vector<Coupling>& layers, const Tensor& z, const Tensor* cond) {
  Tensor x = z;
  for (auto it = layers.rbegin(); it != layers.rend(); ++it) x = it->inverse(x, cond);
  return x;
}

Tensor base_log_prob(const Tensor& z) { return sum_rows(log_sigmoid(z) + log_sigmoid(neg(z))); }

Tensor flow_log_prob(const std::vector<Coupling>& layers, const Tensor& x) {
  const FlowResult r = flow_forward(layers, x);
  return base_log_prob(r.z) + r.logdet;
}

// ---- model ----------------------------------------------------------------------

FlowModel::FlowModel(ModelConfig config) : Model(std::move(config)) {
  const ModelConfig& c = config_;
  build(main_, "main", c.couplings, c.res_channels, 0);
  if (c.variational_dequant) build(dequant_, "deq", c.dequant_couplings, c.dequant_res_channels, c.channels);
}

void FlowModel::build(std::vector<Coupling>& out, const std::string& prefix, int64_t count, int64_t width,
                      int64_t cond_channels) {
  const ModelConfig& c = config_;
  const ConvKind plain = plain_kind(), res = residual_kind();
  const auto masks = make_masks(c.height, c.width, c.channels, count, c.channels >= 2);
  for (int64_t j = 0; j < count; ++j) {
    const std::string p = prefix + std::to_string(j);
    Coupling cp;
    cp.mask = masks[j];
    cp.components = c.components;
    cp.entry = &add_conv(p + ".entry", plain, 2 * c.channels + cond_channels, width, 1);
    if (c.residual) {
      for (int64_t b = 0; b < c.flow_blocks; ++b) {
        const std::string q = p + ".res" + std::to_string(b);
        FlowBlock blk;
        blk.ln_gamma = &add_param(q + ".ln_g", Tensor::ones({width}));
        blk.ln_beta = &add_param(q + ".ln_b", Tensor::zeros({width}));
        blk.conv = &add_conv(q + ".conv", res, width, width, 3);
        blk.gate = &add_conv(q + ".gate", res, width, 2 * width, 1);
        blk.binary_activations = binary_activations();
        cp.blocks.push_back(blk);
      }
    }
    cp.exit = &add_conv(p + ".exit", plain, width, c.channels * (3 * c.components + 2), 1);
    cp.exit->set_init_scale(kExitInitScale);
    out.push_back(std::move(cp));
  }
}

Tensor FlowModel::main_log_prob(const Tensor& log_y, const Tensor& log_rest) {
  Tensor t0 = log_y - log_rest;
  Tensor pre = sum_rows(add_scalar(neg(log_y + log_rest), static_cast<real>(std::log(256.0))));
  const FlowResult r = flow_forward(main_, t0);
  Tensor out = base_log_prob(r.z) + r.logdet + pre;
  require_finite(out, "flow log-likelihood");
  return out;
}

Tensor FlowModel::log_prob_continuous(const Tensor& y) {
  check_image(y, config_, "flow");
  for (real v : y.data())
    if (!(v > 0 && v < 256)) throw DomainError("flow: continuous value " + std::to_string(v) + " outside (0, 256)");
  return main_log_prob(log(y), log(add_scalar(neg(y), 256)));
}

Tensor FlowModel::dequant_objective(const Tensor& x, std::span<const uint64_t> rows) {
  check_image(x, config_, "flow");
  if (static_cast<int64_t>(rows.size()) != x.dim(0)) throw ShapeError("flow: one noise seed per example required");
  for (real v : x.data())
    if (v != std::floor(v)) throw DomainError("flow: pixel value " + std::to_string(v) + " is not an integer");
  const Tensor xs = scale_pixels(x);
  const Tensor rest = add_scalar(neg(x), 255);

  if (!config_.variational_dequant) {
    Tensor u = uniform_rows(x.shape(), 0, 1, rows);
    return main_log_prob(log(x + u), log(rest + add_scalar(neg(u), 1)));
  }
  Tensor eps = logistic_noise_rows(x.shape(), rows);
  const FlowResult r = flow_forward(dequant_, eps, &xs);
  const Tensor& v = r.z;
  Tensor u = sigmoid(v), u_rest = sigmoid(neg(v));
  for (size_t i = 0; i < u.data().size(); ++i) {
    if (!(u.data()[i] > 0 && u_rest.data()[i] > 0)) {
      throw NumericError("dequantisation noise left (0, 1) at element " + std::to_string(i));
    }
  }
  Tensor log_q = base_log_prob(eps) - r.logdet - sum_rows(log_sigmoid(v) + log_sigmoid(neg(v)));
  require_finite(log_q, "dequantisation density");
  return main_log_prob(log(x + u), log(rest + u_rest)) - log_q;
}

Tensor FlowModel::loss(const Tensor& x, std::span<const uint64_t> rows) { return neg(dequant_objective(x, rows)); }

Tensor FlowModel::sample(int64_t n, uint64_t seed) {
  NoGradGuard no_grad;
  const ModelConfig& c = config_;
  Tensor z = logistic_noise({n, c.channels, c.height, c.width}, seed);
  Tensor t0 = flow_inverse(main_, z);
  require_finite(t0, "flow inverse");
  Tensor img = mul_scalar(sigmoid(t0), 256).detach();
  for (real& v : img.data()) v = std::clamp(std::floor(v), real(0), real(255));
  return img;
}

BITGEN_NAMESPACE_END
