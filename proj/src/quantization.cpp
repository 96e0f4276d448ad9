#include <bitgen/quantization.hpp>

#include <bitgen/ops.hpp>

#include <algorithm>
#include <cmath>
#include <iostream>

BITGEN_NAMESPACE_BEGIN

namespace {
thread_local bool t_data_init = false;
thread_local ScaleFlops t_scale_flops;

constexpr real kInitStd = real(0.05);

Tensor trainable(Tensor t) {
  t.requires_grad_(true);
  return t;
}

}  // namespace

ScaleFlops& scale_flops() { return t_scale_flops; }

Tensor ste_sign_weight(const Tensor& v) {
  auto vs = v.data();
  std::vector<real> out(vs.size());
  for (size_t i = 0; i < vs.size(); ++i) out[i] = sign_of(vs[i]);
  return make_result(v.shape(), std::move(out), {v}, "ste_sign_weight", [](TensorImpl& o) {
    auto g = input_grad(o, 0);
    for (size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
  });
}

Tensor ste_sign_activation(const Tensor& x) {
  auto xs = x.data();
  std::vector<real> out(xs.size());
  for (size_t i = 0; i < xs.size(); ++i) out[i] = sign_of(xs[i]);
  return make_result(x.shape(), std::move(out), {x}, "ste_sign_activation", [](TensorImpl& o) {
    auto g = input_grad(o, 0);
    const auto& xin = o.inputs[0]->data;
    for (size_t i = 0; i < g.size(); ++i)
      if (std::abs(xin[i]) <= real(1)) g[i] += o.grad[i];
  });
}

// ---- layers ---------------------------------------------------------------------

BwnLayer::BwnLayer(int64_t in_channels, int64_t out_channels, int64_t kernel, uint64_t seed)
    : v(trainable(randn({out_channels, in_channels, kernel, kernel}, kInitStd, seed))),
      g(trainable(Tensor::ones({out_channels}))),
      b(trainable(Tensor::zeros({out_channels}))) {
  clip_weights(v);
}

Tensor BwnLayer::scale() const {
  // One reciprocal square root for the layer plus one multiply per output.
  const real inv_sqrt_n = real(1) / std::sqrt(static_cast<real>(fan_in()));
  t_scale_flops.bwn += 2 + out_channels();
  return mul_scalar(g, inv_sqrt_n);
}

WnLayer::WnLayer(int64_t in_channels, int64_t out_channels, int64_t kernel, uint64_t seed)
    : v(trainable(randn({out_channels, in_channels, kernel, kernel}, kInitStd, seed))),
      g(trainable(Tensor::ones({out_channels}))),
      b(trainable(Tensor::zeros({out_channels}))) {}

Tensor WnLayer::weight() const {
  const int64_t k = out_channels(), n = fan_in();
  auto vs = v.data();
  auto gs = g.data();
  std::vector<real> w(vs.size()), inv_norm(static_cast<size_t>(k));
  for (int64_t r = 0; r < k; ++r) {
    real ss = 0;
    for (int64_t i = 0; i < n; ++i) ss += vs[r * n + i] * vs[r * n + i];
    inv_norm[r] = real(1) / std::sqrt(ss);
    for (int64_t i = 0; i < n; ++i) w[r * n + i] = vs[r * n + i] * gs[r] * inv_norm[r];
  }
  t_scale_flops.wn += k * (2 * n + 2);
  return make_result(v.shape(), std::move(w), {v, g}, "weight_norm",
                     [k, n, inv_norm = std::move(inv_norm)](TensorImpl& o) {
                       const auto& vv = o.inputs[0]->data;
                       const auto& gv = o.inputs[1]->data;
                       auto dv = input_grad(o, 0);
                       auto dg = input_grad(o, 1);
                       for (int64_t r = 0; r < k; ++r) {
                         real vdw = 0;
                         for (int64_t i = 0; i < n; ++i) vdw += vv[r * n + i] * o.grad[r * n + i];
                         const real inv = inv_norm[r];
                         if (!dg.empty()) dg[r] += vdw * inv;
                         if (dv.empty()) continue;
                         const real c = gv[r] * inv;
                         const real proj = vdw * inv * inv;
                         for (int64_t i = 0; i < n; ++i)
                           dv[r * n + i] += c * (o.grad[r * n + i] - proj * vv[r * n + i]);
                       }
                     });
}

BatchNormState::BatchNormState(int64_t channels)
    : scale(trainable(Tensor::ones({channels}))),
      shift(trainable(Tensor::zeros({channels}))),
      running_mean(Tensor::zeros({channels})),
      running_var(Tensor::ones({channels})) {}

// ---- forward ops -----------------------------------------------------------------

Tensor binary_weight_conv(const Tensor& x, const Tensor& v, int pad, bool binary_input) {
  const detail::ConvGeometry g = detail::conv_geometry(x.shape(), v.shape(), pad);
  BitTensor wb = BitTensor::pack_signs(v.shape(), v.data());
  Tensor y;
  if (binary_input) {
    y = binary_conv2d(BitTensor::pack(x), wb, pad).to_tensor();
  } else {
    NoGradGuard no_grad;
    std::vector<real> signs(v.data().size());
    for (size_t i = 0; i < signs.size(); ++i) signs[i] = sign_of(v.data()[i]);
    y = conv2d(x, Tensor(v.shape(), std::move(signs)), pad);
  }
  auto ys = y.data();
  return make_result(y.shape(), std::vector<real>(ys.begin(), ys.end()), {x, v}, "binary_weight_conv",
                     [g](TensorImpl& o) {
                       auto gx = input_grad(o, 0);
                       if (!gx.empty()) {
                         const auto& vv = o.inputs[1]->data;
                         std::vector<real> signs(vv.size());
                         for (size_t i = 0; i < vv.size(); ++i) signs[i] = sign_of(vv[i]);
                         auto dx = detail::conv2d_grad_input(o.grad, signs, g);
                         for (size_t i = 0; i < dx.size(); ++i) gx[i] += dx[i];
                       }
                       auto gv = input_grad(o, 1);
                       if (!gv.empty()) {
                         auto dw = detail::conv2d_grad_weight(o.grad, o.inputs[0]->data, g);
                         for (size_t i = 0; i < dw.size(); ++i) gv[i] += dw[i];
                       }
                     });
}

Tensor bwn_conv_forward(const Tensor& x, const BwnLayer& layer, int pad, bool binary_input) {
  Tensor y = binary_weight_conv(x, layer.v, pad, binary_input);
  return bias_add(channel_mul(y, layer.scale()), layer.b);
}

Tensor wn_conv_forward(const Tensor& x, const WnLayer& layer, int pad) {
  return bias_add(conv2d(x, layer.weight(), pad), layer.b);
}

Tensor batch_norm_forward(const Tensor& x, BatchNormState& state, bool training) {
  if (x.ndim() != 4 || x.dim(1) != state.scale.dim(0)) {
    throw ShapeError("batch_norm: input " + shape_str(x.shape()) + " does not match state");
  }
  const int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (training && n < 2) throw std::invalid_argument("batch_norm: training mode needs a batch of at least 2");
  auto xs = x.data();
  std::vector<real> mean(c), rstd(c);
  const int64_t count = n * hw;
  auto rm = state.running_mean.data();
  auto rv = state.running_var.data();
  for (int64_t ch = 0; ch < c; ++ch) {
    if (training) {
      double s = 0, ss = 0;
      for (int64_t b = 0; b < n; ++b)
        for (int64_t p = 0; p < hw; ++p) s += xs[(b * c + ch) * hw + p];
      const double mu = s / count;
      for (int64_t b = 0; b < n; ++b)
        for (int64_t p = 0; p < hw; ++p) {
          const double d = xs[(b * c + ch) * hw + p] - mu;
          ss += d * d;
        }
      const double var = ss / count;
      mean[ch] = static_cast<real>(mu);
      rstd[ch] = static_cast<real>(1.0 / std::sqrt(var + state.eps));
      rm[ch] = state.momentum * rm[ch] + (1 - state.momentum) * static_cast<real>(mu);
      rv[ch] = state.momentum * rv[ch] + (1 - state.momentum) * static_cast<real>(var);
    } else {
      mean[ch] = rm[ch];
      rstd[ch] = real(1) / std::sqrt(rv[ch] + state.eps);
    }
  }
  std::vector<real> xhat(xs.size()), out(xs.size());
  auto sc = state.scale.data();
  auto sh = state.shift.data();
  for (int64_t b = 0; b < n; ++b)
    for (int64_t ch = 0; ch < c; ++ch)
      for (int64_t p = 0; p < hw; ++p) {
        const size_t k = (b * c + ch) * hw + p;
        xhat[k] = (xs[k] - mean[ch]) * rstd[ch];
        out[k] = xhat[k] * sc[ch] + sh[ch];
      }
  return make_result(
      x.shape(), std::move(out), {x, state.scale, state.shift}, "batch_norm",
      [n, c, hw, training, xhat = std::move(xhat), rstd = std::move(rstd)](TensorImpl& o) {
        const auto& scv = o.inputs[1]->data;
        auto gx = input_grad(o, 0);
        auto gs = input_grad(o, 1);
        auto gb = input_grad(o, 2);
        const real inv_count = real(1) / static_cast<real>(n * hw);
        for (int64_t ch = 0; ch < c; ++ch) {
          real sum_g = 0, sum_gx = 0;
          for (int64_t b = 0; b < n; ++b)
            for (int64_t p = 0; p < hw; ++p) {
              const size_t k = (b * c + ch) * hw + p;
              sum_g += o.grad[k];
              sum_gx += o.grad[k] * xhat[k];
            }
          if (!gs.empty()) gs[ch] += sum_gx;
          if (!gb.empty()) gb[ch] += sum_g;
          if (gx.empty()) continue;
          const real f = scv[ch] * rstd[ch];
          for (int64_t b = 0; b < n; ++b)
            for (int64_t p = 0; p < hw; ++p) {
              const size_t k = (b * c + ch) * hw + p;
              gx[k] += training ? f * (o.grad[k] - inv_count * sum_g - xhat[k] * inv_count * sum_gx)
                                : f * o.grad[k];
            }
        }
      });
}

void clip_weights(Tensor& v) {
  for (real& x : v.data()) x = std::clamp(x, real(-1), real(1));
}

void clip_weights(BwnLayer& layer) { clip_weights(layer.v); }

// ---- initialisation ----------------------------------------------------------------

ChannelStats channel_stats(const Tensor& y) {
  const int64_t n = y.dim(0), c = y.dim(1), inner = y.numel() / std::max<int64_t>(1, n * c);
  ChannelStats s{std::vector<double>(c, 0.0), std::vector<double>(c, 0.0)};
  auto ys = y.data();
  const double count = static_cast<double>(n * inner);
  for (int64_t ch = 0; ch < c; ++ch) {
    double acc = 0;
    for (int64_t b = 0; b < n; ++b)
      for (int64_t i = 0; i < inner; ++i) acc += ys[(b * c + ch) * inner + i];
    const double mu = acc / count;
    double ss = 0;
    for (int64_t b = 0; b < n; ++b)
      for (int64_t i = 0; i < inner; ++i) {
        const double d = ys[(b * c + ch) * inner + i] - mu;
        ss += d * d;
      }
    s.mean[ch] = mu;
    s.std[ch] = std::sqrt(ss / count);
  }
  return s;
}

namespace {

void require_init_samples(const Tensor& batch) {
  if (batch.ndim() != 4 || batch.dim(0) * batch.dim(2) * batch.dim(3) < 64) {
    throw std::invalid_argument("data-dependent init needs at least 64 samples per channel, got batch " +
                                shape_str(batch.shape()));
  }
}

// Given outputs computed with g = 1 and b = 0, standardises each channel.
int standardise(const Tensor& unit_output, Tensor& g, Tensor& b) {
  const ChannelStats s = channel_stats(unit_output);
  int capped = 0;
  auto gs = g.data();
  auto bs = b.data();
  for (size_t ch = 0; ch < s.mean.size(); ++ch) {
    real gain;
    if (s.std[ch] > 1e-8) {
      gain = static_cast<real>(1.0 / s.std[ch]);
    } else {
      gain = kInitGainCap;
      ++capped;
    }
    gs[ch] = gain;
    bs[ch] = static_cast<real>(-s.mean[ch]) * gain;
  }
  if (capped > 0) {
    std::cerr << "warning: data-dependent init found " << capped
              << " zero-variance channel(s); gain capped at " << kInitGainCap << '\n';
  }
  return capped;
}

}  // namespace

int data_dependent_init(BwnLayer& layer, const Tensor& batch, int pad, bool binary_input) {
  require_init_samples(batch);
  NoGradGuard no_grad;
  std::fill(layer.g.data().begin(), layer.g.data().end(), real(1));
  std::fill(layer.b.data().begin(), layer.b.data().end(), real(0));
  Tensor y = bwn_conv_forward(batch, layer, pad, binary_input);
  return standardise(y, layer.g, layer.b);
}

int data_dependent_init(WnLayer& layer, const Tensor& batch, int pad) {
  require_init_samples(batch);
  NoGradGuard no_grad;
  std::fill(layer.g.data().begin(), layer.g.data().end(), real(1));
  std::fill(layer.b.data().begin(), layer.b.data().end(), real(0));
  Tensor y = wn_conv_forward(batch, layer, pad);
  return standardise(y, layer.g, layer.b);
}

DataInitScope::DataInitScope() { t_data_init = true; }
DataInitScope::~DataInitScope() { t_data_init = false; }
bool DataInitScope::active() { return t_data_init; }

// ---- Conv --------------------------------------------------------------------------

Conv::Conv(ConvKind kind, int64_t in_channels, int64_t out_channels, int64_t kernel, uint64_t seed)
    : kind_(kind), pad_(static_cast<int>(kernel / 2)) {
  switch (kind) {
    case ConvKind::Wn:
      wn_ = WnLayer(in_channels, out_channels, kernel, seed);
      break;
    case ConvKind::Bwn:
      bwn_ = BwnLayer(in_channels, out_channels, kernel, seed);
      break;
    case ConvKind::BinaryBatchNorm:
      bwn_ = BwnLayer(in_channels, out_channels, kernel, seed);
      bn_ = BatchNormState(out_channels);
      break;
    case ConvKind::FloatBatchNorm:
      wn_ = WnLayer(in_channels, out_channels, kernel, seed);
      bn_ = BatchNormState(out_channels);
      break;
  }
}

int64_t Conv::out_channels() const {
  return (kind_ == ConvKind::Wn || kind_ == ConvKind::FloatBatchNorm) ? wn_.out_channels() : bwn_.out_channels();
}

Tensor Conv::forward(const Tensor& x, bool binary_input) {
  switch (kind_) {
    case ConvKind::Wn:
      if (DataInitScope::active() && data_init_enabled_) {
        data_dependent_init(wn_, x, pad_);
        scale_init(wn_.g, wn_.b);
      }
      return wn_conv_forward(x, wn_, pad_);
    case ConvKind::Bwn:
      if (DataInitScope::active() && data_init_enabled_) {
        data_dependent_init(bwn_, x, pad_, binary_input);
        scale_init(bwn_.g, bwn_.b);
      }
      return bwn_conv_forward(x, bwn_, pad_, binary_input);
    case ConvKind::BinaryBatchNorm:
      return batch_norm_forward(binary_weight_conv(x, bwn_.v, pad_, binary_input), bn_, training_);
    case ConvKind::FloatBatchNorm:
      return batch_norm_forward(conv2d(x, wn_.v, pad_), bn_, training_);
  }
  throw std::logic_error("unknown conv kind");
}

void Conv::scale_init(Tensor& g, Tensor& b) const {
  if (init_scale_ == 1) return;
  for (real& v : g.data()) v *= init_scale_;
  for (real& v : b.data()) v *= init_scale_;
}

void Conv::set_init_scale(real scale) {
  init_scale_ = scale;
  if (kind_ == ConvKind::BinaryBatchNorm || kind_ == ConvKind::FloatBatchNorm) {
    std::fill(bn_.scale.data().begin(), bn_.scale.data().end(), scale);
  }
}

void Conv::zero_gain_and_bias() {
  auto zero = [](Tensor& t) { std::fill(t.data().begin(), t.data().end(), real(0)); };
  switch (kind_) {
    case ConvKind::Wn:
      zero(wn_.g);
      zero(wn_.b);
      break;
    case ConvKind::Bwn:
      zero(bwn_.g);
      zero(bwn_.b);
      break;
    case ConvKind::BinaryBatchNorm:
    case ConvKind::FloatBatchNorm:
      zero(bn_.scale);
      zero(bn_.shift);
      break;
  }
}

void Conv::collect(const std::string& prefix, ParamList& out) {
  switch (kind_) {
    case ConvKind::Wn:
      out.push_back({prefix + ".v", wn_.v, false, true});
      out.push_back({prefix + ".g", wn_.g, false, true});
      out.push_back({prefix + ".b", wn_.b, false, true});
      break;
    case ConvKind::Bwn:
      out.push_back({prefix + ".v", bwn_.v, true, true});
      out.push_back({prefix + ".g", bwn_.g, false, true});
      out.push_back({prefix + ".b", bwn_.b, false, true});
      break;
    case ConvKind::BinaryBatchNorm:
    case ConvKind::FloatBatchNorm:
      out.push_back({prefix + ".v", raw_weight(), kind_ == ConvKind::BinaryBatchNorm, true});
      out.push_back({prefix + ".bn_scale", bn_.scale, false, true});
      out.push_back({prefix + ".bn_shift", bn_.shift, false, true});
      out.push_back({prefix + ".bn_mean", bn_.running_mean, false, false});
      out.push_back({prefix + ".bn_var", bn_.running_var, false, false});
      break;
  }
}

BITGEN_NAMESPACE_END
