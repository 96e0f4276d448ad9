#include <bitgen/ops.hpp>

#include <bitgen/parallel.hpp>

#include <cblas-openblas.h>


#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

BITGEN_NAMESPACE_BEGIN

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

template <class F, class D>
Tensor unary(const Tensor& x, const char* op, F f, D deriv) {
  auto xs = x.data();
  std::vector<real> out(xs.size());
  for (size_t i = 0; i < xs.size(); ++i) out[i] = f(xs[i]);
  return make_result(x.shape(), std::move(out), {x}, op, [deriv](TensorImpl& o) {
    auto gx = input_grad(o, 0);
    if (gx.empty()) return;
    const auto& xin = o.inputs[0]->data;
    for (size_t i = 0; i < gx.size(); ++i) gx[i] += o.grad[i] * deriv(xin[i], o.data[i]);
  });
}

real stable_sigmoid(real x) {
  if (x >= 0) return real(1) / (real(1) + std::exp(-x));
  real e = std::exp(x);
  return e / (real(1) + e);
}

real stable_softplus(real x) { return std::max(x, real(0)) + std::log1p(std::exp(-std::abs(x))); }

// Splits a shape around `axis` into (outer, extent, inner).
struct AxisSplit {
  int64_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, size_t axis) {
  if (axis >= s.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  AxisSplit r;
  for (size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.extent = s[axis];
  for (size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

// out[i] = x[index[i]]; gradient scatters back.
Tensor gather(const Tensor& x, Shape shape, std::vector<int64_t> index, const char* op) {
  auto xs = x.data();
  std::vector<real> out(index.size());
  for (size_t i = 0; i < index.size(); ++i) out[i] = xs[index[i]];
  return make_result(std::move(shape), std::move(out), {x}, op,
                     [index = std::move(index)](TensorImpl& o) {
                       auto gx = input_grad(o, 0);
                       if (gx.empty()) return;
                       for (size_t i = 0; i < index.size(); ++i) gx[index[i]] += o.grad[i];
                     });
}

void require_nchw(const Tensor& x, const char* op) {
  if (x.ndim() != 4) throw ShapeError(std::string(op) + ": expected [N,C,H,W], got " + shape_str(x.shape()));
}

void require_channel_vector(const Tensor& x, const Tensor& v, const char* op) {
  if (x.ndim() < 2 || v.ndim() != 1 || v.dim(0) != x.dim(1)) {
    throw ShapeError(std::string(op) + ": channel vector " + shape_str(v.shape()) + " does not match " +
                     shape_str(x.shape()));
  }
}

}  // namespace

// ---- random ------------------------------------------------------------------

uint64_t mix_seed(uint64_t a, uint64_t b) {
  uint64_t z = a + b + 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Tensor randn(Shape shape, real std, uint64_t seed) {
  if (shape.empty()) throw ShapeError("randn: empty shape");
  if (!(std >= 0)) throw DomainError("randn: negative standard deviation");
  Tensor t(std::move(shape));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  for (real& v : t.data()) v = static_cast<real>(dist(rng) * std);
  return t;
}

Tensor uniform(Shape shape, real lo, real hi, uint64_t seed) {
  if (shape.empty()) throw ShapeError("uniform: empty shape");
  Tensor t(std::move(shape));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  for (real& v : t.data()) v = static_cast<real>(dist(rng));
  return t;
}

Tensor uniform_rows(Shape shape, real lo, real hi, std::span<const uint64_t> row_seeds) {
  if (shape.empty() || shape[0] != static_cast<int64_t>(row_seeds.size())) {
    throw ShapeError("uniform_rows: need one seed per leading row");
  }
  Tensor t(std::move(shape));
  const int64_t row = t.numel() / std::max<int64_t>(1, t.dim(0));
  auto d = t.data();
  std::uniform_real_distribution<double> dist(lo, hi);
  for (size_t r = 0; r < row_seeds.size(); ++r) {
    std::mt19937_64 rng(row_seeds[r]);
    for (int64_t i = 0; i < row; ++i) d[r * row + i] = static_cast<real>(dist(rng));
  }
  return t;
}

// ---- elementwise ---------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  auto as = a.data(), bs = b.data();
  std::vector<real> out(as.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = as[i] + bs[i];
  return make_result(a.shape(), std::move(out), {a, b}, "add", [](TensorImpl& o) {
    for (size_t k = 0; k < 2; ++k) {
      auto g = input_grad(o, k);
      for (size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  auto as = a.data(), bs = b.data();
  std::vector<real> out(as.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = as[i] - bs[i];
  return make_result(a.shape(), std::move(out), {a, b}, "sub", [](TensorImpl& o) {
    auto ga = input_grad(o, 0);
    for (size_t i = 0; i < ga.size(); ++i) ga[i] += o.grad[i];
    auto gb = input_grad(o, 1);
    for (size_t i = 0; i < gb.size(); ++i) gb[i] -= o.grad[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  auto as = a.data(), bs = b.data();
  std::vector<real> out(as.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = as[i] * bs[i];
  return make_result(a.shape(), std::move(out), {a, b}, "mul", [](TensorImpl& o) {
    const auto& av = o.inputs[0]->data;
    const auto& bv = o.inputs[1]->data;
    auto ga = input_grad(o, 0);
    for (size_t i = 0; i < ga.size(); ++i) ga[i] += o.grad[i] * bv[i];
    auto gb = input_grad(o, 1);
    for (size_t i = 0; i < gb.size(); ++i) gb[i] += o.grad[i] * av[i];
  });
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "div");
  auto as = a.data(), bs = b.data();
  std::vector<real> out(as.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = as[i] / bs[i];
  return make_result(a.shape(), std::move(out), {a, b}, "div", [](TensorImpl& o) {
    const auto& bv = o.inputs[1]->data;
    auto ga = input_grad(o, 0);
    for (size_t i = 0; i < ga.size(); ++i) ga[i] += o.grad[i] / bv[i];
    auto gb = input_grad(o, 1);
    for (size_t i = 0; i < gb.size(); ++i) gb[i] -= o.grad[i] * o.data[i] / bv[i];
  });
}

Tensor neg(const Tensor& x) {
  return unary(x, "neg", [](real v) { return -v; }, [](real, real) { return real(-1); });
}

Tensor add_scalar(const Tensor& x, real c) {
  return unary(x, "add_scalar", [c](real v) { return v + c; }, [](real, real) { return real(1); });
}

Tensor mul_scalar(const Tensor& x, real c) {
  return unary(x, "mul_scalar", [c](real v) { return v * c; }, [c](real, real) { return c; });
}

Tensor exp(const Tensor& x) {
  return unary(x, "exp", [](real v) { return std::exp(v); }, [](real, real y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary(x, "log", [](real v) { return std::log(v); }, [](real v, real) { return real(1) / v; });
}

Tensor tanh(const Tensor& x) {
  return unary(x, "tanh", [](real v) { return std::tanh(v); }, [](real, real y) { return real(1) - y * y; });
}

Tensor square(const Tensor& x) {
  return unary(x, "square", [](real v) { return v * v; }, [](real v, real) { return real(2) * v; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(x, "sigmoid", stable_sigmoid, [](real, real y) { return y * (real(1) - y); });
}

Tensor log_sigmoid(const Tensor& x) {
  return unary(
      x, "log_sigmoid", [](real v) { return -stable_softplus(-v); },
      [](real v, real) { return stable_sigmoid(-v); });
}

Tensor softplus(const Tensor& x) {
  return unary(x, "softplus", stable_softplus, [](real v, real) { return stable_sigmoid(v); });
}

Tensor elu(const Tensor& x) {
  return unary(
      x, "elu", [](real v) { return v > 0 ? v : std::expm1(v); },
      [](real v, real y) { return v > 0 ? real(1) : y + real(1); });
}

Tensor logit(const Tensor& p) {
  for (real v : p.data()) {
    if (!(v > 0 && v < 1)) throw DomainError("logit: argument outside (0, 1): " + std::to_string(v));
  }
  return unary(
      p, "logit", [](real v) { return std::log(v) - std::log1p(-v); },
      [](real v, real) { return real(1) / (v * (real(1) - v)); });
}

Tensor clamp(const Tensor& x, real lo, real hi) {
  return unary(
      x, "clamp", [lo, hi](real v) { return std::clamp(v, lo, hi); },
      [lo, hi](real v, real) { return (v >= lo && v <= hi) ? real(1) : real(0); });
}

Tensor where(const Tensor& mask, const Tensor& a, const Tensor& b) {
  require_same_shape(mask, a, "where");
  require_same_shape(a, b, "where");
  auto ms = mask.data(), as = a.data(), bs = b.data();
  std::vector<real> out(as.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = ms[i] != 0 ? as[i] : bs[i];
  std::vector<real> m(ms.begin(), ms.end());
  return make_result(a.shape(), std::move(out), {a, b}, "where", [m = std::move(m)](TensorImpl& o) {
    auto ga = input_grad(o, 0);
    for (size_t i = 0; i < ga.size(); ++i)
      if (m[i] != 0) ga[i] += o.grad[i];
    auto gb = input_grad(o, 1);
    for (size_t i = 0; i < gb.size(); ++i)
      if (m[i] == 0) gb[i] += o.grad[i];
  });
}

// ---- reductions and shape ----------------------------------------------------------

Tensor sum(const Tensor& x) {
  double acc = 0;
  for (real v : x.data()) acc += v;
  return make_result(Shape{}, {static_cast<real>(acc)}, {x}, "sum", [](TensorImpl& o) {
    auto g = input_grad(o, 0);
    for (real& v : g) v += o.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("mean of empty tensor");
  return mul_scalar(sum(x), real(1) / static_cast<real>(x.numel()));
}

Tensor sum_rows(const Tensor& x) {
  if (x.ndim() < 1) throw ShapeError("sum_rows: scalar input");
  const int64_t n = x.dim(0);
  const int64_t row = n == 0 ? 0 : x.numel() / n;
  auto xs = x.data();
  std::vector<real> out(n);
  for (int64_t r = 0; r < n; ++r) {
    double acc = 0;
    for (int64_t i = 0; i < row; ++i) acc += xs[r * row + i];
    out[r] = static_cast<real>(acc);
  }
  return make_result(Shape{n}, std::move(out), {x}, "sum_rows", [row](TensorImpl& o) {
    auto g = input_grad(o, 0);
    if (g.empty()) return;
    for (size_t r = 0; r < o.grad.size(); ++r)
      for (int64_t i = 0; i < row; ++i) g[r * row + i] += o.grad[r];
  });
}

Tensor log_sum_exp(const Tensor& x, size_t axis) {
  const AxisSplit s = split_axis(x.shape(), axis);
  Shape shape = x.shape();
  shape[axis] = 1;
  auto xs = x.data();
  std::vector<real> out(static_cast<size_t>(s.outer * s.inner));
  for (int64_t o = 0; o < s.outer; ++o) {
    for (int64_t i = 0; i < s.inner; ++i) {
      real m = -std::numeric_limits<real>::infinity();
      for (int64_t k = 0; k < s.extent; ++k) m = std::max(m, xs[(o * s.extent + k) * s.inner + i]);
      real acc = 0;
      if (std::isfinite(m)) {
        for (int64_t k = 0; k < s.extent; ++k) acc += std::exp(xs[(o * s.extent + k) * s.inner + i] - m);
        out[o * s.inner + i] = m + std::log(acc);
      } else {
        out[o * s.inner + i] = m;
      }
    }
  }
  return make_result(std::move(shape), std::move(out), {x}, "log_sum_exp", [s](TensorImpl& o) {
    auto g = input_grad(o, 0);
    if (g.empty()) return;
    const auto& xin = o.inputs[0]->data;
    for (int64_t a = 0; a < s.outer; ++a)
      for (int64_t k = 0; k < s.extent; ++k)
        for (int64_t i = 0; i < s.inner; ++i) {
          const size_t src = (a * s.extent + k) * s.inner + i;
          const size_t dst = a * s.inner + i;
          g[src] += o.grad[dst] * std::exp(xin[src] - o.data[dst]);
        }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  auto xs = x.data();
  return make_result(std::move(shape), std::vector<real>(xs.begin(), xs.end()), {x}, "reshape",
                     [](TensorImpl& o) {
                       auto g = input_grad(o, 0);
                       for (size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                     });
}

Tensor slice(const Tensor& x, size_t axis, int64_t start, int64_t length) {
  const AxisSplit s = split_axis(x.shape(), axis);
  if (start < 0 || length < 0 || start + length > s.extent) {
    throw ShapeError("slice out of range on axis " + std::to_string(axis) + " of " + shape_str(x.shape()));
  }
  Shape shape = x.shape();
  shape[axis] = length;
  std::vector<int64_t> index;
  index.reserve(static_cast<size_t>(s.outer * length * s.inner));
  for (int64_t o = 0; o < s.outer; ++o)
    for (int64_t k = 0; k < length; ++k)
      for (int64_t i = 0; i < s.inner; ++i) index.push_back((o * s.extent + start + k) * s.inner + i);
  return gather(x, std::move(shape), std::move(index), "slice");
}

Tensor concat(const std::vector<Tensor>& parts, size_t axis) {
  if (parts.empty()) throw ShapeError("concat of nothing");
  Shape shape = parts[0].shape();
  if (axis >= shape.size()) throw ShapeError("concat axis out of range");
  int64_t total = 0;
  for (const auto& p : parts) {
    Shape a = p.shape(), b = shape;
    a[axis] = b[axis] = 0;
    if (a != b) throw ShapeError("concat: incompatible " + shape_str(p.shape()) + " vs " + shape_str(shape));
    total += p.dim(axis);
  }
  shape[axis] = total;
  const AxisSplit s = split_axis(shape, axis);
  std::vector<real> out(static_cast<size_t>(shape_numel(shape)));
  std::vector<int64_t> offsets;
  int64_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const int64_t ext = p.dim(axis);
    auto ps = p.data();
    for (int64_t o = 0; o < s.outer; ++o)
      for (int64_t k = 0; k < ext; ++k)
        std::copy_n(ps.begin() + (o * ext + k) * s.inner, s.inner,
                    out.begin() + (o * s.extent + off + k) * s.inner);
    off += ext;
  }
  return make_result(std::move(shape), std::move(out), parts, "concat",
                     [s, offsets = std::move(offsets)](TensorImpl& o) {
                       for (size_t pi = 0; pi < o.inputs.size(); ++pi) {
                         auto g = input_grad(o, pi);
                         if (g.empty()) continue;
                         const int64_t ext = static_cast<int64_t>(g.size()) / (s.outer * s.inner);
                         for (int64_t a = 0; a < s.outer; ++a)
                           for (int64_t k = 0; k < ext; ++k)
                             for (int64_t i = 0; i < s.inner; ++i)
                               g[(a * ext + k) * s.inner + i] +=
                                   o.grad[(a * s.extent + offsets[pi] + k) * s.inner + i];
                       }
                     });
}

Tensor repeat_axis(const Tensor& x, size_t axis, int64_t count) {
  const AxisSplit s = split_axis(x.shape(), axis);
  if (s.extent != 1) throw ShapeError("repeat_axis: axis extent must be 1, got " + shape_str(x.shape()));
  Shape shape = x.shape();
  shape[axis] = count;
  std::vector<int64_t> index;
  index.reserve(static_cast<size_t>(s.outer * count * s.inner));
  for (int64_t o = 0; o < s.outer; ++o)
    for (int64_t k = 0; k < count; ++k)
      for (int64_t i = 0; i < s.inner; ++i) index.push_back(o * s.inner + i);
  return gather(x, std::move(shape), std::move(index), "repeat_axis");
}

Tensor space_to_depth(const Tensor& x) {
  require_nchw(x, "space_to_depth");
  const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 || w % 2) throw ShapeError("space_to_depth: odd spatial extent " + shape_str(x.shape()));
  const int64_t oh = h / 2, ow = w / 2;
  std::vector<int64_t> index;
  index.reserve(static_cast<size_t>(x.numel()));
  for (int64_t b = 0; b < n; ++b)
    for (int64_t ch = 0; ch < c; ++ch)
      for (int64_t q = 0; q < 4; ++q)
        for (int64_t i = 0; i < oh; ++i)
          for (int64_t j = 0; j < ow; ++j)
            index.push_back(((b * c + ch) * h + 2 * i + q / 2) * w + 2 * j + q % 2);
  return gather(x, Shape{n, 4 * c, oh, ow}, std::move(index), "space_to_depth");
}

Tensor depth_to_space(const Tensor& x) {
  require_nchw(x, "depth_to_space");
  const int64_t n = x.dim(0), c4 = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (c4 % 4) throw ShapeError("depth_to_space: channels not divisible by 4");
  const int64_t c = c4 / 4;
  std::vector<int64_t> index;
  index.reserve(static_cast<size_t>(x.numel()));
  for (int64_t b = 0; b < n; ++b)
    for (int64_t ch = 0; ch < c; ++ch)
      for (int64_t y = 0; y < 2 * h; ++y)
        for (int64_t xx = 0; xx < 2 * w; ++xx) {
          const int64_t q = (y % 2) * 2 + xx % 2;
          index.push_back(((b * c4 + ch * 4 + q) * h + y / 2) * w + xx / 2);
        }
  return gather(x, Shape{n, c, 2 * h, 2 * w}, std::move(index), "depth_to_space");
}

// ---- channel-wise --------------------------------------------------------------------

Tensor bias_add(const Tensor& x, const Tensor& bias) {
  require_channel_vector(x, bias, "bias_add");
  const AxisSplit s = split_axis(x.shape(), 1);
  auto xs = x.data(), bs = bias.data();
  std::vector<real> out(xs.size());
  for (int64_t o = 0; o < s.outer; ++o)
    for (int64_t c = 0; c < s.extent; ++c)
      for (int64_t i = 0; i < s.inner; ++i) {
        const size_t k = (o * s.extent + c) * s.inner + i;
        out[k] = xs[k] + bs[c];
      }
  return make_result(x.shape(), std::move(out), {x, bias}, "bias_add", [s](TensorImpl& o) {
    auto gx = input_grad(o, 0);
    for (size_t i = 0; i < gx.size(); ++i) gx[i] += o.grad[i];
    auto gb = input_grad(o, 1);
    if (gb.empty()) return;
    for (int64_t a = 0; a < s.outer; ++a)
      for (int64_t c = 0; c < s.extent; ++c) {
        real acc = 0;
        for (int64_t i = 0; i < s.inner; ++i) acc += o.grad[(a * s.extent + c) * s.inner + i];
        gb[c] += acc;
      }
  });
}

Tensor channel_mul(const Tensor& x, const Tensor& scale) {
  require_channel_vector(x, scale, "channel_mul");
  const AxisSplit s = split_axis(x.shape(), 1);
  auto xs = x.data(), ss = scale.data();
  std::vector<real> out(xs.size());
  for (int64_t o = 0; o < s.outer; ++o)
    for (int64_t c = 0; c < s.extent; ++c)
      for (int64_t i = 0; i < s.inner; ++i) {
        const size_t k = (o * s.extent + c) * s.inner + i;
        out[k] = xs[k] * ss[c];
      }
  return make_result(x.shape(), std::move(out), {x, scale}, "channel_mul", [s](TensorImpl& o) {
    const auto& xv = o.inputs[0]->data;
    const auto& sv = o.inputs[1]->data;
    auto gx = input_grad(o, 0);
    auto gs = input_grad(o, 1);
    for (int64_t a = 0; a < s.outer; ++a)
      for (int64_t c = 0; c < s.extent; ++c) {
        real acc = 0;
        for (int64_t i = 0; i < s.inner; ++i) {
          const size_t k = (a * s.extent + c) * s.inner + i;
          if (!gx.empty()) gx[k] += o.grad[k] * sv[c];
          acc += o.grad[k] * xv[k];
        }
        if (!gs.empty()) gs[c] += acc;
      }
  });
}

Tensor glu(const Tensor& x) {
  if (x.ndim() < 2 || x.dim(1) % 2) throw ShapeError("glu: channel count must be even, got " + shape_str(x.shape()));
  const int64_t half = x.dim(1) / 2;
  return mul(slice(x, 1, 0, half), sigmoid(slice(x, 1, half, half)));
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, real eps) {
  require_channel_vector(x, gamma, "layer_norm");
  require_channel_vector(x, beta, "layer_norm");
  const AxisSplit s = split_axis(x.shape(), 1);
  auto xs = x.data(), gs = gamma.data(), bs = beta.data();
  std::vector<real> out(xs.size()), xhat(xs.size()), rstd(static_cast<size_t>(s.outer * s.inner));
  const real inv_c = real(1) / static_cast<real>(s.extent);
  for (int64_t o = 0; o < s.outer; ++o)
    for (int64_t i = 0; i < s.inner; ++i) {
      real mu = 0;
      for (int64_t c = 0; c < s.extent; ++c) mu += xs[(o * s.extent + c) * s.inner + i];
      mu *= inv_c;
      real var = 0;
      for (int64_t c = 0; c < s.extent; ++c) {
        const real d = xs[(o * s.extent + c) * s.inner + i] - mu;
        var += d * d;
      }
      var *= inv_c;
      const real r = real(1) / std::sqrt(var + eps);
      rstd[o * s.inner + i] = r;
      for (int64_t c = 0; c < s.extent; ++c) {
        const size_t k = (o * s.extent + c) * s.inner + i;
        xhat[k] = (xs[k] - mu) * r;
        out[k] = xhat[k] * gs[c] + bs[c];
      }
    }
  return make_result(
      x.shape(), std::move(out), {x, gamma, beta}, "layer_norm",
      [s, inv_c, xhat = std::move(xhat), rstd = std::move(rstd)](TensorImpl& o) {
        const auto& gv = o.inputs[1]->data;
        auto gx = input_grad(o, 0);
        auto gg = input_grad(o, 1);
        auto gb = input_grad(o, 2);
        for (int64_t a = 0; a < s.outer; ++a)
          for (int64_t i = 0; i < s.inner; ++i) {
            real sum_d = 0, sum_dx = 0;
            for (int64_t c = 0; c < s.extent; ++c) {
              const size_t k = (a * s.extent + c) * s.inner + i;
              const real d = o.grad[k] * gv[c];
              sum_d += d;
              sum_dx += d * xhat[k];
              if (!gg.empty()) gg[c] += o.grad[k] * xhat[k];
              if (!gb.empty()) gb[c] += o.grad[k];
            }
            if (gx.empty()) continue;
            const real r = rstd[a * s.inner + i];
            for (int64_t c = 0; c < s.extent; ++c) {
              const size_t k = (a * s.extent + c) * s.inner + i;
              const real d = o.grad[k] * gv[c];
              gx[k] += r * (d - inv_c * sum_d - xhat[k] * inv_c * sum_dx);
            }
          }
      });
}

// ---- linear maps -------------------------------------------------------------------------

namespace detail {

namespace {

int blas_int(int64_t v) {
  if (v > std::numeric_limits<int>::max()) throw ShapeError("gemm: extent exceeds the BLAS index range");
  return static_cast<int>(v);
}

// Parallelism comes from parallel_for; BLAS itself stays single-threaded so
// results do not depend on its thread count.
[[maybe_unused]] const bool blas_single_threaded = [] {
  openblas_set_num_threads(1);
  return true;
}();

}  // namespace

#ifdef BITGEN_DOUBLE
#define BITGEN_GEMM cblas_dgemm
#else
#define BITGEN_GEMM cblas_sgemm
#endif

void gemm_nn(int64_t m, int64_t n, int64_t k, const real* a, const real* b, real* c) {
  BITGEN_GEMM(CblasRowMajor, CblasNoTrans, CblasNoTrans, blas_int(m), blas_int(n), blas_int(k), 1, a, blas_int(k), b,
              blas_int(n), 1, c, blas_int(n));
}

void gemm_tn(int64_t m, int64_t n, int64_t k, const real* a, const real* b, real* c) {
  BITGEN_GEMM(CblasRowMajor, CblasTrans, CblasNoTrans, blas_int(m), blas_int(n), blas_int(k), 1, a, blas_int(m), b,
              blas_int(n), 1, c, blas_int(n));
}

void gemm_nt(int64_t m, int64_t n, int64_t k, const real* a, const real* b, real* c) {
  BITGEN_GEMM(CblasRowMajor, CblasNoTrans, CblasTrans, blas_int(m), blas_int(n), blas_int(k), 1, a, blas_int(k), b,
              blas_int(k), 1, c, blas_int(n));
}

#undef BITGEN_GEMM

ConvGeometry conv_geometry(const Shape& x, const Shape& w, int pad) {
  if (x.size() != 4 || w.size() != 4) {
    throw ShapeError("conv2d: expected 4-D input and kernel, got " + shape_str(x) + " and " + shape_str(w));
  }
  if (x[1] != w[1]) throw ShapeError("conv2d: channel mismatch " + shape_str(x) + " vs " + shape_str(w));
  if (w[2] % 2 == 0 || w[3] % 2 == 0) throw ShapeError("conv2d: kernel extents must be odd");
  if (pad < 0) throw ShapeError("conv2d: negative padding");
  ConvGeometry g{x[0], x[1], x[2], x[3], w[0], w[2], w[3], pad, 0, 0};
  g.oh = g.h + 2 * pad - g.kh + 1;
  g.ow = g.w + 2 * pad - g.kw + 1;
  if (g.oh <= 0 || g.ow <= 0) throw ShapeError("conv2d: kernel larger than padded input");
  return g;
}

void im2col(const real* image, const ConvGeometry& g, real* col) {
  const int64_t positions = g.positions();
  for (int64_t c = 0; c < g.c; ++c)
    for (int64_t ki = 0; ki < g.kh; ++ki)
      for (int64_t kj = 0; kj < g.kw; ++kj) {
        real* row = col + ((c * g.kh + ki) * g.kw + kj) * positions;
        for (int64_t oy = 0; oy < g.oh; ++oy) {
          const int64_t iy = oy + ki - g.pad;
          for (int64_t ox = 0; ox < g.ow; ++ox) {
            const int64_t ix = ox + kj - g.pad;
            row[oy * g.ow + ox] =
                (iy >= 0 && iy < g.h && ix >= 0 && ix < g.w) ? image[(c * g.h + iy) * g.w + ix] : real(0);
          }
        }
      }
}

void col2im_add(const real* col, const ConvGeometry& g, real* image) {
  const int64_t positions = g.positions();
  for (int64_t c = 0; c < g.c; ++c)
    for (int64_t ki = 0; ki < g.kh; ++ki)
      for (int64_t kj = 0; kj < g.kw; ++kj) {
        const real* row = col + ((c * g.kh + ki) * g.kw + kj) * positions;
        for (int64_t oy = 0; oy < g.oh; ++oy) {
          const int64_t iy = oy + ki - g.pad;
          if (iy < 0 || iy >= g.h) continue;
          for (int64_t ox = 0; ox < g.ow; ++ox) {
            const int64_t ix = ox + kj - g.pad;
            if (ix >= 0 && ix < g.w) image[(c * g.h + iy) * g.w + ix] += row[oy * g.ow + ox];
          }
        }
      }
}

namespace {

bool is_pointwise(const ConvGeometry& g) { return g.kh == 1 && g.kw == 1 && g.pad == 0; }

// Column view of one image: the image itself for 1x1 kernels, im2col otherwise.
const real* columns(const real* image, const ConvGeometry& g, std::vector<real>& scratch) {
  if (is_pointwise(g)) return image;
  scratch.resize(static_cast<size_t>(g.fan_in() * g.positions()));
  im2col(image, g, scratch.data());
  return scratch.data();
}

}  // namespace

std::vector<real> conv2d_grad_input(std::span<const real> dy, std::span<const real> w, const ConvGeometry& g) {
  std::vector<real> dx(static_cast<size_t>(g.n * g.in_plane()), real(0));
  parallel_for(g.n, [&](int64_t begin, int64_t end, int) {
    std::vector<real> dcol(static_cast<size_t>(g.fan_in() * g.positions()));
    for (int64_t b = begin; b < end; ++b) {
      real* dimg = dx.data() + b * g.in_plane();
      const real* dout = dy.data() + b * g.out_plane();
      if (is_pointwise(g)) {
        gemm_tn(g.fan_in(), g.positions(), g.k, w.data(), dout, dimg);
      } else {
        std::fill(dcol.begin(), dcol.end(), real(0));
        gemm_tn(g.fan_in(), g.positions(), g.k, w.data(), dout, dcol.data());
        col2im_add(dcol.data(), g, dimg);
      }
    }
  });
  return dx;
}

std::vector<real> conv2d_grad_weight(std::span<const real> dy, std::span<const real> x, const ConvGeometry& g) {
  const size_t wsize = static_cast<size_t>(g.k * g.fan_in());
  std::vector<std::vector<real>> partial(static_cast<size_t>(std::max(1, chunk_count(g.n))),
                                         std::vector<real>(wsize, real(0)));
  parallel_for(g.n, [&](int64_t begin, int64_t end, int chunk) {
    std::vector<real> scratch;
    for (int64_t b = begin; b < end; ++b) {
      const real* col = columns(x.data() + b * g.in_plane(), g, scratch);
      gemm_nt(g.k, g.fan_in(), g.positions(), dy.data() + b * g.out_plane(), col, partial[chunk].data());
    }
  });
  for (size_t c = 1; c < partial.size(); ++c)
    for (size_t i = 0; i < wsize; ++i) partial[0][i] += partial[c][i];
  return std::move(partial[0]);
}

}  // namespace detail

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<real> out(static_cast<size_t>(m * n), real(0));
  detail::gemm_nn(m, n, k, a.data().data(), b.data().data(), out.data());
  return make_result(Shape{m, n}, std::move(out), {a, b}, "matmul", [m, n, k](TensorImpl& o) {
    const real* av = o.inputs[0]->data.data();
    const real* bv = o.inputs[1]->data.data();
    auto ga = input_grad(o, 0);
    if (!ga.empty()) detail::gemm_nt(m, k, n, o.grad.data(), bv, ga.data());
    auto gb = input_grad(o, 1);
    if (!gb.empty()) detail::gemm_tn(k, n, m, av, o.grad.data(), gb.data());
  });
}

Tensor conv2d(const Tensor& x, const Tensor& w, int pad) {
  const detail::ConvGeometry g = detail::conv_geometry(x.shape(), w.shape(), pad);
  std::vector<real> out(static_cast<size_t>(g.n * g.out_plane()), real(0));
  auto xs = x.data();
  auto ws = w.data();
  parallel_for(g.n, [&](int64_t begin, int64_t end, int) {
    std::vector<real> scratch;
    for (int64_t b = begin; b < end; ++b) {
      const real* col = detail::columns(xs.data() + b * g.in_plane(), g, scratch);
      detail::gemm_nn(g.k, g.positions(), g.fan_in(), ws.data(), col, out.data() + b * g.out_plane());
    }
  });
  return make_result(Shape{g.n, g.k, g.oh, g.ow}, std::move(out), {x, w}, "conv2d", [g](TensorImpl& o) {
    auto gx = input_grad(o, 0);
    if (!gx.empty()) {
      auto dx = detail::conv2d_grad_input(o.grad, o.inputs[1]->data, g);
      for (size_t i = 0; i < dx.size(); ++i) gx[i] += dx[i];
    }
    auto gw = input_grad(o, 1);
    if (!gw.empty()) {
      auto dw = detail::conv2d_grad_weight(o.grad, o.inputs[0]->data, g);
      for (size_t i = 0; i < dw.size(); ++i) gw[i] += dw[i];
    }
  });
}

BITGEN_NAMESPACE_END
