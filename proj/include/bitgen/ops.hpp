#pragma once

#include <bitgen/tensor.hpp>

#include <cstdint>
#include <span>
#include <vector>

BITGEN_NAMESPACE_BEGIN

// ---- random initialisation -------------------------------------------------

// SplitMix64 finaliser; used to derive independent stream seeds.
uint64_t mix_seed(uint64_t a, uint64_t b = 0x9e3779b97f4a7c15ULL);

Tensor randn(Shape shape, real std, uint64_t seed);
// Uniform on [lo, hi).
Tensor uniform(Shape shape, real lo, real hi, uint64_t seed);
// Uniform rows: row r of a tensor with leading extent N is drawn from its own
// stream seeded by row_seeds[r], so a row's values do not depend on the batch
// it is evaluated in.
Tensor uniform_rows(Shape shape, real lo, real hi, std::span<const uint64_t> row_seeds);

// ---- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& x);
Tensor add_scalar(const Tensor& x, real c);
Tensor mul_scalar(const Tensor& x, real c);

Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor square(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor log_sigmoid(const Tensor& x);
Tensor softplus(const Tensor& x);
// ELU with alpha = 1.
Tensor elu(const Tensor& x);
// Inverse sigmoid; throws DomainError outside (0, 1).
Tensor logit(const Tensor& p);
// Clamps values; the gradient passes where lo <= x <= hi and is zero elsewhere.
Tensor clamp(const Tensor& x, real lo, real hi);

// out[i] = mask[i] != 0 ? a[i] : b[i]. The mask is a constant.
Tensor where(const Tensor& mask, const Tensor& a, const Tensor& b);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator-(const Tensor& x) { return neg(x); }

// ---- reductions and shape ----------------------------------------------------

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// Sums everything but the leading axis: [N, ...] -> [N].
Tensor sum_rows(const Tensor& x);
// Reduces `axis` to extent 1 (kept) with a stable log-sum-exp.
Tensor log_sum_exp(const Tensor& x, size_t axis);

Tensor reshape(const Tensor& x, Shape shape);
Tensor slice(const Tensor& x, size_t axis, int64_t start, int64_t length);
Tensor concat(const std::vector<Tensor>& parts, size_t axis);
// Tiles an axis of extent 1 to extent `count`.
Tensor repeat_axis(const Tensor& x, size_t axis, int64_t count);

// [N,C,H,W] -> [N,4C,H/2,W/2] and its inverse.
Tensor space_to_depth(const Tensor& x);
Tensor depth_to_space(const Tensor& x);

// ---- channel-wise (axis 1) ----------------------------------------------------

Tensor bias_add(const Tensor& x, const Tensor& bias);
Tensor channel_mul(const Tensor& x, const Tensor& scale);
// Gated linear unit over axis 1: first half * sigmoid(second half).
Tensor glu(const Tensor& x);
// Normalises over axis 1 at each (n, spatial) position, then applies a
// per-channel affine map.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, real eps = real(1e-5));

// ---- linear maps ---------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
// Stride-1 zero-padded cross-correlation. x [N,C,H,W], w [K,C,kh,kw], odd kernels.
Tensor conv2d(const Tensor& x, const Tensor& w, int pad);

namespace detail {

struct ConvGeometry {
  int64_t n, c, h, w;       // input
  int64_t k, kh, kw;        // kernel
  int64_t pad, oh, ow;      // output spatial extents
  int64_t fan_in() const { return c * kh * kw; }
  int64_t in_plane() const { return c * h * w; }
  int64_t out_plane() const { return k * oh * ow; }
  int64_t positions() const { return oh * ow; }
};

ConvGeometry conv_geometry(const Shape& x, const Shape& w, int pad);

// Columns [fan_in x positions] for one image, rows ordered (c, ki, kj).
void im2col(const real* image, const ConvGeometry& g, real* col);
void col2im_add(const real* col, const ConvGeometry& g, real* image);

// c[m x n] += a[m x k] * b[k x n] (BLAS backed).
void gemm_nn(int64_t m, int64_t n, int64_t k, const real* a, const real* b, real* c);
// c[m x n] += a^T * b with a stored [k x m].
void gemm_tn(int64_t m, int64_t n, int64_t k, const real* a, const real* b, real* c);
// c[m x n] += a * b^T with b stored [n x k].
void gemm_nt(int64_t m, int64_t n, int64_t k, const real* a, const real* b, real* c);

// Gradients of conv2d for a given weight tensor.
std::vector<real> conv2d_grad_input(std::span<const real> dy, std::span<const real> w,
                                    const ConvGeometry& g);
std::vector<real> conv2d_grad_weight(std::span<const real> dy, std::span<const real> x,
                                     const ConvGeometry& g);

}  // namespace detail

BITGEN_NAMESPACE_END
