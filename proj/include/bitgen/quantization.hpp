#pragma once

#include <bitgen/binary_kernels.hpp>
#include <bitgen/tensor.hpp>

#include <cstdint>
#include <string>
#include <vector>

BITGEN_NAMESPACE_BEGIN

// sign(x) with sign(0) = +1.
inline real sign_of(real x) { return x >= 0 ? real(1) : real(-1); }

// Forward sign; backward passes the upstream gradient through unchanged.
Tensor ste_sign_weight(const Tensor& v);
// Forward sign; backward passes the upstream gradient where |x| <= 1 and
// cancels it elsewhere.
Tensor ste_sign_activation(const Tensor& x);

// A named model parameter. `binary` marks the real-valued weights underlying
// a binarised layer: they are clipped after each update and stored at one bit
// per element in deploy checkpoints. Non-trainable entries are buffers such as
// batch-norm running statistics.
struct Param {
  std::string name;
  Tensor tensor;
  bool binary = false;
  bool trainable = true;
};
using ParamList = std::vector<Param>;

// Counts floating point operations spent computing per-output weight scales.
struct ScaleFlops {
  int64_t bwn = 0;
  int64_t wn = 0;
};
ScaleFlops& scale_flops();

// Binary weight normalisation: w = sign(v) * g / sqrt(n) with one gain and
// bias per output channel. The scale is applied after the binary convolution.
struct BwnLayer {
  BwnLayer() = default;
  BwnLayer(int64_t in_channels, int64_t out_channels, int64_t kernel, uint64_t seed);

  Tensor v;  // [out, in, k, k], trainable, kept in [-1, 1]
  Tensor g;  // [out]
  Tensor b;  // [out]

  int64_t out_channels() const { return v.dim(0); }
  int64_t fan_in() const { return v.dim(1) * v.dim(2) * v.dim(3); }
  // alpha = g / sqrt(n); differentiable in g only, O(1) work per output.
  Tensor scale() const;
};

// Standard weight normalisation: w = v * g / ||v|| per output channel.
struct WnLayer {
  WnLayer() = default;
  WnLayer(int64_t in_channels, int64_t out_channels, int64_t kernel, uint64_t seed);

  Tensor v, g, b;

  int64_t out_channels() const { return v.dim(0); }
  int64_t fan_in() const { return v.dim(1) * v.dim(2) * v.dim(3); }
  // Effective weight tensor, with full gradients through 1/||v||.
  Tensor weight() const;
};

struct BatchNormState {
  BatchNormState() = default;
  explicit BatchNormState(int64_t channels);

  Tensor scale, shift;          // trainable, [C]
  Tensor running_mean, running_var;  // buffers, [C]
  real momentum = real(0.9);
  real eps = real(1e-5);
};

// Binary-weight convolution F(x, sign(v)) without scaling. When
// `binary_input` is set, x must hold only +-1 and the XNOR/popcount kernel is
// used; otherwise the multiply-free real-input kernel. The gradient reaching v
// is the straight-through gradient with respect to sign(v).
Tensor binary_weight_conv(const Tensor& x, const Tensor& v, int pad, bool binary_input);

Tensor bwn_conv_forward(const Tensor& x, const BwnLayer& layer, int pad, bool binary_input = false);
Tensor wn_conv_forward(const Tensor& x, const WnLayer& layer, int pad);
Tensor batch_norm_forward(const Tensor& x, BatchNormState& state, bool training);

// v <- clamp(v, -1, 1).
void clip_weights(BwnLayer& layer);
void clip_weights(Tensor& v);

// Per-channel statistics of a [N,C,...] tensor.
struct ChannelStats {
  std::vector<double> mean, std;
};
ChannelStats channel_stats(const Tensor& y);

inline constexpr real kInitGainCap = real(10);

// Data-dependent initialisation: evaluates the layer with g = 1, b = 0 on the
// batch and sets g = 1/std, b = -mean/std per output channel. Channels with
// zero variance get g = kInitGainCap. Returns the number of capped channels.
int data_dependent_init(BwnLayer& layer, const Tensor& batch, int pad, bool binary_input = false);
int data_dependent_init(WnLayer& layer, const Tensor& batch, int pad);

// While a DataInitScope is alive, Conv layers initialise their gain and bias
// from the first batch they see.
class DataInitScope {
 public:
  DataInitScope();
  ~DataInitScope();
  DataInitScope(const DataInitScope&) = delete;
  DataInitScope& operator=(const DataInitScope&) = delete;
  static bool active();
};

enum class ConvKind { Wn, Bwn, BinaryBatchNorm, FloatBatchNorm };

// A normalised convolution in one of the supported precision/normalisation
// variants. Stride 1, "same" padding.
class Conv {
 public:
  Conv() = default;
  Conv(ConvKind kind, int64_t in_channels, int64_t out_channels, int64_t kernel, uint64_t seed);

  Tensor forward(const Tensor& x, bool binary_input = false);

  ConvKind kind() const { return kind_; }
  bool binary() const { return kind_ == ConvKind::Bwn || kind_ == ConvKind::BinaryBatchNorm; }
  int64_t out_channels() const;
  void set_training(bool training) { training_ = training; }
  // Output scale after data-dependent initialisation (the batch-norm scale for
  // batch-norm kinds). Default 1.
  void set_init_scale(real scale);
  // Whether a DataInitScope re-initialises this layer. Default true.
  void set_data_init_enabled(bool enabled) { data_init_enabled_ = enabled; }

  // Sets gain and bias (or batch-norm scale and shift) to zero.
  void zero_gain_and_bias();
  void collect(const std::string& prefix, ParamList& out);

  BwnLayer& bwn() { return bwn_; }
  WnLayer& wn() { return wn_; }
  BatchNormState& batch_norm() { return bn_; }
  Tensor& raw_weight() { return binary() ? bwn_.v : wn_.v; }

 private:
  void scale_init(Tensor& g, Tensor& b) const;

  ConvKind kind_ = ConvKind::Wn;
  int pad_ = 0;
  real init_scale_ = 1;
  bool data_init_enabled_ = true;
  bool training_ = true;
  BwnLayer bwn_;
  WnLayer wn_;
  BatchNormState bn_;
};

BITGEN_NAMESPACE_END
