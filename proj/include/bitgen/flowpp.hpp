#pragma once

#include <bitgen/distributions.hpp>
#include <bitgen/model.hpp>

#include <vector>

BITGEN_NAMESPACE_BEGIN

// Checkerboard mask [1, C, H, W]: 1 where (y + x) % 2 == parity.
Tensor checkerboard_mask(int64_t channels, int64_t height, int64_t width, int parity);
// Channel stripe mask [1, C, H, W]: 1 on the first ceil(C/2) channels
// (parity 0) or on the rest (parity 1).
Tensor channel_mask(int64_t channels, int64_t height, int64_t width, int parity);
// `count` masks; 1 marks the fixed part. Consecutive pairs are complements.
// With `channel_stripes` (and C >= 2) every second pair is a channel split.
std::vector<Tensor> make_masks(int64_t height, int64_t width, int64_t channels, int64_t count,
                               bool channel_stripes = false);

// Pre-normalised gated residual block:
// x + Gate(act(Conv3x3(act(LayerNorm(x))))), Gate = Conv1x1 to 2R then GLU.
struct FlowBlock {
  Tensor* ln_gamma = nullptr;
  Tensor* ln_beta = nullptr;
  Conv* conv = nullptr;
  Conv* gate = nullptr;
  bool binary_activations = false;

  Tensor forward(const Tensor& x) const;
  Tensor branch(const Tensor& x) const;
};

// Coupling layer y1 = x1, y2 = logit(MixLogCDF(x2; t(x1))) * exp(a(x1)) + b(x1).
class Coupling {
 public:
  struct Params {
    LogisticMixture mix;  // [N, K, C, H, W]
    Tensor a, b;          // [N, C, H, W]
  };

  Tensor mask;  // [1, C, H, W], 1 = fixed
  Conv* entry = nullptr;
  std::vector<FlowBlock> blocks;
  Conv* exit = nullptr;
  int64_t components = 1;

  Params params(const Tensor& x, const Tensor* cond) const;
  // Returns y and the per-example log-determinant [N].
  std::pair<Tensor, Tensor> forward(const Tensor& x, const Tensor* cond) const;
  Tensor inverse(const Tensor& y, const Tensor* cond) const;
  // The conditioning network's hidden state after the residual stack.
  Tensor hidden(const Tensor& x, const Tensor* cond) const;
};

struct FlowResult {
  Tensor z;
  Tensor logdet;  // [N]
};

FlowResult flow_forward(const std::vector<Coupling>& layers, const Tensor& x, const Tensor* cond = nullptr);
Tensor flow_inverse(const std::vector<Coupling>& layers, const Tensor& z, const Tensor* cond = nullptr);
// Standard logistic log-density summed per example, [N].
Tensor base_log_prob(const Tensor& z);
// log p(x) = log p_base(f(x)) + log|det df/dx|, [N].
Tensor flow_log_prob(const std::vector<Coupling>& layers, const Tensor& x);

// Flow++ with variational dequantisation. The main flow models y = x + u in
// (0, 256)^D after the fixed map y -> logit(y / 256).
class FlowModel : public Model {
 public:
  explicit FlowModel(ModelConfig config);

  Tensor loss(const Tensor& x, std::span<const uint64_t> row_seeds) override;
  Tensor sample(int64_t n, uint64_t seed) override;

  // log p(x + u) - log q(u | x) per example, in nats.
  Tensor dequant_objective(const Tensor& x, std::span<const uint64_t> row_seeds);
  // log-density of continuous y in (0, 256)^D, [N].
  Tensor log_prob_continuous(const Tensor& y);

  const std::vector<Coupling>& main_flow() const { return main_; }
  const std::vector<Coupling>& dequant_flow() const { return dequant_; }

 private:
  void build(std::vector<Coupling>& out, const std::string& prefix, int64_t count, int64_t width, int64_t cond_channels);
  // log p(y) given log y and log(256 - y).
  Tensor main_log_prob(const Tensor& log_y, const Tensor& log_rest);

  std::vector<Coupling> main_;
  std::vector<Coupling> dequant_;
};

BITGEN_NAMESPACE_END
