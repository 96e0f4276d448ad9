#pragma once

#include <bitgen/distributions.hpp>
#include <bitgen/model.hpp>

#include <vector>

BITGEN_NAMESPACE_BEGIN

// Input -> act -> conv3x3 -> act -> conv3x3, plus the skip connection. The
// activation is ELU, or sign with a clipped straight-through gradient when
// activations are binary (the convolutions then see +-1 inputs).
struct ResidualBlock {
  Conv* conv1 = nullptr;
  Conv* conv2 = nullptr;
  bool binary_activations = false;

  Tensor forward(const Tensor& x) const;
  // The branch alone, without the skip connection.
  Tensor branch(const Tensor& x) const;
};

// Output scale of the second convolution of every residual block after
// data-dependent initialisation.
inline constexpr real kBranchInitScale = real(0.1);

// Latent log-scales are squashed into (-b, b) by b * tanh(raw / b).
inline constexpr real kLatentLogScaleBound = 3;

struct ElboParts {
  Tensor recon;            // [N], log p(x | z) in nats
  std::vector<Tensor> kl;  // per latent layer (index 0 nearest the data), [N]

  // recon - sum(kl), [N].
  Tensor elbo() const;
};

// Hierarchical VAE with a deterministic bottom-up pass and a stochastic
// top-down pass. Latent layer i lives at resolution H/2^i.
class RvaeModel : public Model {
 public:
  explicit RvaeModel(ModelConfig config);

  Tensor loss(const Tensor& x, std::span<const uint64_t> row_seeds) override;
  Tensor sample(int64_t n, uint64_t seed) override;

  // Features u_i for every latent layer, from pixel values in [0, 255].
  std::vector<Tensor> bottom_up(const Tensor& x);
  ElboParts elbo(const Tensor& x, std::span<const uint64_t> row_seeds);

  // Likelihood parameters (pixel units) from the final top-down state.
  Logistic likelihood(const Tensor& h);

  // Test hook: the posterior of every layer emits the prior's parameters.
  bool posterior_is_prior = false;

  const std::vector<std::vector<ResidualBlock>>& stacks() const { return stacks_; }
  // Applies the residual stack of latent layer i.
  Tensor apply_stack(int64_t i, const Tensor& h) const;

 private:
  struct Level {
    Conv* enc = nullptr;    // bottom-up 1x1
    Conv* prior = nullptr;  // top-down prior head (i < L-1)
    Conv* post = nullptr;   // posterior head
    Conv* zproj = nullptr;  // z -> residual channels
  };

  int64_t side(int64_t i, int64_t extent) const { return extent >> i; }
  Logistic split_params(const Tensor& t) const;
  Logistic top_prior(int64_t n) const;

  Conv* in_ = nullptr;
  Conv* out_ = nullptr;
  Tensor* prior_top_ = nullptr;
  std::vector<Level> levels_;
  std::vector<std::vector<ResidualBlock>> stacks_;
};

BITGEN_NAMESPACE_END
