#include <bitgen/rvae.hpp>

#include <bitgen/ops.hpp>

#include <cmath>
#include <string>

BITGEN_NAMESPACE_BEGIN

namespace {

std::vector<uint64_t> layer_seeds(std::span<const uint64_t> rows, int64_t layer) {
  std::vector<uint64_t> out(rows.size());
  for (size_t r = 0; r < rows.size(); ++r) out[r] = mix_seed(rows[r], static_cast<uint64_t>(layer + 1));
  return out;
}

// 2x2 average pooling and nearest-neighbour upsampling, both through the
// space-to-depth layout (channel c of the input maps to channels 4c..4c+3).
Tensor pool2(const Tensor& x) {
  const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2) / 2, w = x.dim(3) / 2;
  Tensor s = reshape(space_to_depth(x), {n * c, 4, h, w});
  Tensor t = slice(s, 1, 0, 1) + slice(s, 1, 1, 1) + slice(s, 1, 2, 1) + slice(s, 1, 3, 1);
  return reshape(mul_scalar(t, real(0.25)), {n, c, h, w});
}

Tensor upsample2(const Tensor& x) {
  const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor r = repeat_axis(reshape(x, {n * c, 1, h, w}), 1, 4);
  return depth_to_space(reshape(r, {n, 4 * c, h, w}));
}

void require_finite(const Tensor& t, const std::string& what) {
  for (real v : t.data())
    if (!std::isfinite(v)) throw NumericError("non-finite value in " + what);
}

}  // namespace

Tensor ResidualBlock::branch(const Tensor& x) const {
  if (binary_activations) {
    Tensor h = conv1->forward(ste_sign_activation(x), true);
    return conv2->forward(ste_sign_activation(h), true);
  }
  return conv2->forward(elu(conv1->forward(elu(x))));
}

Tensor ResidualBlock::forward(const Tensor& x) const { return x + branch(x); }

Tensor ElboParts::elbo() const {
  Tensor total = recon;
  for (const Tensor& k : kl) total = total - k;
  return total;
}

RvaeModel::RvaeModel(ModelConfig config) : Model(std::move(config)) {
  const ModelConfig& c = config_;
  const int64_t r = c.res_channels, z = c.z_channels, levels = c.latent_layers;
  const ConvKind plain = plain_kind(), res = residual_kind();

  in_ = &add_conv("in", plain, c.channels, r, 3);
  levels_.resize(static_cast<size_t>(levels));
  stacks_.resize(static_cast<size_t>(levels));
  for (int64_t i = 0; i < levels; ++i) {
    const std::string p = "l" + std::to_string(i);
    Level& lv = levels_[i];
    lv.enc = &add_conv(p + ".enc", plain, r, r, 1);
    if (i < levels - 1) lv.prior = &add_conv(p + ".prior", plain, r, 2 * z, 1);
    lv.post = &add_conv(p + ".post", plain, 2 * r, 2 * z, 1);
    lv.zproj = &add_conv(p + ".z", plain, z, r, 1);
    if (c.residual) {
      for (int64_t b = 0; b < c.blocks[i]; ++b) {
        const std::string q = p + ".res" + std::to_string(b);
        ResidualBlock blk;
        blk.conv1 = &add_conv(q + ".c1", res, r, r, 3);
        blk.conv2 = &add_conv(q + ".c2", res, r, r, 3);
        blk.conv2->set_init_scale(kBranchInitScale);
        blk.binary_activations = binary_activations();
        stacks_[i].push_back(blk);
      }
    }
  }
  const int64_t top = levels - 1;
  prior_top_ = &add_param("prior_top", Tensor::zeros({1, 2 * z, side(top, c.height), side(top, c.width)}));
  out_ = &add_conv("out", plain, r, 2 * c.channels, 3);
}

Logistic RvaeModel::split_params(const Tensor& t) const {
  const int64_t z = config_.z_channels;
  const real bound = kLatentLogScaleBound;
  return {slice(t, 1, 0, z), mul_scalar(tanh(mul_scalar(slice(t, 1, z, z), 1 / bound)), bound)};
}

Logistic RvaeModel::top_prior(int64_t n) const { return split_params(repeat_axis(*prior_top_, 0, n)); }

Tensor RvaeModel::apply_stack(int64_t i, const Tensor& h) const {
  Tensor out = h;
  for (const ResidualBlock& b : stacks_[i]) out = b.forward(out);
  return out;
}

std::vector<Tensor> RvaeModel::bottom_up(const Tensor& x) {
  std::vector<Tensor> u(levels_.size());
  Tensor a = elu(in_->forward(scale_pixels(x)));
  for (size_t i = 0; i < levels_.size(); ++i) {
    if (i > 0) a = pool2(u[i - 1]);
    u[i] = elu(levels_[i].enc->forward(a));
  }
  return u;
}

Logistic RvaeModel::likelihood(const Tensor& h) {
  const int64_t c = config_.channels;
  Tensor o = out_->forward(elu(h));
  const real half = real(127.5);
  return {mul_scalar(add_scalar(slice(o, 1, 0, c), 1), half), add_scalar(slice(o, 1, c, c), std::log(half))};
}

ElboParts RvaeModel::elbo(const Tensor& x, std::span<const uint64_t> rows) {
  if (x.ndim() != 4 || x.dim(1) != config_.channels || x.dim(2) != config_.height || x.dim(3) != config_.width) {
    throw ShapeError("rvae: input " + shape_str(x.shape()) + " does not match the configured image shape");
  }
  if (static_cast<int64_t>(rows.size()) != x.dim(0)) throw ShapeError("rvae: one noise seed per example required");
  const int64_t n = x.dim(0), levels = config_.latent_layers;
  std::vector<Tensor> u = bottom_up(x);

  ElboParts parts;
  parts.kl.resize(static_cast<size_t>(levels));
  const int64_t top = levels - 1;
  Tensor h = Tensor::zeros({n, config_.res_channels, side(top, config_.height), side(top, config_.width)});
  for (int64_t i = top; i >= 0; --i) {
    const Level& lv = levels_[i];
    Logistic prior = i == top ? top_prior(n) : split_params(lv.prior->forward(elu(h)));
    Logistic post = posterior_is_prior ? prior : split_params(lv.post->forward(elu(concat({h, u[i]}, 1))));
    const auto seeds = layer_seeds(rows, i);
    Tensor z = logistic_sample(post, logistic_noise_rows(post.mu.shape(), seeds));
    parts.kl[i] = kl_mc(post, prior, z);
    require_finite(parts.kl[i], "KL term of latent layer " + std::to_string(i));
    h = apply_stack(i, h + lv.zproj->forward(z));
    if (i > 0) h = upsample2(h);
  }
  parts.recon = sum_rows(discretized_logistic_log_prob(likelihood(h), x));
  require_finite(parts.recon, "reconstruction term");
  return parts;
}

Tensor RvaeModel::loss(const Tensor& x, std::span<const uint64_t> rows) { return neg(elbo(x, rows).elbo()); }

Tensor RvaeModel::sample(int64_t n, uint64_t seed) {
  NoGradGuard no_grad;
  const auto rows = row_seeds(seed, 0, n);
  const int64_t top = config_.latent_layers - 1;
  Tensor h = Tensor::zeros({n, config_.res_channels, side(top, config_.height), side(top, config_.width)});
  for (int64_t i = top; i >= 0; --i) {
    const Level& lv = levels_[i];
    Logistic prior = i == top ? top_prior(n) : split_params(lv.prior->forward(elu(h)));
    Tensor z = logistic_sample(prior, logistic_noise_rows(prior.mu.shape(), layer_seeds(rows, i)));
    h = apply_stack(i, h + lv.zproj->forward(z));
    if (i > 0) h = upsample2(h);
  }
  Tensor img = likelihood(h).mu.detach();
  require_finite(img, "sampled likelihood means");
  for (real& v : img.data()) v = std::clamp(std::round(v), real(0), real(255));
  return img;
}

BITGEN_NAMESPACE_END
