#include <bitgen/training.hpp>

#include <bitgen/ops.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>

BITGEN_NAMESPACE_BEGIN

// ---- Adam ------------------------------------------------------------------------

Adam::Adam(const ParamList& params, AdamConfig config) : config_(config) {
  for (const Param& p : params) {
    m_.emplace_back(static_cast<size_t>(p.tensor.numel()), 0.0);
    v_.emplace_back(static_cast<size_t>(p.tensor.numel()), 0.0);
  }
}

bool Adam::step(ParamList& params) {
  std::vector<std::vector<real>> grads;
  grads.reserve(params.size());
  for (const Param& p : params) {
    auto g = p.tensor.grad();
    grads.emplace_back(g.begin(), g.end());
  }
  return step(params, grads);
}

bool Adam::step(ParamList& params, const std::vector<std::vector<real>>& grads) {
  if (params.size() != m_.size() || grads.size() != params.size()) {
    throw ShapeError("adam: parameter list does not match the optimiser state");
  }
  double sq = 0;
  for (size_t i = 0; i < params.size(); ++i) {
    if (grads[i].empty() || !params[i].trainable) continue;
    if (static_cast<int64_t>(grads[i].size()) != params[i].tensor.numel()) {
      throw ShapeError("adam: gradient for '" + params[i].name + "' has " + std::to_string(grads[i].size()) +
                       " entries, parameter has " + std::to_string(params[i].tensor.numel()));
    }
    for (real g : grads[i]) sq += double(g) * double(g);
  }
  last_norm_ = std::sqrt(sq);
  if (!std::isfinite(last_norm_)) return false;
  const double clip = (config_.clip_norm > 0 && last_norm_ > config_.clip_norm) ? config_.clip_norm / last_norm_ : 1.0;

  ++steps_;
  const double t = static_cast<double>(steps_);
  const double c1 = 1 - std::pow(config_.beta1, t), c2 = 1 - std::pow(config_.beta2, t);
  for (size_t i = 0; i < params.size(); ++i) {
    Param& p = params[i];
    if (grads[i].empty() || !p.trainable) continue;
    auto w = p.tensor.data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (size_t k = 0; k < m.size(); ++k) {
      const double g = grads[i][k] * clip;
      m[k] = config_.beta1 * m[k] + (1 - config_.beta1) * g;
      v[k] = config_.beta2 * v[k] + (1 - config_.beta2) * g * g;
      w[k] -= static_cast<real>(config_.lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + config_.eps));
    }
    if (p.binary) clip_weights(p.tensor);
  }
  return true;
}

// ---- metrics ---------------------------------------------------------------------

std::string MetricsRow::csv_header() {
  return "epoch,split,bpd,seconds,binary_params,float_params,pct_binary,deploy_bytes";
}

std::string MetricsRow::csv() const {
  std::ostringstream o;
  o.precision(10);
  o << epoch << ',' << split << ',' << bpd << ',';
  o.precision(4);
  o << std::fixed << seconds << ',' << binary_params << ',' << float_params << ',' << pct_binary << ','
    << deploy_bytes;
  return o.str();
}

// ---- evaluation and training -------------------------------------------------------

namespace {

void check_dataset(const Dataset& d, const ModelConfig& c, const char* which) {
  if (d.n == 0) throw std::invalid_argument(std::string(which) + " set is empty");
  if (d.channels != c.channels || d.height != c.height || d.width != c.width) {
    throw std::invalid_argument(std::string(which) + " set images are " + std::to_string(d.channels) + "x" +
                                std::to_string(d.height) + "x" + std::to_string(d.width) + ", model expects " +
                                std::to_string(c.channels) + "x" + std::to_string(c.height) + "x" +
                                std::to_string(c.width));
  }
}

class TrainingMode {
 public:
  explicit TrainingMode(Model& m) : m_(m) { m_.set_training(false); }
  ~TrainingMode() { m_.set_training(true); }

 private:
  Model& m_;
};

}  // namespace

double evaluate(Model& model, const Dataset& data, uint64_t noise_seed, int64_t batch_size) {
  check_dataset(data, model.config(), "evaluation");
  NoGradGuard no_grad;
  TrainingMode mode(model);
  double total = 0;
  for (int64_t first = 0; first < data.n; first += batch_size) {
    const int64_t count = std::min(batch_size, data.n - first);
    const auto rows = row_seeds(noise_seed, first, count);
    Tensor l = model.loss(data.batch(first, count), rows);
    for (real v : l.data()) total += v;
  }
  return bits_per_dim(total / static_cast<double>(data.n), model.dims());
}

TrainResult train(const TrainConfig& config, const Dataset& train_set, const Dataset& test_set, const RowSink& on_row,
                  std::unique_ptr<Model> initial) {
  if (config.epochs < 0) throw std::invalid_argument("epochs must be >= 0");
  if (config.batch_size < 2) throw std::invalid_argument("batch size must be >= 2");
  TrainResult result;
  const bool fresh = initial == nullptr;
  result.model = initial ? std::move(initial) : make_model(config.model);
  Model& model = *result.model;
  check_dataset(train_set, model.config(), "training");
  check_dataset(test_set, model.config(), "test");

  const auto start = std::chrono::steady_clock::now();
  const SizeReport size = size_report(model);
  auto emit = [&](int64_t epoch, const char* split, double bpd) {
    MetricsRow row;
    row.epoch = epoch;
    row.split = split;
    row.bpd = bpd;
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    row.binary_params = size.binary_params;
    row.float_params = size.float_params;
    row.pct_binary = size.percent_binary;
    row.deploy_bytes = size.deploy_bytes;
    result.history.push_back(row);
    if (on_row) on_row(row);
  };
  auto save = [&](const std::string& stem) {
    if (config.out_dir.empty()) return;
    std::filesystem::create_directories(config.out_dir);
    save_checkpoint(model, config.out_dir / (stem + ".bgc"), false);
  };

  std::mt19937_64 rng(mix_seed(config.seed, 0x5348));
  std::vector<int64_t> order(static_cast<size_t>(train_set.n));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);

  if (fresh) {
    const int64_t k = std::min(config.init_batch, train_set.n);
    model.data_init(train_set.batch(std::span(order).first(static_cast<size_t>(k))), mix_seed(config.seed, 0xdd1));
  }
  emit(0, "test", evaluate(model, test_set));

  Adam adam(model.params(), config.adam);
  const int64_t bs = std::min(config.batch_size, train_set.n);
  const int64_t batches = train_set.n / bs;
  const double dims = static_cast<double>(model.dims());
  int failures = 0;
  int64_t step = 0;
  for (int64_t epoch = 1; epoch <= config.epochs; ++epoch) {
    if (epoch > 1) std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    int64_t seen = 0;
    for (int64_t b = 0; b < batches; ++b) {
      ++step;
      for (Param& p : model.params()) p.tensor.zero_grad();
      const auto idx = std::span(order).subspan(static_cast<size_t>(b * bs), static_cast<size_t>(bs));
      const auto rows = row_seeds(mix_seed(config.seed, static_cast<uint64_t>(step)), 0, bs);
      std::string why;
      double value = 0;
      try {
        Tensor loss = mean(model.loss(train_set.batch(idx), rows));
        value = loss.item();
        if (!std::isfinite(value)) throw NumericError("loss is " + std::to_string(value));
        loss.backward();
        if (!adam.step(model.params())) why = "non-finite gradient";
      } catch (const NumericError& e) {
        why = e.what();
      }
      if (!why.empty()) {
        ++failures;
        ++result.skipped_batches;
        std::cerr << "warning: epoch " << epoch << " batch " << b << " skipped: " << why << '\n';
        if (failures >= config.max_consecutive_failures) {
          throw TrainingAborted("training aborted after " + std::to_string(failures) +
                                " consecutive non-finite batches (epoch " + std::to_string(epoch) + ", batch " +
                                std::to_string(b) + ", step " + std::to_string(step) + "): " + why);
        }
        continue;
      }
      failures = 0;
      loss_sum += value * static_cast<double>(bs);
      seen += bs;
    }
    emit(epoch, "train", seen == 0 ? std::nan("") : loss_sum / (static_cast<double>(seen) * dims * std::log(2.0)));
    emit(epoch, "test", evaluate(model, test_set));
    if (config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0) {
      save("checkpoint_epoch" + std::to_string(epoch));
    }
  }
  save("checkpoint_final");
  if (!config.out_dir.empty()) save_checkpoint(model, config.out_dir / "checkpoint_deploy.bgc", true);
  return result;
}

// ---- two-stage initialisation -----------------------------------------------------

void two_stage_init(Model& binary, const Model& source, const Tensor& batch, bool renormalise, uint64_t seed) {
  const ModelConfig& a = binary.config();
  const ModelConfig& b = source.config();
  ModelConfig probe = b;
  probe.weights = a.weights;
  probe.activations = a.activations;
  probe.binarize_all = a.binarize_all;
  probe.seed = a.seed;
  if (probe.to_text() != a.to_text()) {
    throw std::invalid_argument("two_stage_init: source architecture differs from the binary model");
  }
  const ParamList& src = source.params();
  ParamList& dst = binary.params();
  if (src.size() != dst.size()) throw std::invalid_argument("two_stage_init: parameter lists differ");
  for (size_t i = 0; i < dst.size(); ++i) {
    if (src[i].name != dst[i].name || src[i].tensor.shape() != dst[i].tensor.shape()) {
      throw std::invalid_argument("two_stage_init: parameter '" + dst[i].name + "' does not match the source");
    }
    auto out = dst[i].tensor.data();
    auto in = src[i].tensor.data();
    std::copy(in.begin(), in.end(), out.begin());
    if (!dst[i].binary) continue;
    if (renormalise) {
      double sq = 0;
      for (real v : out) sq += double(v) * double(v);
      const double rms = std::sqrt(sq / static_cast<double>(out.size()));
      if (rms > 0)
        for (real& v : out) v = static_cast<real>(v * 0.05 / rms);
    }
    clip_weights(dst[i].tensor);
  }
  // Gains and biases of the binary layers come from the data; every other
  // layer keeps the transferred values.
  auto convs = binary.convs_matching("");
  for (Conv* c : convs) c->set_data_init_enabled(c->binary());
  binary.data_init(batch, seed);
  for (Conv* c : convs) c->set_data_init_enabled(true);
}

// ---- width sweep ------------------------------------------------------------------

std::vector<WidthResult> width_sweep(const TrainConfig& config, std::span<const int64_t> widths,
                                     const Dataset& train_set, const Dataset& test_set, const RowSink& on_row) {
  if (widths.empty()) throw std::invalid_argument("width_sweep: no widths given");
  std::vector<WidthResult> out;
  for (int64_t w : widths) {
    TrainConfig c = config;
    c.model.res_channels = w;
    if (!c.out_dir.empty()) c.out_dir /= "width" + std::to_string(w);
    TrainResult r = train(c, train_set, test_set, on_row);
    out.push_back({w, size_report(*r.model), r.history.back().bpd});
  }
  return out;
}

BITGEN_NAMESPACE_END
