#pragma once

#include <bitgen/model.hpp>
#include <bitgen/persistence.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

BITGEN_NAMESPACE_BEGIN

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Global gradient-norm clip; <= 0 disables it.
  double clip_norm = 100;
};

// Bias-corrected Adam over the trainable parameters of a ParamList. After
// every update, the latent weights of binary layers are clipped to [-1, 1].
class Adam {
 public:
  Adam(const ParamList& params, AdamConfig config = {});

  // Uses the gradients stored on the parameters. Returns false (and leaves
  // every parameter untouched) if any gradient is non-finite.
  bool step(ParamList& params);
  // Explicit gradients, one vector per parameter (empty = no gradient).
  bool step(ParamList& params, const std::vector<std::vector<real>>& grads);

  int64_t steps() const { return steps_; }
  const AdamConfig& config() const { return config_; }
  // Global gradient norm seen by the last call to step().
  double last_grad_norm() const { return last_norm_; }

 private:
  AdamConfig config_;
  int64_t steps_ = 0;
  double last_norm_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// Aborted after too many consecutive non-finite batches.
class TrainingAborted : public NumericError {
 public:
  using NumericError::NumericError;
};

struct MetricsRow {
  int64_t epoch = 0;
  std::string split;
  double bpd = 0;
  double seconds = 0;
  int64_t binary_params = 0;
  int64_t float_params = 0;
  double pct_binary = 0;
  int64_t deploy_bytes = 0;

  static std::string csv_header();
  std::string csv() const;
};

struct TrainConfig {
  ModelConfig model;
  int64_t epochs = 10;
  int64_t batch_size = 32;
  // Images used for data-dependent initialisation (taken from the first
  // shuffled epoch order).
  int64_t init_batch = 128;
  AdamConfig adam;
  uint64_t seed = 0;
  // Write checkpoint_epoch{e}.bgc every this many epochs (0 = only final).
  int64_t checkpoint_every = 0;
  // Output directory for checkpoints; empty disables file output.
  std::filesystem::path out_dir;
  int max_consecutive_failures = 3;
};

struct TrainResult {
  std::unique_ptr<Model> model;
  std::vector<MetricsRow> history;
  int64_t skipped_batches = 0;
};

using RowSink = std::function<void(const MetricsRow&)>;

// Fixed noise seed for evaluation, so that evaluating a checkpoint
// reproduces the bpd logged during training.
inline constexpr uint64_t kEvalNoiseSeed = 0xe7a1;

// Mean bpd over a dataset, one noise sample per image. Switches the model to
// inference mode for the duration of the call.
double evaluate(Model& model, const Dataset& data, uint64_t noise_seed = kEvalNoiseSeed, int64_t batch_size = 64);

// Trains from scratch (data-dependent initialisation on the first batch), or
// continues from `initial` when given (no re-initialisation). Emits one test
// row for epoch 0 and a train and a test row for every epoch.
TrainResult train(const TrainConfig& config, const Dataset& train_set, const Dataset& test_set,
                  const RowSink& on_row = {}, std::unique_ptr<Model> initial = nullptr);

// Copies the float model's parameters into a congruent binary model. Latent
// binary weights take the float weights (optionally rescaled to N(0, 0.05)
// statistics per layer), then gains and biases are data-initialised on
// `batch`. Throws std::invalid_argument if the architectures differ.
void two_stage_init(Model& binary, const Model& source, const Tensor& batch, bool renormalise = false,
                    uint64_t seed = 0);

struct WidthResult {
  int64_t width = 0;
  SizeReport size;
  double final_bpd = 0;
};

// One training run per residual width, all with the same seed.
std::vector<WidthResult> width_sweep(const TrainConfig& config, std::span<const int64_t> widths,
                                     const Dataset& train_set, const Dataset& test_set, const RowSink& on_row = {});

BITGEN_NAMESPACE_END
