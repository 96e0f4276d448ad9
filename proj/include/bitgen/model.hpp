#pragma once

#include <bitgen/quantization.hpp>
#include <bitgen/tensor.hpp>

#include <cstdint>
#include <deque>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

BITGEN_NAMESPACE_BEGIN

// A loss or intermediate became non-finite.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ModelKind { Rvae, Flowpp };
enum class Precision { Float, Binary };
enum class NormMode { Bwn, BatchNorm };

const char* to_string(ModelKind k);
const char* to_string(Precision p);
const char* to_string(NormMode n);
ModelKind parse_model_kind(const std::string& s);
Precision parse_precision(const std::string& s);
NormMode parse_norm_mode(const std::string& s);

struct ModelConfig {
  ModelKind kind = ModelKind::Rvae;
  int64_t channels = 3;
  int64_t height = 8;
  int64_t width = 8;
  int64_t res_channels = 32;
  Precision weights = Precision::Float;
  Precision activations = Precision::Float;
  NormMode norm = NormMode::Bwn;
  bool residual = true;
  // Ablation: every convolution, not only those in residual blocks, is binary.
  bool binarize_all = false;
  uint64_t seed = 0;

  // rvae
  int64_t latent_layers = 3;
  int64_t z_channels = 4;
  std::vector<int64_t> blocks = {2, 2, 4};

  // flowpp
  int64_t couplings = 4;
  int64_t flow_blocks = 4;
  int64_t components = 4;
  int64_t dequant_couplings = 2;
  int64_t dequant_res_channels = 16;
  bool variational_dequant = true;

  int64_t dims() const { return channels * height * width; }

  // Throws std::invalid_argument naming the offending field.
  void validate() const;

  // Canonical "key=value" lines; every field is written, in a fixed order.
  std::string to_text() const;
  // Reads the same format; unknown keys are rejected, missing keys keep their
  // defaults.
  static ModelConfig from_text(const std::string& text);
  // Applies one key=value setting. Returns false for unknown keys.
  bool set(const std::string& key, const std::string& value);
  // FNV-1a 64 of to_text().
  uint64_t digest() const;
};

uint64_t fnv1a64(std::string_view bytes);

struct Census {
  int64_t binary_params = 0;
  int64_t float_params = 0;
  double percent_binary() const {
    const int64_t total = binary_params + float_params;
    return total == 0 ? 0.0 : 100.0 * static_cast<double>(binary_params) / static_cast<double>(total);
  }
};

// Negative log-likelihood bound in nats -> bits per dimension.
double bits_per_dim(double nats, int64_t dims);

// Base class of the generative models: owns every convolution and free
// parameter, and enumerates them in a fixed order for the optimiser and for
// checkpoints.
class Model {
 public:
  explicit Model(ModelConfig config);
  virtual ~Model() = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return config_; }
  int64_t dims() const { return config_.dims(); }

  // Per-example negative objective in nats, shape [N]. x holds integer pixel
  // values in [0, 255]. Row r uses noise derived from row_seeds[r] only.
  virtual Tensor loss(const Tensor& x, std::span<const uint64_t> row_seeds) = 0;
  // n images with integer pixel values in [0, 255].
  virtual Tensor sample(int64_t n, uint64_t seed) = 0;

  // Data-dependent initialisation of every WN/BWN convolution from one batch.
  void data_init(const Tensor& batch, uint64_t seed);
  void set_training(bool on);

  ParamList& params() { return params_; }
  const ParamList& params() const { return params_; }
  Param* find_param(const std::string& name);
  Census census() const;

  // Sets g and b (or batch-norm scale and shift) of every convolution inside
  // a residual block to zero.
  void zero_residual_gains();
  // Every convolution whose name contains `fragment`.
  std::vector<Conv*> convs_matching(const std::string& fragment);

 protected:
  Conv& add_conv(const std::string& name, ConvKind kind, int64_t in, int64_t out, int64_t kernel);
  Tensor& add_param(const std::string& name, Tensor value);

  ConvKind residual_kind() const;
  ConvKind plain_kind() const;
  bool binary_activations() const { return config_.activations == Precision::Binary; }

  ModelConfig config_;

 private:
  std::deque<std::pair<std::string, Conv>> convs_;
  std::deque<Tensor> free_params_;
  ParamList params_;
};

std::unique_ptr<Model> make_model(const ModelConfig& config);

// Builds per-row noise seeds: mix_seed(base, first + r).
std::vector<uint64_t> row_seeds(uint64_t base, int64_t first, int64_t count);

// x in [0, 255] -> [-1, 1]; throws DomainError outside the pixel range.
Tensor scale_pixels(const Tensor& x);

BITGEN_NAMESPACE_END
