#include <bitgen/model.hpp>

#include <bitgen/flowpp.hpp>
#include <bitgen/ops.hpp>
#include <bitgen/rvae.hpp>

#include <charconv>
#include <cmath>
#include <numbers>
#include <sstream>

BITGEN_NAMESPACE_BEGIN

const char* to_string(ModelKind k) { return k == ModelKind::Rvae ? "rvae" : "flowpp"; }
const char* to_string(Precision p) { return p == Precision::Float ? "float" : "binary"; }
const char* to_string(NormMode n) { return n == NormMode::Bwn ? "bwn" : "batchnorm"; }

ModelKind parse_model_kind(const std::string& s) {
  if (s == "rvae") return ModelKind::Rvae;
  if (s == "flowpp") return ModelKind::Flowpp;
  throw std::invalid_argument("unknown model '" + s + "' (expected rvae or flowpp)");
}

Precision parse_precision(const std::string& s) {
  if (s == "float") return Precision::Float;
  if (s == "binary") return Precision::Binary;
  throw std::invalid_argument("unknown precision '" + s + "' (expected float or binary)");
}

NormMode parse_norm_mode(const std::string& s) {
  if (s == "bwn") return NormMode::Bwn;
  if (s == "batchnorm") return NormMode::BatchNorm;
  throw std::invalid_argument("unknown norm '" + s + "' (expected bwn or batchnorm)");
}

namespace {

int64_t parse_int(const std::string& key, const std::string& v) {
  int64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw std::invalid_argument(key + ": not an integer: '" + v + "'");
  return out;
}

uint64_t parse_uint(const std::string& key, const std::string& v) {
  uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw std::invalid_argument(key + ": not an unsigned integer: '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true") return true;
  if (v == "0" || v == "false") return false;
  throw std::invalid_argument(key + ": expected true or false, got '" + v + "'");
}

std::vector<int64_t> parse_list(const std::string& key, const std::string& v) {
  std::vector<int64_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_int(key, item));
  return out;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

bool ModelConfig::set(const std::string& key, const std::string& value) {
  if (key == "model") kind = parse_model_kind(value);
  else if (key == "channels") channels = parse_int(key, value);
  else if (key == "height") height = parse_int(key, value);
  else if (key == "width") width = parse_int(key, value);
  else if (key == "res_channels") res_channels = parse_int(key, value);
  else if (key == "weights") weights = parse_precision(value);
  else if (key == "activations") activations = parse_precision(value);
  else if (key == "norm") norm = parse_norm_mode(value);
  else if (key == "residual") residual = parse_bool(key, value);
  else if (key == "binarize_all") binarize_all = parse_bool(key, value);
  else if (key == "model_seed") seed = parse_uint(key, value);
  else if (key == "latent_layers") latent_layers = parse_int(key, value);
  else if (key == "z_channels") z_channels = parse_int(key, value);
  else if (key == "blocks") blocks = parse_list(key, value);
  else if (key == "couplings") couplings = parse_int(key, value);
  else if (key == "flow_blocks") flow_blocks = parse_int(key, value);
  else if (key == "components") components = parse_int(key, value);
  else if (key == "dequant_couplings") dequant_couplings = parse_int(key, value);
  else if (key == "dequant_res_channels") dequant_res_channels = parse_int(key, value);
  else if (key == "variational_dequant") variational_dequant = parse_bool(key, value);
  else return false;
  return true;
}

std::string ModelConfig::to_text() const {
  std::ostringstream o;
  o << "model=" << to_string(kind) << '\n'
    << "channels=" << channels << '\n'
    << "height=" << height << '\n'
    << "width=" << width << '\n'
    << "res_channels=" << res_channels << '\n'
    << "weights=" << to_string(weights) << '\n'
    << "activations=" << to_string(activations) << '\n'
    << "norm=" << to_string(norm) << '\n'
    << "residual=" << (residual ? "true" : "false") << '\n'
    << "binarize_all=" << (binarize_all ? "true" : "false") << '\n'
    << "model_seed=" << seed << '\n';
  if (kind == ModelKind::Rvae) {
    o << "latent_layers=" << latent_layers << '\n' << "z_channels=" << z_channels << '\n' << "blocks=";
    for (size_t i = 0; i < blocks.size(); ++i) o << (i ? "," : "") << blocks[i];
    o << '\n';
  } else {
    o << "couplings=" << couplings << '\n'
      << "flow_blocks=" << flow_blocks << '\n'
      << "components=" << components << '\n'
      << "dequant_couplings=" << dequant_couplings << '\n'
      << "dequant_res_channels=" << dequant_res_channels << '\n'
      << "variational_dequant=" << (variational_dequant ? "true" : "false") << '\n';
  }
  return o.str();
}

ModelConfig ModelConfig::from_text(const std::string& text) {
  ModelConfig c;
  std::stringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) {
    line = trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("config line without '=': " + line);
    const std::string key = trim(line.substr(0, eq));
    if (!c.set(key, trim(line.substr(eq + 1)))) throw std::invalid_argument("unknown config key '" + key + "'");
  }
  return c;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("invalid model config: " + m); };
  if (channels < 1 || height < 1 || width < 1) fail("channels, height and width must be positive");
  if (res_channels < 1) fail("res_channels must be positive");
  if (activations == Precision::Binary && weights != Precision::Binary) {
    fail("binary activations require binary weights");
  }
  if (binarize_all && weights != Precision::Binary) fail("binarize_all requires binary weights");
  if (kind == ModelKind::Rvae) {
    if (latent_layers < 1) fail("latent_layers must be >= 1");
    if (static_cast<int64_t>(blocks.size()) != latent_layers) fail("blocks must list one count per latent layer");
    for (int64_t b : blocks)
      if (b < 0) fail("block counts must be >= 0");
    if (z_channels < 1) fail("z_channels must be positive");
    const int64_t f = int64_t{1} << (latent_layers - 1);
    if (height % f != 0 || width % f != 0) fail("height and width must be divisible by 2^(latent_layers-1)");
  } else {
    if (couplings < 2) fail("couplings must be >= 2");
    if (flow_blocks < 0) fail("flow_blocks must be >= 0");
    if (components < 1) fail("components must be >= 1");
    if (variational_dequant && (dequant_couplings < 2 || dequant_res_channels < 1)) {
      fail("variational dequantisation needs >= 2 couplings and positive width");
    }
  }
}

uint64_t fnv1a64(std::string_view bytes) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

uint64_t ModelConfig::digest() const { return fnv1a64(to_text()); }

double bits_per_dim(double nats, int64_t dims) {
  if (dims <= 0) throw std::invalid_argument("bits_per_dim: dims must be positive");
  return nats / (static_cast<double>(dims) * std::numbers::ln2);
}

// ---- Model ----------------------------------------------------------------------

Model::Model(ModelConfig config) : config_(std::move(config)) { config_.validate(); }

ConvKind Model::residual_kind() const {
  if (config_.weights == Precision::Binary) {
    return config_.norm == NormMode::Bwn ? ConvKind::Bwn : ConvKind::BinaryBatchNorm;
  }
  return config_.norm == NormMode::Bwn ? ConvKind::Wn : ConvKind::FloatBatchNorm;
}

ConvKind Model::plain_kind() const { return config_.binarize_all ? residual_kind() : ConvKind::Wn; }

Conv& Model::add_conv(const std::string& name, ConvKind kind, int64_t in, int64_t out, int64_t kernel) {
  const uint64_t seed = mix_seed(config_.seed, fnv1a64(name));
  auto& entry = convs_.emplace_back(name, Conv(kind, in, out, kernel, seed));
  entry.second.collect(name, params_);
  return entry.second;
}

Tensor& Model::add_param(const std::string& name, Tensor value) {
  value.requires_grad_(true);
  Tensor& t = free_params_.emplace_back(std::move(value));
  params_.push_back({name, t, false, true});
  return t;
}

Param* Model::find_param(const std::string& name) {
  for (auto& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

Census Model::census() const {
  Census c;
  for (const auto& p : params_) (p.binary ? c.binary_params : c.float_params) += p.tensor.numel();
  return c;
}

void Model::data_init(const Tensor& batch, uint64_t seed) {
  NoGradGuard no_grad;
  DataInitScope scope;
  const auto seeds = row_seeds(seed, 0, batch.dim(0));
  loss(batch, seeds);
}

void Model::set_training(bool on) {
  for (auto& [name, conv] : convs_) conv.set_training(on);
}

void Model::zero_residual_gains() {
  for (Conv* c : convs_matching(".res")) c->zero_gain_and_bias();
}

std::vector<Conv*> Model::convs_matching(const std::string& fragment) {
  std::vector<Conv*> out;
  for (auto& [name, conv] : convs_)
    if (name.find(fragment) != std::string::npos) out.push_back(&conv);
  return out;
}

std::unique_ptr<Model> make_model(const ModelConfig& config) {
  if (config.kind == ModelKind::Rvae) return std::make_unique<RvaeModel>(config);
  return std::make_unique<FlowModel>(config);
}

std::vector<uint64_t> row_seeds(uint64_t base, int64_t first, int64_t count) {
  std::vector<uint64_t> out(static_cast<size_t>(count));
  for (int64_t r = 0; r < count; ++r) out[r] = mix_seed(base, static_cast<uint64_t>(first + r));
  return out;
}

Tensor scale_pixels(const Tensor& x) {
  for (real v : x.data()) {
    if (!(v >= 0 && v <= 255)) throw DomainError("pixel value " + std::to_string(v) + " outside [0, 255]");
  }
  return add_scalar(mul_scalar(x, real(1) / real(127.5)), real(-1));
}

BITGEN_NAMESPACE_END
