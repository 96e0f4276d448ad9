#include <bitgen/persistence.hpp>

#include <bitgen/binary_kernels.hpp>
#include <bitgen/ops.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

BITGEN_NAMESPACE_BEGIN

static_assert(std::endian::native == std::endian::little, "serialisation assumes a little-endian host");

namespace {

constexpr char kDatasetMagic[4] = {'B', 'G', 'D', '1'};
constexpr char kCheckpointMagic[4] = {'B', 'G', 'C', '1'};
constexpr uint32_t kVersion = 1;

class Writer {
 public:
  template <typename T>
  void put(T v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(T));
  }
  void bytes(const void* data, size_t n) {
    const auto* p = static_cast<const char*>(data);
    buf_.insert(buf_.end(), p, p + n);
  }
  void str(const std::string& s) {
    put<uint32_t>(static_cast<uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  const std::vector<char>& data() const { return buf_; }

  void write_file(const std::filesystem::path& path) const {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("cannot open '" + path.string() + "' for writing");
    f.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
    if (!f) throw FormatError("write to '" + path.string() + "' failed");
  }

 private:
  std::vector<char> buf_;
};

class Reader {
 public:
  Reader(std::vector<char> data, std::string what) : buf_(std::move(data)), what_(std::move(what)) {}

  static Reader from_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open '" + path.string() + "'");
    std::vector<char> data((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return Reader(std::move(data), path.string());
  }

  template <typename T>
  T get() {
    T v;
    need(sizeof(T));
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  const char* take(size_t n) {
    need(n);
    const char* p = buf_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::string str() {
    const auto n = get<uint32_t>();
    const char* p = take(n);
    return std::string(p, n);
  }
  void magic(const char (&expect)[4]) {
    const char* p = take(4);
    if (std::memcmp(p, expect, 4) != 0) {
      throw FormatError(what_ + ": bad magic (expected " + std::string(expect, 4) + ")");
    }
    const auto version = get<uint32_t>();
    if (version != kVersion) throw FormatError(what_ + ": unsupported version " + std::to_string(version));
  }
  bool done() const { return pos_ == buf_.size(); }
  const std::string& what() const { return what_; }

 private:
  void need(size_t n) const {
    if (buf_.size() - pos_ < n) throw FormatError(what_ + ": truncated file");
  }

  std::vector<char> buf_;
  size_t pos_ = 0;
  std::string what_;
};

}  // namespace

const char* to_string(Split s) {
  switch (s) {
    case Split::Train:
      return "train";
    case Split::Test:
      return "test";
    case Split::All:
      return "all";
  }
  return "?";
}

// ---- datasets ----------------------------------------------------------------------

Tensor Dataset::batch(std::span<const int64_t> indices) const {
  const int64_t sz = image_size();
  Tensor out({static_cast<int64_t>(indices.size()), channels, height, width});
  auto d = out.data();
  for (size_t r = 0; r < indices.size(); ++r) {
    const int64_t i = indices[r];
    if (i < 0 || i >= n) throw std::out_of_range("dataset index " + std::to_string(i) + " out of range");
    const uint8_t* src = pixels.data() + i * sz;
    for (int64_t k = 0; k < sz; ++k) d[r * sz + k] = static_cast<real>(src[k]);
  }
  return out;
}

Tensor Dataset::batch(int64_t first, int64_t count) const {
  std::vector<int64_t> idx(static_cast<size_t>(count));
  for (int64_t i = 0; i < count; ++i) idx[i] = first + i;
  return batch(idx);
}

void save_dataset(const Dataset& d, const std::filesystem::path& path) {
  if (static_cast<int64_t>(d.pixels.size()) != d.n * d.image_size()) {
    throw std::invalid_argument("save_dataset: payload does not match the header");
  }
  Writer w;
  w.bytes(kDatasetMagic, 4);
  w.put<uint32_t>(kVersion);
  w.put<uint64_t>(static_cast<uint64_t>(d.n));
  w.put<uint32_t>(static_cast<uint32_t>(d.channels));
  w.put<uint32_t>(static_cast<uint32_t>(d.height));
  w.put<uint32_t>(static_cast<uint32_t>(d.width));
  w.put<uint32_t>(static_cast<uint32_t>(d.split));
  w.bytes(d.pixels.data(), d.pixels.size());
  w.write_file(path);
}

Dataset load_dataset(const std::filesystem::path& path) {
  Reader r = Reader::from_file(path);
  r.magic(kDatasetMagic);
  Dataset d;
  d.n = static_cast<int64_t>(r.get<uint64_t>());
  d.channels = r.get<uint32_t>();
  d.height = r.get<uint32_t>();
  d.width = r.get<uint32_t>();
  const auto split = r.get<uint32_t>();
  if (split > 2) throw FormatError(r.what() + ": unknown split tag " + std::to_string(split));
  d.split = static_cast<Split>(split);
  const auto bytes = static_cast<size_t>(d.n * d.image_size());
  const char* p = r.take(bytes);
  d.pixels.assign(reinterpret_cast<const uint8_t*>(p), reinterpret_cast<const uint8_t*>(p) + bytes);
  if (!r.done()) throw FormatError(r.what() + ": trailing bytes after payload");
  return d;
}

DatasetPair synth_dataset(uint64_t seed, int64_t n, int64_t height, int64_t width, int64_t channels) {
  if (n < 2) throw std::invalid_argument("synth_dataset: need at least 2 images");
  if (height < 1 || width < 1 || channels < 1) throw std::invalid_argument("synth_dataset: degenerate image size");

  constexpr int kComponents = 4, kWaves = 3, kGrid = 3;
  constexpr double kTwoPi = 2 * std::numbers::pi;
  struct Wave {
    double fx, fy, amp;
    std::vector<double> colour;
  };
  struct Component {
    std::vector<double> base;
    std::vector<Wave> waves;
    double field_std;
  };

  std::mt19937_64 rng(mix_seed(seed, 0x73796e7468ULL));
  std::uniform_real_distribution<double> unit(0, 1);
  std::normal_distribution<double> gauss(0, 1);
  std::vector<Component> comps(kComponents);
  for (Component& c : comps) {
    for (int64_t ch = 0; ch < channels; ++ch) c.base.push_back(50 + 155 * unit(rng));
    for (int w = 0; w < kWaves; ++w) {
      Wave wave;
      wave.fx = std::floor(3 * unit(rng));
      wave.fy = std::floor(3 * unit(rng));
      if (wave.fx == 0 && wave.fy == 0) wave.fx = 1;
      wave.amp = 15 + 35 * unit(rng);
      for (int64_t ch = 0; ch < channels; ++ch) wave.colour.push_back(0.4 + 0.6 * unit(rng));
      c.waves.push_back(wave);
    }
    c.field_std = 8 + 12 * unit(rng);
  }

  std::vector<uint8_t> pixels(static_cast<size_t>(n * channels * height * width));
  std::vector<double> grid(kGrid * kGrid);
  for (int64_t i = 0; i < n; ++i) {
    const Component& c = comps[static_cast<size_t>(unit(rng) * kComponents) % kComponents];
    std::vector<double> phase(kWaves), gain(kWaves);
    for (int w = 0; w < kWaves; ++w) {
      phase[w] = kTwoPi * unit(rng);
      gain[w] = 0.7 + 0.6 * unit(rng);
    }
    for (int64_t ch = 0; ch < channels; ++ch) {
      // Low-frequency field: bilinear interpolation of a coarse Gaussian grid.
      for (double& g : grid) g = c.field_std * gauss(rng);
      for (int64_t y = 0; y < height; ++y) {
        for (int64_t x = 0; x < width; ++x) {
          double v = c.base[ch];
          for (int w = 0; w < kWaves; ++w) {
            const Wave& wave = c.waves[w];
            const double arg = kTwoPi * (wave.fx * x / width + wave.fy * y / height) + phase[w];
            v += gain[w] * wave.amp * wave.colour[ch] * std::sin(arg);
          }
          const double gy = height > 1 ? double(y) / (height - 1) * (kGrid - 1) : 0;
          const double gx = width > 1 ? double(x) / (width - 1) * (kGrid - 1) : 0;
          const int y0 = std::min(static_cast<int>(gy), kGrid - 2), x0 = std::min(static_cast<int>(gx), kGrid - 2);
          const double ty = gy - y0, tx = gx - x0;
          v += (1 - ty) * ((1 - tx) * grid[y0 * kGrid + x0] + tx * grid[y0 * kGrid + x0 + 1]) +
               ty * ((1 - tx) * grid[(y0 + 1) * kGrid + x0] + tx * grid[(y0 + 1) * kGrid + x0 + 1]);
          v += 4 * gauss(rng);
          pixels[static_cast<size_t>(((i * channels + ch) * height + y) * width + x)] =
              static_cast<uint8_t>(std::clamp(std::round(v), 0.0, 255.0));
        }
      }
    }
  }

  const int64_t n_test = std::max<int64_t>(1, n / 10), n_train = n - n_test;
  const int64_t sz = channels * height * width;
  DatasetPair out;
  for (Dataset* d : {&out.train, &out.test}) {
    d->channels = channels;
    d->height = height;
    d->width = width;
  }
  out.train.n = n_train;
  out.train.split = Split::Train;
  out.train.pixels.assign(pixels.begin(), pixels.begin() + n_train * sz);
  out.test.n = n_test;
  out.test.split = Split::Test;
  out.test.pixels.assign(pixels.begin() + n_train * sz, pixels.end());
  return out;
}

Dataset load_cifar_batch(const std::filesystem::path& path, Split split) {
  constexpr size_t kRecord = 3073;
  Reader r = Reader::from_file(path);
  Dataset d;
  d.channels = 3;
  d.height = d.width = 32;
  d.split = split;
  while (!r.done()) {
    const char* rec = r.take(kRecord);
    d.pixels.insert(d.pixels.end(), reinterpret_cast<const uint8_t*>(rec + 1),
                    reinterpret_cast<const uint8_t*>(rec + kRecord));
    ++d.n;
  }
  if (d.n == 0) throw FormatError(r.what() + ": empty CIFAR batch");
  return d;
}

// ---- size report -------------------------------------------------------------------

SizeReport SizeReport::from_counts(int64_t binary, int64_t floats) {
  SizeReport s;
  s.binary_params = binary;
  s.float_params = floats;
  const int64_t total = binary + floats;
  s.percent_binary = total == 0 ? 0.0 : 100.0 * static_cast<double>(binary) / static_cast<double>(total);
  s.deploy_bytes = (binary + 7) / 8 + 4 * floats;
  s.float_equivalent_bytes = 4 * total;
  return s;
}

std::string SizeReport::to_text() const {
  std::ostringstream o;
  o.setf(std::ios::fixed);
  o.precision(2);
  const double reduction =
      float_equivalent_bytes == 0 ? 0.0 : 100.0 * (1.0 - double(deploy_bytes) / double(float_equivalent_bytes));
  o << "binary_params " << binary_params << '\n'
    << "float_params " << float_params << '\n'
    << "pct_binary " << percent_binary << '\n'
    << "deploy_bytes " << deploy_bytes << '\n'
    << "float_equivalent_bytes " << float_equivalent_bytes << '\n'
    << "size_reduction_pct " << reduction << '\n';
  return o.str();
}

SizeReport size_report(const Model& model) {
  SizeReport s;
  int64_t binary = 0, floats = 0, bit_bytes = 0;
  for (const Param& p : model.params()) {
    if (p.binary) {
      binary += p.tensor.numel();
      bit_bytes += (p.tensor.numel() + 7) / 8;
    } else {
      floats += p.tensor.numel();
    }
  }
  s = SizeReport::from_counts(binary, floats);
  s.deploy_bytes = bit_bytes + 4 * floats;
  return s;
}

// ---- checkpoints -------------------------------------------------------------------

namespace {

enum RecordKind : uint8_t { kFloat32 = 0, kBit1 = 1 };

void write_header(Writer& w, const std::string& name, RecordKind kind, bool trainable_copy, const Shape& shape) {
  w.str(name);
  w.put<uint8_t>(kind);
  w.put<uint8_t>(trainable_copy ? 1 : 0);
  w.put<uint32_t>(static_cast<uint32_t>(shape.size()));
  for (int64_t d : shape) w.put<int64_t>(d);
}

void write_float(Writer& w, const Tensor& t) {
  for (real v : t.data()) w.put<float>(static_cast<float>(v));
}

void write_bits(Writer& w, const Tensor& t) {
  const BitTensor bits = BitTensor::pack_signs(t.shape(), t.data());
  const auto words = bits.words();
  for (int64_t i = 0; i < bits.payload_bytes(); ++i) {
    w.put<uint8_t>(static_cast<uint8_t>(words[i >> 3] >> (8 * (i & 7))));
  }
}

}  // namespace

int64_t save_checkpoint(const Model& model, const std::filesystem::path& path, bool deploy) {
  const std::string text = model.config().to_text();
  int64_t records = 0;
  for (const Param& p : model.params()) records += (p.binary && !deploy) ? 2 : 1;

  Writer w;
  w.bytes(kCheckpointMagic, 4);
  w.put<uint32_t>(kVersion);
  w.put<uint32_t>(static_cast<uint32_t>(model.config().kind));
  w.put<uint64_t>(fnv1a64(text));
  w.put<uint32_t>(deploy ? 1 : 0);
  w.str(text);
  w.put<uint32_t>(static_cast<uint32_t>(records));
  for (const Param& p : model.params()) {
    if (p.binary) {
      write_header(w, p.name, kBit1, false, p.tensor.shape());
      write_bits(w, p.tensor);
      if (!deploy) {
        write_header(w, p.name, kFloat32, true, p.tensor.shape());
        write_float(w, p.tensor);
      }
    } else {
      write_header(w, p.name, kFloat32, false, p.tensor.shape());
      write_float(w, p.tensor);
    }
  }
  w.write_file(path);
  return static_cast<int64_t>(w.data().size());
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  Reader r = Reader::from_file(path);
  r.magic(kCheckpointMagic);
  const auto kind = r.get<uint32_t>();
  const auto digest = r.get<uint64_t>();
  const bool deploy = r.get<uint32_t>() != 0;
  const std::string text = r.str();
  if (fnv1a64(text) != digest) throw FormatError(r.what() + ": config digest mismatch");

  ModelConfig config;
  try {
    config = ModelConfig::from_text(text);
  } catch (const std::invalid_argument& e) {
    throw FormatError(r.what() + ": bad stored config: " + e.what());
  }
  if (config.digest() != digest) throw FormatError(r.what() + ": config is not in canonical form");
  if (static_cast<uint32_t>(config.kind) != kind) throw FormatError(r.what() + ": model kind tag mismatch");

  LoadedCheckpoint out;
  out.deploy = deploy;
  try {
    out.model = make_model(config);
  } catch (const std::invalid_argument& e) {
    throw FormatError(r.what() + ": " + e.what());
  }

  std::vector<bool> seen(out.model->params().size(), false);
  const auto records = r.get<uint32_t>();
  for (uint32_t i = 0; i < records; ++i) {
    const std::string name = r.str();
    const auto rkind = r.get<uint8_t>();
    r.get<uint8_t>();  // trainable-copy flag; a float record always wins
    const auto ndim = r.get<uint32_t>();
    Shape shape(ndim);
    for (auto& d : shape) d = r.get<int64_t>();

    auto& params = out.model->params();
    auto it = std::find_if(params.begin(), params.end(), [&](const Param& p) { return p.name == name; });
    if (it == params.end()) throw FormatError(r.what() + ": unknown parameter '" + name + "'");
    if (it->tensor.shape() != shape) {
      throw FormatError(r.what() + ": shape mismatch for '" + name + "': " + shape_str(shape) + " vs " +
                        shape_str(it->tensor.shape()));
    }
    auto dst = it->tensor.data();
    const int64_t count = shape_numel(shape);
    if (rkind == kFloat32) {
      const char* p = r.take(static_cast<size_t>(count) * 4);
      for (int64_t k = 0; k < count; ++k) {
        float v;
        std::memcpy(&v, p + 4 * k, 4);
        dst[k] = static_cast<real>(v);
      }
    } else if (rkind == kBit1) {
      if (!it->binary) throw FormatError(r.what() + ": bit1 record for float parameter '" + name + "'");
      const auto nbytes = static_cast<size_t>((count + 7) / 8);
      const auto* p = reinterpret_cast<const uint8_t*>(r.take(nbytes));
      for (int64_t k = 0; k < count; ++k) dst[k] = ((p[k >> 3] >> (k & 7)) & 1) ? real(1) : real(-1);
    } else {
      throw FormatError(r.what() + ": unknown record kind " + std::to_string(rkind));
    }
    seen[static_cast<size_t>(it - params.begin())] = true;
  }
  if (!r.done()) throw FormatError(r.what() + ": trailing bytes after the last record");
  for (size_t i = 0; i < seen.size(); ++i) {
    if (!seen[i]) throw FormatError(r.what() + ": missing parameter '" + out.model->params()[i].name + "'");
  }
  return out;
}

BITGEN_NAMESPACE_END
