#pragma once

#include <bitgen/model.hpp>

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

BITGEN_NAMESPACE_BEGIN

// File could not be read or written, or its contents are malformed.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Split : uint32_t { Train = 0, Test = 1, All = 2 };
const char* to_string(Split s);

// N images of C x H x W unsigned bytes, row-major.
struct Dataset {
  int64_t n = 0, channels = 0, height = 0, width = 0;
  Split split = Split::All;
  std::vector<uint8_t> pixels;

  int64_t image_size() const { return channels * height * width; }
  // [count, C, H, W] float tensor of pixel values.
  Tensor batch(std::span<const int64_t> indices) const;
  Tensor batch(int64_t first, int64_t count) const;
};

// "BGD1" | u32 version | u64 N | u32 C | u32 H | u32 W | u32 split | payload.
void save_dataset(const Dataset& d, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

struct DatasetPair {
  Dataset train, test;
};

// Mixture of four smoothed random texture families, deterministic per seed;
// the first 90% of the images form the training split (at least one test
// image).
DatasetPair synth_dataset(uint64_t seed, int64_t n, int64_t height, int64_t width, int64_t channels);

// Raw CIFAR-10 binary batch: 3073-byte records (label byte + 3x32x32 pixels).
Dataset load_cifar_batch(const std::filesystem::path& path, Split split = Split::All);

// ---- checkpoints -----------------------------------------------------------------

struct SizeReport {
  int64_t binary_params = 0;
  int64_t float_params = 0;
  double percent_binary = 0;
  int64_t deploy_bytes = 0;            // 1 bit per binary, 4 bytes per float value
  int64_t float_equivalent_bytes = 0;  // 4 bytes per value

  static SizeReport from_counts(int64_t binary, int64_t floats);
  std::string to_text() const;
};

// Walks the parameter records. Binary layers contribute ceil(count / 8) bytes.
SizeReport size_report(const Model& model);

// Little-endian tagged format:
// "BGC1" | u32 version | u32 model kind | u64 config digest | u32 deploy
// | u32 config length | config text | u32 record count
// | records { u32 name length | name | u8 kind (0 float32, 1 bit1)
//             | u8 trainable copy | u32 ndim | i64 dims... | payload }.
// Binary weights are always written as a bit1 record of sign(v); training
// checkpoints add the float32 v as a second record flagged as the trainable
// copy. Returns the number of bytes written.
int64_t save_checkpoint(const Model& model, const std::filesystem::path& path, bool deploy);

struct LoadedCheckpoint {
  std::unique_ptr<Model> model;
  bool deploy = false;
};

// Rebuilds the model from the stored config. Throws FormatError on a bad
// magic or version, truncation, or a digest that does not match the stored
// config text.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

BITGEN_NAMESPACE_END
