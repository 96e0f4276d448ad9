#pragma once

#include <bitgen/tensor.hpp>

#include <cstdint>
#include <span>
#include <string>
#include <vector>

BITGEN_NAMESPACE_BEGIN

// A {-1,+1} tensor packed one bit per element into 64-bit words.
//
// Elements are packed in row-major order across the whole tensor, least
// significant bit first within each word. Bit 1 encodes +1 and bit 0 encodes
// -1. Unused bits of the last word are always zero, so equality is bitwise.
class BitTensor {
 public:
  BitTensor() = default;
  // All elements -1.
  explicit BitTensor(Shape shape);

  // Packs a tensor whose entries are exactly -1 or +1; throws DomainError on
  // anything else.
  static BitTensor pack(const Tensor& t);
  // Packs sign(x) with sign(0) = +1.
  static BitTensor pack_signs(const Shape& shape, std::span<const real> values);

  Tensor unpack() const;

  const Shape& shape() const { return shape_; }
  int64_t numel() const { return numel_; }
  std::span<const uint64_t> words() const { return words_; }
  // Raw word access; callers must keep the pad bits zero.
  std::span<uint64_t> mutable_words() { return words_; }
  // Number of meaningful bits in the final word (64 when the count divides).
  int valid_bits_last_word() const;
  // Bytes needed for a dense 1-bit serialisation.
  int64_t payload_bytes() const { return (numel_ + 7) / 8; }

  bool get(int64_t i) const { return (words_[i >> 6] >> (i & 63)) & 1U; }
  void set(int64_t i, bool plus_one);
  int value(int64_t i) const { return get(i) ? 1 : -1; }

  friend bool operator==(const BitTensor& a, const BitTensor& b) {
    return a.shape_ == b.shape_ && a.words_ == b.words_;
  }

 private:
  Shape shape_;
  int64_t numel_ = 0;
  std::vector<uint64_t> words_;
};

inline int64_t word_count(int64_t bits) { return (bits + 63) / 64; }

// Mask selecting the valid bits of the last word of an n-bit vector.
inline uint64_t tail_mask(int64_t n) {
  const int rem = static_cast<int>(n & 63);
  return rem == 0 ? ~uint64_t{0} : (uint64_t{1} << rem) - 1;
}

// Integer tensor produced by the fully binary kernels.
struct IntTensor {
  Shape shape;
  std::vector<int32_t> values;

  Tensor to_tensor() const;
};

// Sum_i a_i * b_i over two equal-length sign vectors, computed as
// 2 * popcount(XNOR(a, b)) - n.
int64_t xnor_dot(const BitTensor& a, const BitTensor& b);

namespace detail {
// Same identity over raw words; bits past n are ignored.
int64_t xnor_dot_words(std::span<const uint64_t> a, std::span<const uint64_t> b, int64_t n);
}  // namespace detail

// Fully binary convolution. Zero-padded positions contribute nothing: only
// the taps that fall inside the image are popcounted, which reproduces a
// zero-padded float convolution of the +-1 values exactly.
IntTensor binary_conv2d(const BitTensor& x, const BitTensor& w, int pad);

// A 4-D sign tensor [A, C, P, Q] regrouped so that the C channel bits of every
// (a, p, q) site are contiguous words. Inputs and kernels of binary_conv2d
// both use this layout; deployed weights can be regrouped once.
struct ChannelPlanes {
  Shape shape;
  int64_t words_per_site = 0;
  std::vector<uint64_t> bits;
};
ChannelPlanes to_channel_planes(const BitTensor& t);
IntTensor binary_conv2d(const ChannelPlanes& x, const ChannelPlanes& w, int pad);

// Real-valued input, binary weights. Accumulates with additions for +1
// weights and subtractions for -1 weights over the window in (c, ki, kj)
// order, so the result is bit-identical to a naive loop with explicit +-1
// weights.
Tensor real_binary_conv2d(const Tensor& x, const BitTensor& w, int pad);

struct BenchRow {
  std::string kernel;
  int64_t size = 0;
  double median_ns = 0;
  double speedup_vs_float = 0;
};

// Times the float, real-input/binary-weight and fully binary kernels on a 1x1
// convolution with `size` input channels, 64 output channels and an 8x8 map.
// Three rows per size, medians over `repetitions` runs. The binary kernels
// get their weights pre-packed; the fully binary kernel also gets its input
// in channel-plane form.
std::vector<BenchRow> popcount_bench(std::span<const int64_t> sizes, int repetitions = 20);

BITGEN_NAMESPACE_END
