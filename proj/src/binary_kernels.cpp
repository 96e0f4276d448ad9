#include <bitgen/binary_kernels.hpp>

#include <bitgen/ops.hpp>
#include <bitgen/parallel.hpp>

#include <algorithm>
#include <bit>
#include <cassert>
#include <chrono>
#include <limits>

BITGEN_NAMESPACE_BEGIN

BitTensor::BitTensor(Shape shape)
    : shape_(std::move(shape)), numel_(shape_numel(shape_)), words_(static_cast<size_t>(word_count(numel_)), 0) {}

BitTensor BitTensor::pack(const Tensor& t) {
  BitTensor out(t.shape());
  auto d = t.data();
  for (int64_t i = 0; i < out.numel_; ++i) {
    if (d[i] == real(1)) {
      out.words_[i >> 6] |= uint64_t{1} << (i & 63);
    } else if (d[i] != real(-1)) {
      throw DomainError("pack: element " + std::to_string(i) + " is " + std::to_string(d[i]) +
                        ", expected -1 or +1");
    }
  }
  return out;
}

BitTensor BitTensor::pack_signs(const Shape& shape, std::span<const real> values) {
  BitTensor out(shape);
  if (static_cast<int64_t>(values.size()) != out.numel_) throw ShapeError("pack_signs: size mismatch");
  for (int64_t i = 0; i < out.numel_; ++i)
    if (values[i] >= 0) out.words_[i >> 6] |= uint64_t{1} << (i & 63);
  return out;
}

Tensor BitTensor::unpack() const {
  Tensor t(shape_);
  auto d = t.data();
  for (int64_t i = 0; i < numel_; ++i) d[i] = get(i) ? real(1) : real(-1);
  return t;
}

int BitTensor::valid_bits_last_word() const {
  if (numel_ == 0) return 0;
  const int rem = static_cast<int>(numel_ & 63);
  return rem == 0 ? 64 : rem;
}

void BitTensor::set(int64_t i, bool plus_one) {
  const uint64_t bit = uint64_t{1} << (i & 63);
  if (plus_one) {
    words_[i >> 6] |= bit;
  } else {
    words_[i >> 6] &= ~bit;
  }
}

Tensor IntTensor::to_tensor() const {
  Tensor t(shape);
  auto d = t.data();
  for (size_t i = 0; i < values.size(); ++i) d[i] = static_cast<real>(values[i]);
  return t;
}

namespace detail {

int64_t xnor_dot_words(std::span<const uint64_t> a, std::span<const uint64_t> b, int64_t n) {
  const int64_t nw = word_count(n);
  if (static_cast<int64_t>(a.size()) < nw || static_cast<int64_t>(b.size()) < nw) {
    throw ShapeError("xnor_dot: word buffers shorter than the vector length");
  }
  if (nw == 0) return 0;
  int64_t matches = 0;
  for (int64_t i = 0; i + 1 < nw; ++i) matches += std::popcount(~(a[i] ^ b[i]));
  matches += std::popcount(~(a[nw - 1] ^ b[nw - 1]) & tail_mask(n));
  return 2 * matches - n;
}

}  // namespace detail

int64_t xnor_dot(const BitTensor& a, const BitTensor& b) {
  if (a.numel() != b.numel()) {
    throw ShapeError("xnor_dot: length mismatch " + std::to_string(a.numel()) + " vs " +
                     std::to_string(b.numel()));
  }
  return detail::xnor_dot_words(a.words(), b.words(), a.numel());
}

ChannelPlanes to_channel_planes(const BitTensor& t) {
  if (t.shape().size() != 4) throw ShapeError("to_channel_planes: expected a 4-D tensor, got " + shape_str(t.shape()));
  const int64_t a = t.shape()[0], c = t.shape()[1], sites = t.shape()[2] * t.shape()[3];
  ChannelPlanes out{t.shape(), word_count(c), {}};
  out.bits.assign(static_cast<size_t>(a * sites * out.words_per_site), 0);
  for (int64_t i = 0; i < a; ++i)
    for (int64_t ch = 0; ch < c; ++ch) {
      const uint64_t bit = uint64_t{1} << (ch & 63);
      const int64_t base = (i * c + ch) * sites;
      for (int64_t p = 0; p < sites; ++p)
        if (t.get(base + p)) out.bits[(i * sites + p) * out.words_per_site + (ch >> 6)] |= bit;
    }
  return out;
}

IntTensor binary_conv2d(const BitTensor& x, const BitTensor& w, int pad) {
  detail::conv_geometry(x.shape(), w.shape(), pad);
  return binary_conv2d(to_channel_planes(x), to_channel_planes(w), pad);
}

IntTensor binary_conv2d(const ChannelPlanes& x, const ChannelPlanes& w, int pad) {
  const detail::ConvGeometry g = detail::conv_geometry(x.shape, w.shape, pad);
  assert(g.fan_in() < std::numeric_limits<int32_t>::max());
  const int64_t cw = x.words_per_site;
  const uint64_t last_mask = tail_mask(g.c);
  const uint64_t* planes = x.bits.data();
  const uint64_t* taps = w.bits.data();

  IntTensor out{Shape{g.n, g.k, g.oh, g.ow}, std::vector<int32_t>(static_cast<size_t>(g.n * g.out_plane()), 0)};
  parallel_for(g.n, [&](int64_t begin, int64_t end, int) {
    for (int64_t b = begin; b < end; ++b)
      for (int64_t k = 0; k < g.k; ++k)
        for (int64_t oy = 0; oy < g.oh; ++oy)
          for (int64_t ox = 0; ox < g.ow; ++ox) {
            int64_t matches = 0, valid = 0;
            for (int64_t i = 0; i < g.kh; ++i) {
              const int64_t iy = oy + i - g.pad;
              if (iy < 0 || iy >= g.h) continue;
              for (int64_t j = 0; j < g.kw; ++j) {
                const int64_t ix = ox + j - g.pad;
                if (ix < 0 || ix >= g.w) continue;
                const uint64_t* px = planes + ((b * g.h + iy) * g.w + ix) * cw;
                const uint64_t* tw = taps + ((k * g.kh + i) * g.kw + j) * cw;
                for (int64_t q = 0; q + 1 < cw; ++q) matches += std::popcount(~(px[q] ^ tw[q]));
                matches += std::popcount(~(px[cw - 1] ^ tw[cw - 1]) & last_mask);
                valid += g.c;
              }
            }
            out.values[((b * g.k + k) * g.oh + oy) * g.ow + ox] = static_cast<int32_t>(2 * matches - valid);
          }
  });
  return out;
}

Tensor real_binary_conv2d(const Tensor& x, const BitTensor& w, int pad) {
  const detail::ConvGeometry g = detail::conv_geometry(x.shape(), w.shape(), pad);
  const int64_t fan = g.fan_in(), positions = g.positions();
  Tensor out(Shape{g.n, g.k, g.oh, g.ow});
  auto xs = x.data();
  auto ys = out.data();
  parallel_for(g.n, [&](int64_t begin, int64_t end, int) {
    std::vector<real> col(static_cast<size_t>(fan * positions));
    for (int64_t b = begin; b < end; ++b) {
      detail::im2col(xs.data() + b * g.in_plane(), g, col.data());
      for (int64_t k = 0; k < g.k; ++k) {
        real* acc = ys.data() + b * g.out_plane() + k * positions;
        for (int64_t i = 0; i < fan; ++i) {
          const real* row = col.data() + i * positions;
          if (w.get(k * fan + i)) {
            for (int64_t p = 0; p < positions; ++p) acc[p] += row[p];
          } else {
            for (int64_t p = 0; p < positions; ++p) acc[p] -= row[p];
          }
        }
      }
    }
  });
  return out;
}

namespace {

template <class F>
double median_ns(int repetitions, F&& run) {
  std::vector<double> samples;
  samples.reserve(static_cast<size_t>(repetitions));
  for (int r = 0; r < repetitions; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    run();
    const auto t1 = std::chrono::steady_clock::now();
    samples.push_back(std::chrono::duration<double, std::nano>(t1 - t0).count());
  }
  std::nth_element(samples.begin(), samples.begin() + samples.size() / 2, samples.end());
  return samples[samples.size() / 2];
}

}  // namespace

std::vector<BenchRow> popcount_bench(std::span<const int64_t> sizes, int repetitions) {
  std::vector<BenchRow> rows;
  repetitions = std::max(repetitions, 20);
  constexpr int64_t kOut = 64, kSide = 8;
  NoGradGuard no_grad;
  for (int64_t size : sizes) {
    const uint64_t seed = mix_seed(static_cast<uint64_t>(size));
    Tensor xr = randn({1, size, kSide, kSide}, real(1), seed);
    Tensor wr = randn({kOut, size, 1, 1}, real(1), seed + 1);
    BitTensor wb = BitTensor::pack_signs(wr.shape(), wr.data());
    Tensor wpm = wb.unpack();
    const ChannelPlanes xp = to_channel_planes(BitTensor::pack_signs(xr.shape(), xr.data()));
    const ChannelPlanes wp = to_channel_planes(wb);
    volatile real sink = 0;
    const double t_float = median_ns(repetitions, [&] { sink = conv2d(xr, wpm, 0).data()[0]; });
    const double t_rb = median_ns(repetitions, [&] { sink = real_binary_conv2d(xr, wb, 0).data()[0]; });
    const double t_bin = median_ns(repetitions, [&] { sink = static_cast<real>(binary_conv2d(xp, wp, 0).values[0]); });
    (void)sink;
    rows.push_back({"float", size, t_float, 1.0});
    rows.push_back({"real_binary", size, t_rb, t_float / t_rb});
    rows.push_back({"binary", size, t_bin, t_float / t_bin});
  }
  return rows;
}

BITGEN_NAMESPACE_END
