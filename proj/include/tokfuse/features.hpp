#pragma once

// Synthetic block features and the FMAP1 container.
//
// FMAP1 layout, all integers little-endian:
//   magic   "FMAP1"                5 bytes
//   version u16                    currently 1
//   M, H, W, C u32                 map count and per-map extents
//   indices M x u32                encoder block index of each map
//   dtype   u32                    0 = float32
//   payload M*H*W*C float32        block-major, then row-major, channel fastest
//
// Token sequences reuse the container with M=1, H=1, W=L, C=width and a
// single block index of 0.

#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "tokfuse/fusion.hpp"

namespace tokfuse::fmap {

inline constexpr char kMagic[5] = {'F', 'M', 'A', 'P', '1'};
inline constexpr std::uint16_t kVersion = 1;
inline constexpr std::uint32_t kFloat32 = 0;

struct Header {
  std::uint16_t version = kVersion;
  std::uint32_t maps = 0;
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::uint32_t channels = 0;
  std::vector<std::uint32_t> block_indices;
  std::uint32_t dtype = kFloat32;

  std::size_t header_bytes() const { return 5 + 2 + 4 * 4 + 4 * maps + 4; }
};

namespace detail {

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::byte*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  template <class U>
  void le(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      out_.push_back(static_cast<std::byte>((v >> (8 * i)) & 0xffu));
    }
  }
  void f32(float v) { le(std::bit_cast<std::uint32_t>(v)); }
  std::vector<std::byte> take() { return std::move(out_); }

 private:
  std::vector<std::byte> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::byte> in) : in_(in) {}

  void need(std::size_t n, const char* what) const {
    if (in_.size() - pos_ < n) {
      throw IoError(std::string("FMAP1 truncated while reading ") + what);
    }
  }
  template <class U>
  U le(const char* what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      v |= static_cast<U>(std::to_integer<unsigned>(in_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(U);
    return v;
  }
  float f32() { return std::bit_cast<float>(le<std::uint32_t>("payload")); }
  std::span<const std::byte> raw(std::size_t n, const char* what) {
    need(n, what);
    auto s = in_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return in_.size() - pos_; }

 private:
  std::span<const std::byte> in_;
  std::size_t pos_ = 0;
};

}  // namespace detail

// Parses and validates the header; leaves the reader at the payload.
inline Header read_header(detail::Reader& r) {
  const auto magic = r.raw(5, "magic");
  if (std::memcmp(magic.data(), kMagic, 5) != 0) {
    throw IoError("not an FMAP1 file (bad magic)");
  }
  Header h;
  h.version = r.le<std::uint16_t>("version");
  if (h.version != kVersion) {
    throw IoError("unsupported FMAP1 version " + std::to_string(h.version));
  }
  h.maps = r.le<std::uint32_t>("M");
  h.height = r.le<std::uint32_t>("H");
  h.width = r.le<std::uint32_t>("W");
  h.channels = r.le<std::uint32_t>("C");
  if (h.maps == 0) throw IoError("FMAP1 header declares zero maps");
  r.need(4ull * h.maps, "block indices");
  for (std::uint32_t i = 0; i < h.maps; ++i) {
    h.block_indices.push_back(r.le<std::uint32_t>("block indices"));
  }
  h.dtype = r.le<std::uint32_t>("dtype");
  if (h.dtype != kFloat32) {
    throw IoError("unsupported FMAP1 dtype tag " + std::to_string(h.dtype));
  }
  std::size_t values = h.maps;
  for (std::uint32_t d : {h.height, h.width, h.channels}) {
    if (d != 0 && values > (SIZE_MAX / 4) / d) {
      throw IoError("FMAP1 header extents overflow");
    }
    values *= d;
  }
  const std::size_t want = values * 4;
  if (r.remaining() != want) {
    throw IoError("FMAP1 payload is " + std::to_string(r.remaining()) +
                  " bytes, header implies " + std::to_string(want));
  }
  return h;
}

inline std::vector<std::byte> encode(const FeatureStack& stack) {
  if (stack.maps.empty()) throw ShapeError("cannot encode an empty stack");
  if (stack.block_indices.size() != stack.maps.size()) {
    throw ShapeError("block index count does not match map count");
  }
  const Shape& s = stack.maps.front().shape();
  if (s.size() != 3) throw ShapeError("FMAP1 maps must be rank 3");
  detail::Writer w;
  w.bytes(kMagic, 5);
  w.le(kVersion);
  w.le(static_cast<std::uint32_t>(stack.maps.size()));
  for (std::size_t d : s) w.le(static_cast<std::uint32_t>(d));
  for (std::uint32_t idx : stack.block_indices) w.le(idx);
  w.le(kFloat32);
  for (const Tensor& m : stack.maps) {
    if (m.shape() != s) throw ShapeError("FMAP1 maps must share one shape");
    for (float v : m.data()) w.f32(v);
  }
  return w.take();
}

inline FeatureStack decode(std::span<const std::byte> bytes) {
  detail::Reader r(bytes);
  const Header h = read_header(r);
  FeatureStack stack;
  stack.block_indices = h.block_indices;
  const std::size_t per_map =
      static_cast<std::size_t>(h.height) * h.width * h.channels;
  for (std::uint32_t m = 0; m < h.maps; ++m) {
    std::vector<float> values(per_map);
    for (float& v : values) v = r.f32();
    stack.maps.emplace_back(Shape{h.height, h.width, h.channels},
                            std::move(values));
  }
  return stack;
}

inline std::vector<std::byte> read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  std::vector<char> raw((std::istreambuf_iterator<char>(in)),
                        std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read error on '" + path + "'");
  std::vector<std::byte> out(raw.size());
  std::memcpy(out.data(), raw.data(), raw.size());
  return out;
}

inline void write_bytes(const std::string& path,
                        std::span<const std::byte> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write error on '" + path + "'");
}

inline FeatureStack read_file(const std::string& path) {
  return decode(read_bytes(path));
}

inline void write_file(const std::string& path, const FeatureStack& stack) {
  write_bytes(path, encode(stack));
}

inline FeatureStack tokens_as_stack(const TokenSequence& seq) {
  FeatureStack s;
  s.block_indices = {0};
  s.maps.push_back(seq.tokens.reshaped({1, seq.length(), seq.width()}));
  return s;
}

inline TokenSequence stack_as_tokens(const FeatureStack& s) {
  if (s.maps.size() != 1 || s.maps.front().dim(0) != 1) {
    throw IoError("FMAP1 token file must hold one map of height 1");
  }
  const Tensor& m = s.maps.front();
  return {m.reshaped({m.dim(1), m.dim(2)}), Provenance::identity};
}

inline void write_tokens(const std::string& path, const TokenSequence& seq) {
  write_file(path, tokens_as_stack(seq));
}

inline TokenSequence read_tokens(const std::string& path) {
  return stack_as_tokens(read_file(path));
}

}  // namespace tokfuse::fmap

namespace tokfuse {

// Deterministic stand-in for encoder block outputs. Each block is white
// noise plus four random low-frequency 2-D cosine modes with per-channel
// amplitudes, standardised to mean 0 and std 1 over the whole block. The
// cosine modes give neighbouring tokens correlated channel vectors.
inline FeatureStack gen_features(std::uint64_t seed, const FusionConfig& c) {
  c.validate();
  constexpr int kModes = 4;
  constexpr double kNoiseWeight = 0.6;
  constexpr double kSmoothWeight = 0.8;
  FeatureStack stack;
  stack.block_indices = select_block_indices(c.encoder_depth, c.blocks);
  const std::size_t n = c.height * c.width * c.channels;
  for (std::size_t b = 0; b < c.blocks; ++b) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed),
                      static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(b), 0xfea7u};
    std::mt19937_64 rng(seq);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_int_distribution<int> freq(0, 2);
    std::uniform_real_distribution<double> phase(0.0, 2 * std::numbers::pi);

    struct Mode {
      int fy, fx;
      double phase;
      std::vector<double> amplitude;
    };
    std::vector<Mode> modes;
    for (int m = 0; m < kModes; ++m) {
      Mode mode{0, 0, 0.0, {}};
      while (mode.fy == 0 && mode.fx == 0) {
        mode.fy = freq(rng);
        mode.fx = freq(rng);
      }
      mode.phase = phase(rng);
      mode.amplitude.resize(c.channels);
      for (double& a : mode.amplitude) a = normal(rng);
      modes.push_back(std::move(mode));
    }

    std::vector<double> v(n);
    const double smooth_scale = kSmoothWeight / std::sqrt(kModes / 2.0);
    for (std::size_t y = 0; y < c.height; ++y) {
      for (std::size_t x = 0; x < c.width; ++x) {
        double wave[kModes];
        for (int m = 0; m < kModes; ++m) {
          const double arg =
              2 * std::numbers::pi *
                  (modes[m].fy * static_cast<double>(y) / c.height +
                   modes[m].fx * static_cast<double>(x) / c.width) +
              modes[m].phase;
          wave[m] = std::cos(arg);
        }
        for (std::size_t ch = 0; ch < c.channels; ++ch) {
          double smooth = 0;
          for (int m = 0; m < kModes; ++m) {
            smooth += modes[m].amplitude[ch] * wave[m];
          }
          v[(y * c.width + x) * c.channels + ch] =
              kNoiseWeight * normal(rng) + smooth_scale * smooth;
        }
      }
    }

    double mean = 0;
    for (double d : v) mean += d;
    mean /= static_cast<double>(n);
    double var = 0;
    for (double d : v) var += (d - mean) * (d - mean);
    const double inv_std = 1.0 / std::sqrt(var / static_cast<double>(n));
    Tensor map({c.height, c.width, c.channels});
    for (std::size_t i = 0; i < n; ++i) {
      map[i] = static_cast<float>((v[i] - mean) * inv_std);
    }
    stack.maps.push_back(std::move(map));
  }
  return stack;
}

}  // namespace tokfuse
