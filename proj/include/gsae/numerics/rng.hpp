#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>

#include "gsae/errors.hpp"

namespace gsae {

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// Philox4x32-10 block function (Salmon et al., Random123), applied to
// `Blocks` consecutive counters at once. The rounds of different blocks are
// independent, which lets the multiplies overlap.
template <std::size_t Blocks>
inline void philox4x32_blocks(std::uint64_t first_block, std::uint64_t stream, std::uint64_t seed,
                              std::array<std::uint32_t, 4 * Blocks>& out) {
  constexpr std::uint32_t m0 = 0xD2511F53u;
  constexpr std::uint32_t m1 = 0xCD9E8D57u;
  constexpr std::uint32_t w0 = 0x9E3779B9u;
  constexpr std::uint32_t w1 = 0xBB67AE85u;
  std::array<std::uint32_t, Blocks> c0, c1, c2, c3;
  for (std::size_t b = 0; b < Blocks; ++b) {
    const std::uint64_t blk = first_block + b;
    c0[b] = static_cast<std::uint32_t>(blk);
    c1[b] = static_cast<std::uint32_t>(blk >> 32);
    c2[b] = static_cast<std::uint32_t>(stream);
    c3[b] = static_cast<std::uint32_t>(stream >> 32);
  }
  std::uint32_t k0 = static_cast<std::uint32_t>(seed);
  std::uint32_t k1 = static_cast<std::uint32_t>(seed >> 32);
  for (int round = 0; round < 10; ++round) {
    for (std::size_t b = 0; b < Blocks; ++b) {
      const std::uint64_t p0 = static_cast<std::uint64_t>(m0) * c0[b];
      const std::uint64_t p1 = static_cast<std::uint64_t>(m1) * c2[b];
      const auto n0 = static_cast<std::uint32_t>(p1 >> 32) ^ c1[b] ^ k0;
      const auto n2 = static_cast<std::uint32_t>(p0 >> 32) ^ c3[b] ^ k1;
      c1[b] = static_cast<std::uint32_t>(p1);
      c3[b] = static_cast<std::uint32_t>(p0);
      c0[b] = n0;
      c2[b] = n2;
    }
    k0 += w0;
    k1 += w1;
  }
  for (std::size_t b = 0; b < Blocks; ++b) {
    out[4 * b] = c0[b];
    out[4 * b + 1] = c1[b];
    out[4 * b + 2] = c2[b];
    out[4 * b + 3] = c3[b];
  }
}

}  // namespace detail

/// Counter-based random stream. The Philox key is the seed and the stream id
/// occupies the upper half of the 128-bit counter, so every (seed, stream_id)
/// pair addresses its own disjoint sequence. Plain value type: copy it to hand
/// a stream to another thread, never share one instance mutably.
class RngStream {
 public:
  RngStream() : RngStream(0, 0) {}
  RngStream(std::uint64_t seed, std::uint64_t stream_id) : seed_(seed), stream_id_(stream_id) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream_id() const noexcept { return stream_id_; }

  /// Independent child stream; the child key is a hash of this stream's identity.
  RngStream substream(std::uint64_t child_id) const {
    const std::uint64_t child_seed = detail::splitmix64(detail::splitmix64(seed_) ^ (stream_id_ + 0x632BE59BD9B4E019ULL));
    return RngStream(child_seed, child_id);
  }

  std::uint32_t next_u32() {
    if (index_ == kBuffer) refill();
    return buffer_[index_++];
  }

  std::uint64_t next_u64() {
    const std::uint64_t hi = next_u32();
    return (hi << 32) | next_u32();
  }

  /// Uniform on the open interval (0, 1).
  double uniform() { return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53; }

  /// Standard normal by the Marsaglia polar method.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double f = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * f;
    has_spare_ = true;
    return u * f;
  }

 private:
  static constexpr std::size_t kBlocks = 4;
  static constexpr std::size_t kBuffer = 4 * kBlocks;

  void refill() {
    detail::philox4x32_blocks<kBlocks>(block_, stream_id_, seed_, buffer_);
    block_ += kBlocks;
    index_ = 0;
  }

  std::uint64_t seed_;
  std::uint64_t stream_id_;
  std::uint64_t block_ = 0;
  std::array<std::uint32_t, kBuffer> buffer_{};
  std::size_t index_ = kBuffer;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Unit-rate gamma sampler with the Marsaglia-Tsang constants precomputed.
/// Shape >= 1 uses the squeeze method directly; shape < 1 draws
/// Gamma(shape + 1) and multiplies by U^(1/shape).
class GammaSampler {
 public:
  explicit GammaSampler(double shape) : shape_(shape), boosted_(shape < 1.0) {
    if (!(shape > 0.0) || !std::isfinite(shape)) throw DomainError("GammaSampler: shape must be positive and finite");
    const double a = boosted_ ? shape + 1.0 : shape;
    d_ = a - 1.0 / 3.0;
    c_ = 1.0 / std::sqrt(9.0 * d_);
  }

  double shape() const noexcept { return shape_; }

  double operator()(RngStream& rng) const {
    double g;
    for (;;) {
      double x, v;
      do {
        x = rng.normal();
        v = 1.0 + c_ * x;
      } while (v <= 0.0);
      v = v * v * v;
      const double u = rng.uniform();
      const double x2 = x * x;
      if (u < 1.0 - 0.0331 * x2 * x2 || std::log(u) < 0.5 * x2 + d_ * (1.0 - v + std::log(v))) {
        g = d_ * v;
        break;
      }
    }
    if (boosted_) {
      g *= std::exp(std::log(rng.uniform()) / shape_);
      if (g <= 0.0) g = std::numeric_limits<double>::denorm_min();
    }
    return g;
  }

 private:
  double shape_;
  bool boosted_;
  double d_ = 0.0;
  double c_ = 0.0;
};

/// Gamma(shape, rate) variate, density proportional to y^(shape-1) exp(-rate y).
inline double draw_gamma(RngStream& rng, double shape, double rate) {
  if (!(rate > 0.0) || !std::isfinite(rate)) throw DomainError("draw_gamma: rate must be positive and finite");
  return GammaSampler(shape)(rng) / rate;
}

}  // namespace gsae
