#ifndef DYNGEST_RNG_HPP
#define DYNGEST_RNG_HPP

#include <array>
#include <cmath>
#include <cstdint>

namespace dyngest {

// SplitMix64, used to expand a single u64 seed into generator state.
// Constants from Vigna's reference implementation.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// xoshiro256** 1.0 (Blackman/Vigna), seeded via SplitMix64. Fixed algorithm
// so streams are identical across platforms.
class Xoshiro256 {
public:
  using state_type = std::array<std::uint64_t, 4>;

  explicit Xoshiro256(std::uint64_t seed = 0) { reseed(seed); }

  void reseed(std::uint64_t seed) {
    std::uint64_t sm = seed;
    for (auto& w : s_) w = splitmix64(sm);
    cached_valid_ = false;
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform in [0, 1) with 53-bit resolution.
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Uniform integer in [0, bound) by rejection, bias-free.
  std::uint64_t next_below(std::uint64_t bound) {
    const std::uint64_t threshold = (0 - bound) % bound;
    for (;;) {
      const std::uint64_t r = next_u64();
      if (r >= threshold) return r % bound;
    }
  }

  // Standard normal via Box-Muller; caches the second deviate.
  double next_normal() {
    if (cached_valid_) {
      cached_valid_ = false;
      return cached_;
    }
    double u1 = next_double();
    while (u1 <= 0.0) u1 = next_double();
    const double u2 = next_double();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * M_PI * u2;
    cached_ = r * std::sin(theta);
    cached_valid_ = true;
    return r * std::cos(theta);
  }

  state_type state() const { return s_; }
  void set_state(const state_type& s) {
    s_ = s;
    cached_valid_ = false;
  }

private:
  static std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
  }

  state_type s_{};
  double cached_ = 0.0;
  bool cached_valid_ = false;
};

// Derives an independent child seed, e.g. one per clip in a dataset.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
  std::uint64_t s = base ^ (0x6a09e667f3bcc909ULL + index * 0x9e3779b97f4a7c15ULL);
  splitmix64(s);
  return splitmix64(s);
}

}  // namespace dyngest

#endif  // DYNGEST_RNG_HPP
