#pragma once

#include <cmath>
#include <cstdint>

namespace edlseg {

// Deterministic generator with stable output across platforms and standard
// library versions (std:: distributions are implementation-defined).
// SplitMix64 core; uniforms use the top 53 bits.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). Lemire multiply-shift; bias is < 2^-64.
  std::uint64_t below(std::uint64_t n) {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  // Standard normal via Box-Muller; caches the second value.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

 private:
  std::uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Derives an independent stream seed from a base seed and stream tags,
// e.g. (corpus seed, image id) or (train seed, image id, epoch).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a,
                                 std::uint64_t b = 0, std::uint64_t c = 0) {
  Rng mix(seed);
  std::uint64_t s = mix.next_u64();
  s ^= 0x9e3779b97f4a7c15ULL + a + (s << 6) + (s >> 2);
  Rng mix2(s);
  s = mix2.next_u64();
  s ^= 0x9e3779b97f4a7c15ULL + b + (s << 6) + (s >> 2);
  Rng mix3(s);
  s = mix3.next_u64();
  s ^= 0x9e3779b97f4a7c15ULL + c + (s << 6) + (s >> 2);
  return Rng(s).next_u64();
}

}  // namespace edlseg
