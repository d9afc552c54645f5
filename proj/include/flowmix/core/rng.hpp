#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace flowmix::core {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Deterministic stream derivation: mixes an arbitrary number of 64-bit
// identifiers (split seed, scene seed, epoch, purpose tag) into one seed.
inline uint64_t mix_seed(uint64_t a) { return splitmix64(a); }
template <class... Rest>
uint64_t mix_seed(uint64_t a, Rest... rest) {
  return splitmix64(a ^ (0x9e3779b97f4a7c15ULL + mix_seed(static_cast<uint64_t>(rest)...)));
}

// mt19937_64 wrapper with explicitly-specified value mappings so that replay
// is bit-identical across standard library implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t next_u64() { return eng_(); }

  // uniform in [0, 1) with 53-bit resolution
  double u01() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * u01(); }

  // uniform integer in [0, n)
  uint64_t uniform_int(uint64_t n) {
    // rejection sampling, bias-free
    uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t v = eng_();
    while (v >= limit) v = eng_();
    return v % n;
  }

  // standard normal via Box-Muller; caches the second draw
  double gauss() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u = u01();
    double v = u01();
    while (u <= 1e-300) u = u01();
    double r = std::sqrt(-2.0 * std::log(u));
    double a = 2.0 * M_PI * v;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  Rng derive(uint64_t tag) { return Rng(mix_seed(eng_(), tag)); }

 private:
  std::mt19937_64 eng_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace flowmix::core
