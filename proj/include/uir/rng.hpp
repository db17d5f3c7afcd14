#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <string_view>

namespace uir {

// splitmix64 finalizer; the one fixed bit-mixing primitive everything keys off.
inline uint64_t mix64(uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline uint64_t hash_combine(uint64_t seed, uint64_t key) { return mix64(seed ^ mix64(key)); }

inline uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

// Derives a stream seed from a base seed plus positional keys. Used instead of a
// serial RNG stream so that checkpoint-resume lands on identical draws.
inline uint64_t derive_seed(uint64_t base, std::initializer_list<uint64_t> keys) {
  uint64_t h = mix64(base);
  for (uint64_t k : keys) h = hash_combine(h, k);
  return h;
}

inline uint64_t derive_seed(uint64_t base, std::string_view tag,
                            std::initializer_list<uint64_t> keys = {}) {
  uint64_t h = hash_combine(mix64(base), fnv1a64(tag));
  for (uint64_t k : keys) h = hash_combine(h, k);
  return h;
}

// Small deterministic PRNG (splitmix64 sequence).
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n)
  int uniform_int(int n) { return n <= 1 ? 0 : static_cast<int>(next_u64() % static_cast<uint64_t>(n)); }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    do { u1 = uniform(); } while (u1 <= 0.0);
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

 private:
  uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace uir
