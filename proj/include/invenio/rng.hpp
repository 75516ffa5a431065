#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace invenio {

// splitmix64; used both as the generator and to derive child seeds.
inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Deterministic seed derivation: child = mix(root, tag, indices...).
// Every random decision in the project draws from a seed built this way,
// so results are independent of evaluation order and thread count.
inline uint64_t derive_seed(uint64_t root, std::string_view tag) {
  uint64_t h = root ^ 0x51ed270b9f0c0f5dULL;
  for (char c : tag) {
    h ^= static_cast<uint64_t>(static_cast<unsigned char>(c));
    h *= 0x100000001b3ULL;
  }
  splitmix64(h);
  return h;
}

template <typename... Ints>
inline uint64_t derive_seed(uint64_t root, std::string_view tag, Ints... idx) {
  uint64_t h = derive_seed(root, tag);
  auto fold_in = [&h](uint64_t v) {
    h ^= 0x9e3779b97f4a7c15ULL * (v + 1);
    splitmix64(h);
  };
  (fold_in(static_cast<uint64_t>(idx)), ...);
  return h;
}

// Small deterministic RNG. Distributions are hand-rolled so streams are
// bit-stable across standard libraries and platforms.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed ? seed : 0x6a09e667f3bcc909ULL) {}

  uint64_t next_u64() { return splitmix64(state_); }

  // uniform in [0, 1)
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [0, n)
  uint64_t uniform_int(uint64_t n) {
    // modulo bias is negligible for n << 2^64 and irrelevant here; keep it simple
    return next_u64() % n;
  }

  // standard normal via Box-Muller; one value per call (spare cached)
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

 private:
  uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace invenio
