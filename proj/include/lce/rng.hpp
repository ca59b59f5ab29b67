#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <utility>

namespace lce {

// Deterministic PRNG with a fixed algorithm (splitmix64 core, Box-Muller
// normals) so seeded runs reproduce bit-identically regardless of the
// standard library's distribution implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [0,1) with 53 random bits.
  double next_double() { return double(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n); n > 0. Multiply-shift range reduction.
  uint64_t next_below(uint64_t n) {
    return uint64_t((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  // Standard normal. Plain Box-Muller, the second value of each pair is
  // discarded so every draw consumes exactly two uniforms.
  double next_normal() {
    double u1 = next_double();
    while (u1 <= 0.0) u1 = next_double();
    double u2 = next_double();
    constexpr double two_pi = 6.283185307179586476925286766559;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
  }

  template <typename It>
  void shuffle(It first, It last) {
    for (auto i = (last - first) - 1; i > 0; --i) {
      auto j = static_cast<decltype(i)>(next_below(uint64_t(i) + 1));
      std::swap(first[i], first[j]);
    }
  }

 private:
  uint64_t state_;
};

inline uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

// Child-seed derivation seed_child = hash(seed, label, index): every
// component draws from an independent stream without coordination.
inline uint64_t seed_child(uint64_t seed, std::string_view label, uint64_t index = 0) {
  uint64_t mixed = seed ^ fnv1a64(label) ^ (index * 0xd1342543de82ef95ull);
  Rng mixer(mixed);
  return mixer.next_u64();
}

}  // namespace lce
