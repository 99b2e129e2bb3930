#pragma once

#include <cmath>
#include <cstdint>

#include "lgas/vec.hpp"

namespace lgas {

inline uint64_t splitmix64(uint64_t& x) {
  x += 0x9E3779B97F4A7C15ULL;
  uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// PCG32 (O'Neill). One instance per (seed, stream) pair; streams derived
// from distinct stream ids never share state, which keeps every replica's
// randomness a pure function of (seed, replica, stage) regardless of how
// work is scheduled across threads.
class Pcg32 {
 public:
  Pcg32(uint64_t initstate, uint64_t initseq) {
    inc_ = (initseq << 1u) | 1u;
    state_ = 0u;
    next_u32();
    state_ += initstate;
    next_u32();
  }

  uint32_t next_u32() {
    uint64_t old = state_;
    state_ = old * 6364136223846793005ULL + inc_;
    uint32_t xorshifted = static_cast<uint32_t>(((old >> 18u) ^ old) >> 27u);
    uint32_t rot = static_cast<uint32_t>(old >> 59u);
    return (xorshifted >> rot) | (xorshifted << ((-rot) & 31u));
  }

  uint64_t next_u64() {
    uint64_t hi = next_u32();
    return (hi << 32) | next_u32();
  }

  // Uniform on [0, 1) with 53 random bits.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform on {0, ..., n-1} without modulo bias worth caring about here
  // (n is always far below 2^53).
  uint64_t next_below(uint64_t n) { return static_cast<uint64_t>(next_double() * static_cast<double>(n)); }

  // Standard normal, Box-Muller (trig form, pair cached).
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 1.0 - next_double();  // (0, 1]
    double u2 = next_double();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

 private:
  uint64_t state_ = 0;
  uint64_t inc_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// Experiment stages get disjoint stream-id ranges so that replica i of one
// stage never aliases replica i of another.
enum class Stage : uint64_t {
  chain = 1,
  billiard = 2,
  launch = 3,
  slice = 4,
  bootstrap = 5,
  pair = 6,
  probe = 7,
  battery = 8,
  misc = 9,
};

inline uint64_t stream_id(Stage stage, uint64_t replica) {
  return (static_cast<uint64_t>(stage) << 40) | replica;
}

inline Pcg32 derive_stream(uint64_t seed, uint64_t stream) {
  uint64_t x = seed ^ 0xD1B54A32D192ED03ULL;
  uint64_t a = splitmix64(x);
  x ^= stream * 0x9E3779B97F4A7C15ULL + 0x8CB92BA72F3D8DD7ULL;
  uint64_t b = splitmix64(x);
  return Pcg32(a ^ (b >> 17), b);
}

inline Pcg32 derive_stream(uint64_t seed, Stage stage, uint64_t replica) {
  return derive_stream(seed, stream_id(stage, replica));
}

inline Vec uniform_on_sphere(int d, Pcg32& rng) {
  Vec v(d);
  for (;;) {
    for (int i = 0; i < d; ++i) v[i] = rng.normal();
    double n2 = norm2(v);
    if (n2 > 1e-12) {
      double inv = 1.0 / std::sqrt(n2);
      for (int i = 0; i < d; ++i) v[i] *= inv;
      return v;
    }
  }
}

}  // namespace lgas
