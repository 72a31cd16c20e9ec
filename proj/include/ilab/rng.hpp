#pragma once

// Deterministic RNG stack. Every consumer derives its own stream from
// (seed, stream tag) via splitmix64, so results are reproducible bit for bit
// regardless of how tasks are scheduled across workers. The distributions we
// need (uniform, exponential, Poisson) are implemented here rather than taken
// from <random> because libstdc++'s are implementation-defined and would tie
// byte-level determinism to the standard library version.

#include <cmath>
#include <cstdint>
#include <limits>

#include "ilab/lattice.hpp"

namespace ilab {

// stream derivation: fold words into a seed with splitmix64 steps
inline uint64_t derive_seed(uint64_t seed, uint64_t a, uint64_t b = 0, uint64_t c = 0) {
  uint64_t h = mix64(seed ^ 0x243f6a8885a308d3ULL);
  h = mix64(h ^ a);
  h = mix64(h ^ b);
  h = mix64(h ^ c);
  return h;
}

class Rng {
 public:
  using result_type = uint64_t;

  explicit Rng(uint64_t seed = 0x853c49e6748fea9bULL) { reseed(seed); }

  void reseed(uint64_t seed) {
    // splitmix64 expansion into xoshiro256** state, never all zero
    uint64_t sm = seed;
    for (auto& w : s_) {
      sm += 0x9e3779b97f4a7c15ULL;
      uint64_t v = sm;
      v = (v ^ (v >> 30)) * 0xbf58476d1ce4e5b9ULL;
      v = (v ^ (v >> 27)) * 0x94d049bb133111ebULL;
      w = v ^ (v >> 31);
    }
    if ((s_[0] | s_[1] | s_[2] | s_[3]) == 0) s_[0] = 1;
  }

  static constexpr uint64_t min() { return 0; }
  static constexpr uint64_t max() { return UINT64_MAX; }

  uint64_t operator()() {  // xoshiro256**
    uint64_t* s = s_;
    uint64_t result = rotl(s[1] * 5, 7) * 9;
    uint64_t t = s[1] << 17;
    s[2] ^= s[0];
    s[3] ^= s[1];
    s[1] ^= s[2];
    s[0] ^= s[3];
    s[2] ^= t;
    s[3] = rotl(s[3], 45);
    return result;
  }

  // uniform on (0,1]: 53 random bits, zero mapped away so log() is safe
  double u01() {
    uint64_t bits = (*this)() >> 11;
    double u = double(bits + 1) * 0x1p-53;
    return u;
  }

  double exp1() { return -std::log(u01()); }

  // unbiased uniform integer in [0, n) (Lemire with rejection)
  uint64_t below(uint64_t n) {
    __uint128_t m = (__uint128_t)(*this)() * n;
    uint64_t lo = (uint64_t)m;
    if (lo < n) {
      uint64_t thresh = (0 - n) % n;
      while (lo < thresh) {
        m = (__uint128_t)(*this)() * n;
        lo = (uint64_t)m;
      }
    }
    return (uint64_t)(m >> 64);
  }

  int dir6() { return int(below(6)); }
  Vec3 step(Vec3 p) { return p + kDirs[dir6()]; }

  double normal() {  // Box-Muller, one value per call (simplicity over speed)
    double u1 = u01(), u2 = u01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

  // exact Poisson by inversion; large means are split into chunks of at most
  // 400 (sums of independent Poissons are Poisson) to keep exp(-mean) in the
  // normal floating range. O(mean) per draw, fine at the rates used here.
  int64_t poisson(double mean) {
    if (mean <= 0) return 0;
    int64_t acc = 0;
    while (mean > 400.0) {
      acc += poisson_inv(400.0);
      mean -= 400.0;
    }
    return acc + poisson_inv(mean);
  }

 private:
  static uint64_t rotl(uint64_t v, int k) { return (v << k) | (v >> (64 - k)); }

  int64_t poisson_inv(double mean) {
    double p = std::exp(-mean), f = p, u = u01();
    int64_t k = 0;
    // u <= f fires before the cap except with probability below 1e-12
    const int64_t cap = int64_t(mean + 20.0 * std::sqrt(mean + 1.0) + 30.0);
    while (u > f && k < cap) {
      ++k;
      p *= mean / double(k);
      f += p;
    }
    return k;
  }

  uint64_t s_[4];
};

}  // namespace ilab
