#pragma once

#include <cstdint>

namespace vessam {

// splitmix64: tiny fully-specified generator so seeded outputs are
// bit-identical across platforms and standard libraries.
struct SplitMix64 {
  uint64_t state;

  explicit SplitMix64(uint64_t seed) : state(seed) {}

  uint64_t next() {
    uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // [0, 1)
  double next_double() { return double(next() >> 11) * 0x1.0p-53; }

  // [0, n)
  uint64_t next_below(uint64_t n) { return n ? next() % n : 0; }

  // [-half, +half]
  double next_symmetric(double half) { return (next_double() * 2.0 - 1.0) * half; }
};

// Stable derivation of per-item seeds from a run seed.
inline uint64_t derive_seed(uint64_t seed, uint64_t stream) {
  SplitMix64 rng(seed ^ (0xd1342543de82ef95ull * (stream + 1)));
  return rng.next();
}

}  // namespace vessam
