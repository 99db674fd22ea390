#pragma once
// Deterministic random streams. std::uniform_*_distribution is
// implementation-defined, so the integer/real mappings are hand-pinned here;
// every result in the project is reproducible bit-for-bit from a seed.
#include <cstdint>
#include <random>
#include <vector>

namespace cvi {

struct Rng {
  std::mt19937_64 eng;

  explicit Rng(uint64_t seed) : eng(seed) {}

  uint64_t next_u64() { return eng(); }

  // unbiased integer in [0, n); below(0) == 0
  uint64_t below(uint64_t n) {
    if (n == 0) return 0;
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t x;
    do {
      x = eng();
    } while (x >= limit);
    return x % n;
  }

  // inclusive range
  int64_t range(int64_t lo, int64_t hi) {
    return lo + static_cast<int64_t>(below(static_cast<uint64_t>(hi - lo + 1)));
  }

  // [0,1) with 53 random bits
  double real01() { return static_cast<double>(eng() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * real01(); }

  bool chance(double p) { return real01() < p; }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  template <class T>
  const T& pick(const std::vector<T>& v) {
    return v[static_cast<size_t>(below(v.size()))];
  }
};

// Stable sub-seed derivation (splitmix64-style mixing) so independent
// streams (per fold, per epoch, per purpose) never alias.
inline uint64_t derive_seed(uint64_t master, uint64_t a, uint64_t b = 0) {
  uint64_t z = master;
  z += 0x9e3779b97f4a7c15ULL * (a + 1);
  z += 0xbf58476d1ce4e5b9ULL * (b + 1);
  z ^= z >> 30;
  z *= 0xbf58476d1ce4e5b9ULL;
  z ^= z >> 27;
  z *= 0x94d049bb133111ebULL;
  z ^= z >> 31;
  return z;
}

}  // namespace cvi
