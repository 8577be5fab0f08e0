#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "espex/common.hpp"

namespace espex {

// Counter-based deterministic RNG (splitmix64 finalizer over a keyed counter).
// Stateless per draw: value i of a stream depends only on (key, i), so streams
// derived for (seed, subject, trial) are reproducible regardless of generation
// order across threads or processes.
class CounterRng {
 public:
  explicit CounterRng(uint64_t key) : key_(key) {}

  static uint64_t mix(uint64_t z) {
    z += 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Child stream; children of distinct ids never collide in practice.
  CounterRng split(uint64_t child_id) const {
    return CounterRng(mix(key_ ^ mix(child_id * 0xD2B74407B1CE6E93ULL + 0x1ULL)));
  }

  uint64_t next_u64() { return mix(key_ + 0x632BE59BD9B4E019ULL * ++counter_); }

  // [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n)
  long uniform_int(long n) {
    check(n > 0, "uniform_int: n must be positive");
    return static_cast<long>(next_u64() % static_cast<uint64_t>(n));
  }

  double gaussian() {
    if (have_cached_) {
      have_cached_ = false;
      return cached_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    cached_ = r * std::sin(2.0 * kPi * u2);
    have_cached_ = true;
    return r * std::cos(2.0 * kPi * u2);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (long i = static_cast<long>(v.size()) - 1; i > 0; --i) {
      const long j = uniform_int(i + 1);
      std::swap(v[static_cast<size_t>(i)], v[static_cast<size_t>(j)]);
    }
  }

  uint64_t key() const { return key_; }
  uint64_t counter() const { return counter_; }

 private:
  uint64_t key_ = 0;
  uint64_t counter_ = 0;
  double cached_ = 0.0;
  bool have_cached_ = false;
};

}  // namespace espex
