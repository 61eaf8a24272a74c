#pragma once

#include <algorithm>
#include <cstdint>
#include <cmath>
#include <random>
#include <vector>

namespace vlalign {

// splitmix64, used for seed derivation and stream splitting.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d4a2ca9a6e5bebULL;
  return z ^ (z >> 31);
}

// Deterministic RNG. Distributions are implemented by hand on top of
// mt19937_64 so that sampled values do not depend on the standard
// library implementation.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : gen_(seed), seed_(seed) {}

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller (two uniforms per draw, no caching,
  // so the stream position is predictable).
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Uniform integer in [0, n).
  std::uint64_t randint(std::uint64_t n) { return n ? gen_() % n : 0; }

  bool bernoulli(double p) { return uniform() < p; }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(randint(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Choose k distinct indices from [0, n), returned sorted ascending.
  std::vector<long> choose(long n, long k) {
    std::vector<long> idx(static_cast<std::size_t>(n));
    for (long i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
    for (long i = 0; i < k; ++i) {
      long j = i + static_cast<long>(randint(static_cast<std::uint64_t>(n - i)));
      std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
    }
    idx.resize(static_cast<std::size_t>(k));
    std::sort(idx.begin(), idx.end());
    return idx;
  }

  // Independent child stream keyed by id.
  Rng derive(std::uint64_t id) const {
    std::uint64_t s = seed_ ^ (0x6a09e667f3bcc909ULL + id * 0x9e3779b97f4a7c15ULL);
    splitmix64(s);
    return Rng(s);
  }

 private:
  std::mt19937_64 gen_;
  std::uint64_t seed_;
};

}  // namespace vlalign
