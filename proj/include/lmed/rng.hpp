#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace lmed {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Portable stream: the mt19937_64 sequence is fixed by the standard, and the
// double conversion below does not depend on the library's distributions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(splitmix64(seed)) {}

  // Independent stream for replication / fold `index` under a base seed.
  static Rng stream(std::uint64_t base_seed, std::uint64_t index) {
    return Rng(splitmix64(base_seed) ^ splitmix64(index + 0x632be59bd9b4e019ULL));
  }

  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    // Lemire-style rejection keeps the draw unbiased.
    const std::uint64_t limit = (~std::uint64_t{0}) - (~std::uint64_t{0}) % n;
    std::uint64_t r;
    do {
      r = engine_();
    } while (r >= limit);
    return r % n;
  }

  // Index drawn from a discrete distribution given as probabilities.
  template <typename Range>
  std::size_t categorical(const Range& probs) {
    const double u = uniform();
    double acc = 0.0;
    std::size_t last_positive = 0;
    std::size_t k = 0;
    for (double p : probs) {
      if (p > 0.0) last_positive = k;
      acc += p;
      if (u < acc) return k;
      ++k;
    }
    return last_positive;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace lmed
