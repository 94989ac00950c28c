#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

namespace medtrace {

// Seeded generator whose draws do not depend on the standard library's
// distribution implementations, so corpora and initialisations regenerate
// identically across toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  // Independent stream for (seed, index): used to shard sampling by index.
  Rng(std::uint64_t seed, std::uint64_t index);

  std::uint64_t next() { return engine_(); }
  // Uniform integer in [lo, hi] (inclusive), unbiased by rejection.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);
  // Uniform real in [0, 1).
  double uniform();
  double normal(double mean = 0.0, double stddev = 1.0);

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(uniform_int(0, static_cast<std::int64_t>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

  template <class T>
  const T& pick(const std::vector<T>& v) {
    return v[static_cast<std::size_t>(uniform_int(0, static_cast<std::int64_t>(v.size()) - 1))];
  }

 private:
  std::mt19937_64 engine_;
};

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index);

}  // namespace medtrace
