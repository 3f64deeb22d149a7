#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace vlmopt {

// 64-bit FNV-1a; stable across platforms, used for stream labels and keys.
std::uint64_t fnv1a64(std::string_view data, std::uint64_t basis = 0xcbf29ce484222325ULL);

std::uint64_t splitmix64(std::uint64_t x);

/// Deterministic random stream.
///
/// Only the raw mt19937_64 output is used; bounded integers and reals are
/// derived here rather than through <random> distributions, whose algorithms
/// differ between standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t state) : engine_(state) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, n). n must be > 0.
  std::size_t index(std::size_t n);

  // Uniform in [0, 1).
  double uniform();

  bool bernoulli(double p) { return uniform() < p; }

  double normal();

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = index(i);
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

// Independent stream for (seed, label); identical inputs give identical draws.
Rng seeded_rng(std::uint64_t seed, std::string_view stream_label);

}  // namespace vlmopt
