// Copyright 2026 The featinv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string_view>

#include "featinv/tensor.hpp"

namespace featinv {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t hash_string(std::string_view s);

/// Sequential generator (xoshiro256**) with in-library normal sampling, so
/// seeded streams are identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();
  /// Uniform in [0, 1).
  double uniform();
  double normal();
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  Matrix normal_matrix(Index rows, Index cols, float stddev);
  Matrix uniform_matrix(Index rows, Index cols, float lo, float hi);

 private:
  std::uint64_t s_[4];
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Counter-based Gaussian stream: element i of the stream keyed by `key` is a
/// pure function of (key, i), so any element can be replayed independently.
class CounterNormal {
 public:
  explicit CounterNormal(std::uint64_t key) : key_(key) {}
  /// Standard normal for counter `i`.
  float at(std::uint64_t i) const;
  void fill(float* out, std::size_t n, float stddev) const;

 private:
  std::uint64_t key_;
};

template <typename Container>
void shuffle(Container& c, Rng& rng) {
  for (std::size_t i = c.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.below(i));
    std::swap(c[i - 1], c[j]);
  }
}

}  // namespace featinv
