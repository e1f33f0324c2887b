#pragma once

#include <string>
#include <vector>

#include "featinv/rng.hpp"

namespace oracle {

// Random captions over a small vocabulary so n-gram overlaps are common.
inline std::vector<std::string> random_words(featinv::Rng& rng, int min_len, int max_len) {
  static const char* vocab[] = {"a", "the", "cat", "dog", "sat", "on", "mat", "red", "ball", "runs", "big", "small"};
  const int len = min_len + int(rng.below(uint64_t(max_len - min_len + 1)));
  std::vector<std::string> w;
  for (int i = 0; i < len; ++i) w.push_back(vocab[rng.below(12)]);
  return w;
}

}  // namespace oracle
