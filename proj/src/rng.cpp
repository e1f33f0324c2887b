// Copyright 2026 The featinv Authors
// SPDX-License-Identifier: Apache-2.0

#include "featinv/rng.hpp"

#include <array>
#include <cmath>
#include <algorithm>
#include <numbers>

namespace featinv {

namespace {
inline std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
inline double to_unit(std::uint64_t x) { return static_cast<double>(x >> 11) * 0x1.0p-53; }
}  // namespace

std::uint64_t hash_string(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

Rng::Rng(std::uint64_t seed) {
  std::uint64_t x = seed;
  for (auto& s : s_) {
    x = splitmix64(x);
    s = x;
  }
}

std::uint64_t Rng::next_u64() {
  const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
  const std::uint64_t t = s_[1] << 17;
  s_[2] ^= s_[0];
  s_[3] ^= s_[1];
  s_[1] ^= s_[2];
  s_[0] ^= s_[3];
  s_[2] ^= t;
  s_[3] = rotl(s_[3], 45);
  return result;
}

double Rng::uniform() { return to_unit(next_u64()); }

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = 0.0;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

std::uint64_t Rng::below(std::uint64_t n) {
  // Lemire-style rejection keeps the draw unbiased.
  const std::uint64_t limit = ~0ULL - (~0ULL % n);
  std::uint64_t x = 0;
  do {
    x = next_u64();
  } while (x >= limit);
  return x % n;
}

Matrix Rng::normal_matrix(Index rows, Index cols, float stddev) {
  Matrix m(rows, cols);
  float* d = m.data();
  for (Index i = 0; i < m.size(); ++i) d[i] = static_cast<float>(normal()) * stddev;
  return m;
}

Matrix Rng::uniform_matrix(Index rows, Index cols, float lo, float hi) {
  Matrix m(rows, cols);
  float* d = m.data();
  for (Index i = 0; i < m.size(); ++i) d[i] = lo + static_cast<float>(uniform()) * (hi - lo);
  return m;
}

namespace {

// Box-Muller over blocks of 16 hashed uniform pairs. A block of 32 stream
// elements holds the 16 cosine branches followed by the 16 sine branches.
constexpr int kPairBlock = 16;
using BlockArray = Eigen::Array<float, kPairBlock, 1>;

// Bijective 32-bit integer hash (xor-shift-multiply, low-bias constants).
inline std::uint32_t lowbias32(std::uint32_t x) {
  x ^= x >> 16;
  x *= 0x7feb352dU;
  x ^= x >> 15;
  x *= 0x846ca68bU;
  x ^= x >> 16;
  return x;
}

void normal_block(std::uint64_t key, std::uint64_t block, float stddev, float* out) {
  // 32-bit lanes so the hashing loop vectorizes.
  const auto k_lo = static_cast<std::uint32_t>(key);
  const auto k_hi = static_cast<std::uint32_t>(key >> 32);
  const auto base = static_cast<std::uint32_t>(block * 2 * kPairBlock);
  const auto salt = static_cast<std::uint32_t>(block >> 27);
  BlockArray u1, u2;
  for (int p = 0; p < kPairBlock; ++p) {
    const std::uint32_t c = base + 2 * static_cast<std::uint32_t>(p);
    const std::uint32_t a = lowbias32(lowbias32(c ^ k_lo) ^ k_hi ^ salt);
    const std::uint32_t b = lowbias32(lowbias32((c + 1) ^ k_lo) ^ k_hi ^ salt);
    u1[p] = (static_cast<float>(a) + 1.0f) * 0x1.0p-32f;  // (0, 1]
    u2[p] = static_cast<float>(b) * 0x1.0p-32f;
  }
  const BlockArray r = (-2.0f * u1.log()).sqrt();
  const BlockArray theta = (2.0f * std::numbers::pi_v<float>)*u2;
  Eigen::Map<BlockArray> cos_half(out), sin_half(out + kPairBlock);
  cos_half = (r * theta.cos()) * stddev;
  sin_half = (r * theta.sin()) * stddev;
}

}  // namespace

float CounterNormal::at(std::uint64_t i) const {
  std::array<float, 2 * kPairBlock> buf{};
  normal_block(key_, i / buf.size(), 1.0f, buf.data());
  return buf[i % buf.size()];
}

void CounterNormal::fill(float* out, std::size_t n, float stddev) const {
  constexpr std::size_t kBlock = 2 * kPairBlock;
  const std::size_t full = n / kBlock;
  for (std::size_t b = 0; b < full; ++b) normal_block(key_, b, stddev, out + b * kBlock);
  if (const std::size_t rest = n - full * kBlock; rest > 0) {
    std::array<float, kBlock> buf{};
    normal_block(key_, full, stddev, buf.data());
    std::copy(buf.begin(), buf.begin() + static_cast<std::ptrdiff_t>(rest), out + full * kBlock);
  }
}

}  // namespace featinv
