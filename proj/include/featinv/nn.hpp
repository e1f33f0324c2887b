// Copyright 2026 The featinv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <string>

#include "featinv/ops.hpp"
#include "featinv/rng.hpp"
#include "featinv/tensor.hpp"

namespace featinv::nn {

enum class Init { kXavierUniform, kKaimingNormal, kNormal002, kZeros };

/// y = x W^T + b over token rows. W is [out, in], b is [1, out].
struct Linear {
  Tensor weight;
  Tensor bias;

  Linear() = default;
  Linear(int in_features, int out_features, bool with_bias, Rng& rng, Init init = Init::kXavierUniform);

  Tensor forward(const Tensor& x) const;
  int in_features() const { return static_cast<int>(weight.cols()); }
  int out_features() const { return static_cast<int>(weight.rows()); }
  NamedParams params() const;
};

struct LayerNorm {
  Tensor weight;
  Tensor bias;
  float eps = 1e-5f;

  LayerNorm() = default;
  explicit LayerNorm(int dim, float eps = 1e-5f);

  Tensor forward(const Tensor& x) const;
  NamedParams params() const;
};

struct Conv2d {
  Tensor weight;  // [out, in/groups * k * k]
  Tensor bias;    // [out, 1] or undefined
  ops::Conv2dGeometry geometry;

  Conv2d() = default;
  Conv2d(int in_channels, int out_channels, ops::Conv2dGeometry g, bool with_bias, Rng& rng,
         Init init = Init::kKaimingNormal);

  Tensor forward(const Tensor& x) const;
  int out_channels() const { return static_cast<int>(weight.rows()); }
  NamedParams params() const;
};

/// Inference-mode batch norm: fixed running statistics, affine per channel.
struct BatchNorm2d {
  Tensor weight;
  Tensor bias;
  Tensor running_mean;
  Tensor running_var;
  float eps = 1e-5f;

  BatchNorm2d() = default;
  explicit BatchNorm2d(int channels, float eps = 1e-5f);

  Tensor forward(const Tensor& x) const;
  NamedParams params() const;
};

/// Multi-head scaled dot-product attention with separate q/k/v projections.
struct MultiHeadAttention {
  Linear q_proj;
  Linear k_proj;
  Linear v_proj;
  Linear out_proj;
  int heads = 1;

  MultiHeadAttention() = default;
  /// `kv_dim` is the width of the key/value source (cross-attention).
  MultiHeadAttention(int dim, int kv_dim, int heads, Rng& rng);

  /// `mask` is additive, [Lq, Lk]; use -inf-like values to block.
  Tensor forward(const Tensor& query, const Tensor& kv, const Matrix* mask = nullptr) const;
  NamedParams params() const;
};

/// Attention core on already-projected q/k/v, split into `heads` column blocks.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads, const Matrix* mask);

/// Causal mask for a sequence whose first `prefix` rows see each other
/// freely (bidirectional prefix), and later rows see everything before them.
Matrix causal_mask(Index length, Index prefix = 0);

}  // namespace featinv::nn
