// Copyright 2026 The featinv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <vector>

#include "featinv/tensor.hpp"

// Differentiable primitives. Token sequences are [L, d] (one row per token);
// feature maps are [C, H*W] with spatial metadata.
namespace featinv::ops {

Tensor matmul(const Tensor& a, const Tensor& b);
/// a * b^T, the layout of `x W^T` with W stored [out, in].
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);
/// Adds a [1, n] bias to every row.
Tensor add_row(const Tensor& a, const Tensor& bias);
/// Adds a [m, 1] bias to every column (per-channel bias on feature maps).
Tensor add_col(const Tensor& a, const Tensor& bias);
/// Multiplies every row by a [1, n] vector.
Tensor mul_row(const Tensor& a, const Tensor& s);
/// Multiplies every column by a [m, 1] vector (per-channel scale).
Tensor mul_col(const Tensor& a, const Tensor& s);
/// Adds a constant (non-differentiable) matrix, e.g. an attention mask.
Tensor add_constant(const Tensor& a, const Matrix& c);

Tensor relu(const Tensor& a);
Tensor relu6(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor quick_gelu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor hardswish(const Tensor& a);
Tensor hardsigmoid(const Tensor& a);

Tensor softmax_rows(const Tensor& a);
Tensor log_softmax_rows(const Tensor& a);
Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps);

Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& a, Index start, Index count);
Tensor slice_cols(const Tensor& a, Index start, Index count);
/// Row-major reinterpretation; spatial metadata is dropped.
Tensor reshape(const Tensor& a, Index rows, Index cols);

/// Mean over rows -> [1, n].
Tensor mean_rows(const Tensor& a);
/// Mean over columns -> [m, 1]; on feature maps this is global average pooling.
Tensor mean_cols(const Tensor& a);
Tensor sum_all(const Tensor& a);

/// Selects rows of `table` by index (embedding lookup).
Tensor gather_rows(const Tensor& table, std::span<const int> ids);

/// Sum over rows of -log softmax(logits)[target]. Rows whose target is
/// negative are ignored.
Tensor cross_entropy_sum(const Tensor& logits, std::span<const int> targets);

struct Conv2dGeometry {
  int kernel = 1;
  int stride = 1;
  int padding = 0;
  int groups = 1;
};

/// 2-D convolution on a [Cin, H*W] map; weight is [Cout, Cin/groups*k*k]
/// (PyTorch [Cout, Cin/groups, k, k] flattened). `bias` may be undefined.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, const Conv2dGeometry& g);

/// Average pooling with a square window and no padding.
Tensor avg_pool2d(const Tensor& x, int kernel, int stride);

}  // namespace featinv::ops
