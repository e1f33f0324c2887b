// Copyright 2026 The featinv Authors
// SPDX-License-Identifier: Apache-2.0

#include "featinv/nn.hpp"

#include <cmath>
#include <limits>

#include "featinv/error.hpp"

namespace featinv::nn {

namespace {

Matrix init_matrix(Index rows, Index cols, Index fan_in, Index fan_out, Init init, Rng& rng) {
  switch (init) {
    case Init::kXavierUniform: {
      const float a = std::sqrt(6.0f / static_cast<float>(fan_in + fan_out));
      return rng.uniform_matrix(rows, cols, -a, a);
    }
    case Init::kKaimingNormal:
      return rng.normal_matrix(rows, cols, std::sqrt(2.0f / static_cast<float>(fan_in)));
    case Init::kNormal002:
      return rng.normal_matrix(rows, cols, 0.02f);
    case Init::kZeros:
      return Matrix::Zero(rows, cols);
  }
  return Matrix::Zero(rows, cols);
}

}  // namespace

Linear::Linear(int in_features, int out_features, bool with_bias, Rng& rng, Init init)
    : weight(init_matrix(out_features, in_features, in_features, out_features, init, rng), true) {
  if (with_bias) bias = Tensor::zeros(1, out_features, true);
}

Tensor Linear::forward(const Tensor& x) const {
  Tensor y = ops::matmul_nt(x, weight);
  return bias.defined() ? ops::add_row(y, bias) : y;
}

NamedParams Linear::params() const {
  NamedParams p{{"weight", weight}};
  if (bias.defined()) p.emplace_back("bias", bias);
  return p;
}

LayerNorm::LayerNorm(int dim, float eps_)
    : weight(Matrix::Ones(1, dim), true), bias(Matrix::Zero(1, dim), true), eps(eps_) {}

Tensor LayerNorm::forward(const Tensor& x) const { return ops::layer_norm_rows(x, weight, bias, eps); }

NamedParams LayerNorm::params() const { return {{"weight", weight}, {"bias", bias}}; }

Conv2d::Conv2d(int in_channels, int out_channels, ops::Conv2dGeometry g, bool with_bias, Rng& rng, Init init)
    : geometry(g) {
  const Index per_out = static_cast<Index>(in_channels / g.groups) * g.kernel * g.kernel;
  const Index fan_out = static_cast<Index>(out_channels / g.groups) * g.kernel * g.kernel;
  weight = Tensor(init_matrix(out_channels, per_out, per_out, fan_out, init, rng), true);
  if (with_bias) bias = Tensor::zeros(out_channels, 1, true);
}

Tensor Conv2d::forward(const Tensor& x) const { return ops::conv2d(x, weight, bias, geometry); }

NamedParams Conv2d::params() const {
  NamedParams p{{"weight", weight}};
  if (bias.defined()) p.emplace_back("bias", bias);
  return p;
}

BatchNorm2d::BatchNorm2d(int channels, float eps_)
    : weight(Matrix::Ones(channels, 1)),
      bias(Matrix::Zero(channels, 1)),
      running_mean(Matrix::Zero(channels, 1)),
      running_var(Matrix::Ones(channels, 1)),
      eps(eps_) {}

Tensor BatchNorm2d::forward(const Tensor& x) const {
  if (x.rows() != weight.rows()) throw ShapeError("batch norm: channel mismatch");
  Matrix s = weight.value().array() / (running_var.value().array() + eps).sqrt();
  Matrix shift = bias.value().array() - running_mean.value().array() * s.array();
  return ops::add_col(ops::mul_col(x, Tensor(std::move(s))), Tensor(std::move(shift)));
}

NamedParams BatchNorm2d::params() const {
  return {{"weight", weight}, {"bias", bias}, {"running_mean", running_mean}, {"running_var", running_var}};
}

MultiHeadAttention::MultiHeadAttention(int dim, int kv_dim, int heads_, Rng& rng)
    : q_proj(dim, dim, true, rng),
      k_proj(kv_dim, dim, true, rng),
      v_proj(kv_dim, dim, true, rng),
      out_proj(dim, dim, true, rng),
      heads(heads_) {
  if (heads < 1 || dim % heads != 0) throw ShapeError("attention width not divisible by head count");
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads, const Matrix* mask) {
  const Index dim = q.cols();
  const Index hd = dim / heads;
  const float sc = 1.0f / std::sqrt(static_cast<float>(hd));
  if (heads == 1) {
    Tensor s = ops::scale(ops::matmul_nt(q, k), sc);
    if (mask) s = ops::add_constant(s, *mask);
    return ops::matmul(ops::softmax_rows(s), v);
  }
  std::vector<Tensor> outs;
  outs.reserve(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Tensor qh = ops::slice_cols(q, h * hd, hd);
    Tensor kh = ops::slice_cols(k, h * hd, hd);
    Tensor vh = ops::slice_cols(v, h * hd, hd);
    Tensor s = ops::scale(ops::matmul_nt(qh, kh), sc);
    if (mask) s = ops::add_constant(s, *mask);
    outs.push_back(ops::matmul(ops::softmax_rows(s), vh));
  }
  return ops::concat_cols(outs);
}

Tensor MultiHeadAttention::forward(const Tensor& query, const Tensor& kv, const Matrix* mask) const {
  Tensor q = q_proj.forward(query);
  Tensor k = k_proj.forward(kv);
  Tensor v = v_proj.forward(kv);
  return out_proj.forward(attention(q, k, v, heads, mask));
}

NamedParams MultiHeadAttention::params() const {
  NamedParams p;
  append_params(p, "q_proj", q_proj.params());
  append_params(p, "k_proj", k_proj.params());
  append_params(p, "v_proj", v_proj.params());
  append_params(p, "out_proj", out_proj.params());
  return p;
}

Matrix causal_mask(Index length, Index prefix) {
  Matrix m = Matrix::Zero(length, length);
  const float blocked = -1e9f;
  for (Index i = 0; i < length; ++i) {
    for (Index j = 0; j < length; ++j) {
      const bool visible = j <= i || (i < prefix && j < prefix);
      if (!visible) m(i, j) = blocked;
    }
  }
  return m;
}

}  // namespace featinv::nn
