// Copyright 2026 The featinv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace featinv {

using Matrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

namespace detail {

struct Node {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  bool is_leaf = true;
  // Spatial metadata: a [C, H*W] matrix is a C x H x W feature map.
  int height = 0;
  int width = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(const Matrix&)> backward;
};

}  // namespace detail

/// Shared handle to a 2-D float value with optional reverse-mode gradient.
///
/// Copies alias the same storage. Spatial feature maps are stored
/// channel-major as [C, H*W] with the H/W pair carried as metadata, which is
/// the same byte order as a row-major C x H x W tensor.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Matrix value, bool requires_grad = false);

  static Tensor zeros(Index rows, Index cols, bool requires_grad = false);
  static Tensor spatial(Matrix value, int height, int width);
  static Tensor scalar(float v);

  bool defined() const { return node_ != nullptr; }
  const Matrix& value() const { return node_->value; }
  /// Direct access for optimizer updates and in-place hooks. Must not be used
  /// on a tensor whose value is still needed by a pending backward pass.
  Matrix& value_mut() { return node_->value; }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool has_grad() const { return node_ && node_->grad.size() > 0; }
  const Matrix& grad() const { return node_->grad; }
  Matrix& grad_mut() { return node_->grad; }
  void zero_grad();

  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  Index size() const { return node_->value.size(); }
  int height() const { return node_->height; }
  int width() const { return node_->width; }
  bool is_spatial() const { return node_ && node_->height > 0; }
  Tensor& set_spatial(int height, int width);

  float item() const;
  /// Value copy without graph history.
  Tensor detach() const;

  /// Runs reverse accumulation from this 1x1 tensor. The graph below it is
  /// released afterwards; leaf gradients stay in place.
  void backward() const;

  std::shared_ptr<detail::Node> node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  friend Tensor make_result(Matrix value, std::vector<Tensor> parents,
                            std::function<void(const Matrix&)> backward);

  std::shared_ptr<detail::Node> node_;
};

/// Builds an op output. When gradient recording is off or no parent needs a
/// gradient, the result is a detached leaf and `backward` is dropped.
Tensor make_result(Matrix value, std::vector<Tensor> parents,
                   std::function<void(const Matrix&)> backward);

/// Adds `g` into the gradient of `t` if it tracks one.
template <typename Expr>
void accumulate_grad(const Tensor& t, const Expr& g) {
  if (!t.requires_grad()) return;
  auto& node = *t.node();
  if (node.grad.size() == 0) {
    node.grad = g;
  } else {
    node.grad += g;
  }
}

bool grad_enabled();

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Named parameter list; entries alias the owning module's tensors.
using NamedParams = std::vector<std::pair<std::string, Tensor>>;

void append_params(NamedParams& out, const std::string& prefix, const NamedParams& in);

/// FNV-1a over names, shapes and raw bytes of every parameter, in order.
std::uint64_t hash_params(const NamedParams& params);

}  // namespace featinv
