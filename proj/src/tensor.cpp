// Copyright 2026 The featinv Authors
// SPDX-License-Identifier: Apache-2.0

#include "featinv/tensor.hpp"

#include <cstring>
#include <unordered_set>

#include "featinv/error.hpp"

namespace featinv {

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor::Tensor(Matrix value, bool requires_grad) : node_(std::make_shared<detail::Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Index rows, Index cols, bool requires_grad) {
  return Tensor(Matrix::Zero(rows, cols), requires_grad);
}

Tensor Tensor::spatial(Matrix value, int height, int width) {
  Tensor t(std::move(value));
  t.set_spatial(height, width);
  return t;
}

Tensor Tensor::scalar(float v) {
  Matrix m(1, 1);
  m(0, 0) = v;
  return Tensor(std::move(m));
}

void Tensor::zero_grad() {
  if (node_) node_->grad.resize(0, 0);
}

Tensor& Tensor::set_spatial(int height, int width) {
  if (static_cast<Index>(height) * width != node_->value.cols()) {
    throw ShapeError("spatial metadata " + std::to_string(height) + "x" + std::to_string(width) +
                     " does not match " + std::to_string(node_->value.cols()) + " columns");
  }
  node_->height = height;
  node_->width = width;
  return *this;
}

float Tensor::item() const {
  if (size() != 1) throw ShapeError("item() on a tensor with " + std::to_string(size()) + " elements");
  return node_->value(0, 0);
}

Tensor Tensor::detach() const {
  Tensor t(node_->value);
  t.node_->height = node_->height;
  t.node_->width = node_->width;
  return t;
}

void Tensor::backward() const {
  if (size() != 1) throw ShapeError("backward() requires a scalar");
  if (!requires_grad()) return;

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      detail::Node* p = n->parents[i++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  if (node_->grad.size() == 0) {
    node_->grad = Matrix::Ones(1, 1);
  } else {
    node_->grad.array() += 1.0f;
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward && n->grad.size() > 0) n->backward(n->grad);
  }
  for (detail::Node* n : order) {
    if (!n->is_leaf) {
      n->backward = nullptr;
      n->parents.clear();
      n->grad.resize(0, 0);
    }
  }
}

Tensor make_result(Matrix value, std::vector<Tensor> parents,
                   std::function<void(const Matrix&)> backward) {
  auto node = std::make_shared<detail::Node>();
  node->value = std::move(value);
  if (!parents.empty() && parents.front().defined() && parents.front().is_spatial() &&
      parents.front().cols() == node->value.cols()) {
    node->height = parents.front().height();
    node->width = parents.front().width();
  }
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& p : parents) needs = needs || p.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->is_leaf = false;
    node->parents.reserve(parents.size());
    for (const auto& p : parents) {
      if (p.defined()) node->parents.push_back(p.node());
    }
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

void append_params(NamedParams& out, const std::string& prefix, const NamedParams& in) {
  for (const auto& [name, t] : in) out.emplace_back(prefix.empty() ? name : prefix + "." + name, t);
}

std::uint64_t hash_params(const NamedParams& params) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& [name, t] : params) {
    mix(name.data(), name.size());
    const std::int64_t dims[2] = {static_cast<std::int64_t>(t.rows()),
                                  static_cast<std::int64_t>(t.cols())};
    mix(dims, sizeof(dims));
    mix(t.value().data(), sizeof(float) * static_cast<std::size_t>(t.size()));
  }
  return h;
}

}  // namespace featinv
