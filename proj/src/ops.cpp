// Copyright 2026 The featinv Authors
// SPDX-License-Identifier: Apache-2.0

#include "featinv/ops.hpp"

#include <cmath>
#include <string>

#include "featinv/error.hpp"

namespace featinv::ops {

namespace {

std::string dims(const Tensor& t) {
  return "[" + std::to_string(t.rows()) + "x" + std::to_string(t.cols()) + "]";
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + dims(a) + " vs " + dims(b));
  }
}

template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& a, Fwd fwd, Deriv deriv) {
  Matrix out = a.value().unaryExpr(fwd);
  return make_result(std::move(out), {a}, [a, deriv](const Matrix& g) {
    accumulate_grad(a, g.cwiseProduct(a.value().unaryExpr(deriv)));
  });
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul: " + dims(a) + " x " + dims(b));
  Matrix out = a.value() * b.value();
  return make_result(std::move(out), {a, b}, [a, b](const Matrix& g) {
    if (a.requires_grad()) accumulate_grad(a, g * b.value().transpose());
    if (b.requires_grad()) accumulate_grad(b, a.value().transpose() * g);
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) throw ShapeError("matmul_nt: " + dims(a) + " x " + dims(b) + "^T");
  Matrix out = a.value() * b.value().transpose();
  return make_result(std::move(out), {a, b}, [a, b](const Matrix& g) {
    if (a.requires_grad()) accumulate_grad(a, g * b.value());
    if (b.requires_grad()) accumulate_grad(b, g.transpose() * a.value());
  });
}

Tensor transpose(const Tensor& a) {
  Matrix out = a.value().transpose();
  return make_result(std::move(out), {a}, [a](const Matrix& g) { accumulate_grad(a, g.transpose()); });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same(a, b, "add");
  Matrix out = a.value() + b.value();
  return make_result(std::move(out), {a, b}, [a, b](const Matrix& g) {
    accumulate_grad(a, g);
    accumulate_grad(b, g);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same(a, b, "sub");
  Matrix out = a.value() - b.value();
  return make_result(std::move(out), {a, b}, [a, b](const Matrix& g) {
    accumulate_grad(a, g);
    if (b.requires_grad()) accumulate_grad(b, -g);
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same(a, b, "mul");
  Matrix out = a.value().cwiseProduct(b.value());
  return make_result(std::move(out), {a, b}, [a, b](const Matrix& g) {
    if (a.requires_grad()) accumulate_grad(a, g.cwiseProduct(b.value()));
    if (b.requires_grad()) accumulate_grad(b, g.cwiseProduct(a.value()));
  });
}

Tensor scale(const Tensor& a, float s) {
  Matrix out = a.value() * s;
  return make_result(std::move(out), {a}, [a, s](const Matrix& g) { accumulate_grad(a, g * s); });
}

Tensor add_row(const Tensor& a, const Tensor& bias) {
  if (bias.rows() != 1 || bias.cols() != a.cols()) throw ShapeError("add_row: " + dims(a) + " + " + dims(bias));
  Matrix out = a.value().rowwise() + bias.value().row(0);
  return make_result(std::move(out), {a, bias}, [a, bias](const Matrix& g) {
    accumulate_grad(a, g);
    if (bias.requires_grad()) accumulate_grad(bias, g.colwise().sum());
  });
}

Tensor add_col(const Tensor& a, const Tensor& bias) {
  if (bias.cols() != 1 || bias.rows() != a.rows()) throw ShapeError("add_col: " + dims(a) + " + " + dims(bias));
  Matrix out = a.value().colwise() + bias.value().col(0);
  return make_result(std::move(out), {a, bias}, [a, bias](const Matrix& g) {
    accumulate_grad(a, g);
    if (bias.requires_grad()) accumulate_grad(bias, g.rowwise().sum());
  });
}

Tensor mul_row(const Tensor& a, const Tensor& s) {
  if (s.rows() != 1 || s.cols() != a.cols()) throw ShapeError("mul_row: " + dims(a) + " * " + dims(s));
  Matrix out = a.value().array().rowwise() * s.value().row(0).array();
  return make_result(std::move(out), {a, s}, [a, s](const Matrix& g) {
    if (a.requires_grad()) {
      Matrix ga = g.array().rowwise() * s.value().row(0).array();
      accumulate_grad(a, ga);
    }
    if (s.requires_grad()) accumulate_grad(s, g.cwiseProduct(a.value()).colwise().sum());
  });
}

Tensor mul_col(const Tensor& a, const Tensor& s) {
  if (s.cols() != 1 || s.rows() != a.rows()) throw ShapeError("mul_col: " + dims(a) + " * " + dims(s));
  Matrix out = a.value().array().colwise() * s.value().col(0).array();
  return make_result(std::move(out), {a, s}, [a, s](const Matrix& g) {
    if (a.requires_grad()) {
      Matrix ga = g.array().colwise() * s.value().col(0).array();
      accumulate_grad(a, ga);
    }
    if (s.requires_grad()) accumulate_grad(s, g.cwiseProduct(a.value()).rowwise().sum());
  });
}

Tensor add_constant(const Tensor& a, const Matrix& c) {
  if (c.rows() != a.rows() || c.cols() != a.cols()) throw ShapeError("add_constant: shape mismatch");
  Matrix out = a.value() + c;
  return make_result(std::move(out), {a}, [a](const Matrix& g) { accumulate_grad(a, g); });
}

Tensor relu(const Tensor& a) {
  return unary(a, [](float x) { return x > 0.0f ? x : 0.0f; },
               [](float x) { return x > 0.0f ? 1.0f : 0.0f; });
}

Tensor relu6(const Tensor& a) {
  return unary(a, [](float x) { return std::min(std::max(x, 0.0f), 6.0f); },
               [](float x) { return (x > 0.0f && x < 6.0f) ? 1.0f : 0.0f; });
}

Tensor gelu(const Tensor& a) {
  constexpr float kInvSqrt2 = 0.70710678118654752f;
  constexpr float kInvSqrt2Pi = 0.39894228040143268f;
  return unary(
      a, [](float x) { return 0.5f * x * (1.0f + std::erf(x * kInvSqrt2)); },
      [](float x) {
        return 0.5f * (1.0f + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5f * x * x);
      });
}

Tensor quick_gelu(const Tensor& a) {
  return unary(
      a, [](float x) { return x / (1.0f + std::exp(-1.702f * x)); },
      [](float x) {
        const float s = 1.0f / (1.0f + std::exp(-1.702f * x));
        return s + 1.702f * x * s * (1.0f - s);
      });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a, [](float x) { return 1.0f / (1.0f + std::exp(-x)); },
      [](float x) {
        const float s = 1.0f / (1.0f + std::exp(-x));
        return s * (1.0f - s);
      });
}

Tensor tanh(const Tensor& a) {
  return unary(
      a, [](float x) { return std::tanh(x); },
      [](float x) {
        const float t = std::tanh(x);
        return 1.0f - t * t;
      });
}

Tensor hardswish(const Tensor& a) {
  return unary(
      a, [](float x) { return x * std::min(std::max(x + 3.0f, 0.0f), 6.0f) / 6.0f; },
      [](float x) {
        if (x <= -3.0f) return 0.0f;
        if (x >= 3.0f) return 1.0f;
        return (2.0f * x + 3.0f) / 6.0f;
      });
}

Tensor hardsigmoid(const Tensor& a) {
  return unary(
      a, [](float x) { return std::min(std::max(x + 3.0f, 0.0f), 6.0f) / 6.0f; },
      [](float x) { return (x > -3.0f && x < 3.0f) ? 1.0f / 6.0f : 0.0f; });
}

Tensor softmax_rows(const Tensor& a) {
  Matrix out(a.rows(), a.cols());
  for (Index r = 0; r < a.rows(); ++r) {
    const float m = a.value().row(r).maxCoeff();
    out.row(r) = (a.value().row(r).array() - m).exp();
    out.row(r) /= out.row(r).sum();
  }
  Matrix y = out;
  return make_result(std::move(out), {a}, [a, y = std::move(y)](const Matrix& g) {
    Eigen::VectorXf dot = g.cwiseProduct(y).rowwise().sum();
    Matrix ga = y.cwiseProduct(g.colwise() - dot);
    accumulate_grad(a, ga);
  });
}

Tensor log_softmax_rows(const Tensor& a) {
  Matrix out(a.rows(), a.cols());
  for (Index r = 0; r < a.rows(); ++r) {
    const float m = a.value().row(r).maxCoeff();
    const float lse = m + std::log((a.value().row(r).array() - m).exp().sum());
    out.row(r) = a.value().row(r).array() - lse;
  }
  Matrix y = out;
  return make_result(std::move(out), {a}, [a, y = std::move(y)](const Matrix& g) {
    Eigen::VectorXf gs = g.rowwise().sum();
    Matrix ga = g - (y.array().exp().colwise() * gs.array()).matrix();
    accumulate_grad(a, ga);
  });
}

Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
  const Index n = x.cols();
  if (gamma.rows() != 1 || gamma.cols() != n || beta.rows() != 1 || beta.cols() != n) {
    throw ShapeError("layer_norm: affine shape " + dims(gamma) + " for input " + dims(x));
  }
  Matrix xhat(x.rows(), n);
  Eigen::VectorXf inv(x.rows());
  for (Index r = 0; r < x.rows(); ++r) {
    const float mu = x.value().row(r).mean();
    const float var = (x.value().row(r).array() - mu).square().mean();
    inv(r) = 1.0f / std::sqrt(var + eps);
    xhat.row(r) = (x.value().row(r).array() - mu) * inv(r);
  }
  Matrix out = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() + beta.value().row(0).array();
  return make_result(std::move(out), {x, gamma, beta},
                     [x, gamma, beta, xhat = std::move(xhat), inv = std::move(inv), n](const Matrix& g) {
                       if (gamma.requires_grad()) accumulate_grad(gamma, g.cwiseProduct(xhat).colwise().sum());
                       if (beta.requires_grad()) accumulate_grad(beta, g.colwise().sum());
                       if (x.requires_grad()) {
                         Matrix dxhat = g.array().rowwise() * gamma.value().row(0).array();
                         Eigen::VectorXf s1 = dxhat.rowwise().sum();
                         Eigen::VectorXf s2 = dxhat.cwiseProduct(xhat).rowwise().sum();
                         Matrix dx(x.rows(), n);
                         const float fn = static_cast<float>(n);
                         for (Index r = 0; r < x.rows(); ++r) {
                           dx.row(r) = (inv(r) / fn) *
                                       (fn * dxhat.row(r).array() - s1(r) - xhat.row(r).array() * s2(r));
                         }
                         accumulate_grad(x, dx);
                       }
                     });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  Index rows = 0;
  const Index cols = parts.front().cols();
  for (const auto& p : parts) {
    if (p.cols() != cols) throw ShapeError("concat_rows: column mismatch");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  Index off = 0;
  for (const auto& p : parts) {
    out.middleRows(off, p.rows()) = p.value();
    off += p.rows();
  }
  return make_result(std::move(out), parts, [parts](const Matrix& g) {
    Index o = 0;
    for (const auto& p : parts) {
      if (p.requires_grad()) accumulate_grad(p, g.middleRows(o, p.rows()));
      o += p.rows();
    }
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  Index cols = 0;
  const Index rows = parts.front().rows();
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ShapeError("concat_cols: row mismatch");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  Index off = 0;
  for (const auto& p : parts) {
    out.middleCols(off, p.cols()) = p.value();
    off += p.cols();
  }
  return make_result(std::move(out), parts, [parts](const Matrix& g) {
    Index o = 0;
    for (const auto& p : parts) {
      if (p.requires_grad()) accumulate_grad(p, g.middleCols(o, p.cols()));
      o += p.cols();
    }
  });
}

Tensor slice_rows(const Tensor& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw ShapeError("slice_rows out of range");
  Matrix out = a.value().middleRows(start, count);
  return make_result(std::move(out), {a}, [a, start, count](const Matrix& g) {
    if (!a.requires_grad()) return;
    Matrix full = Matrix::Zero(a.rows(), a.cols());
    full.middleRows(start, count) = g;
    accumulate_grad(a, full);
  });
}

Tensor slice_cols(const Tensor& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw ShapeError("slice_cols out of range");
  Matrix out = a.value().middleCols(start, count);
  return make_result(std::move(out), {a}, [a, start, count](const Matrix& g) {
    if (!a.requires_grad()) return;
    Matrix full = Matrix::Zero(a.rows(), a.cols());
    full.middleCols(start, count) = g;
    accumulate_grad(a, full);
  });
}

Tensor reshape(const Tensor& a, Index rows, Index cols) {
  if (rows * cols != a.size()) throw ShapeError("reshape: element count mismatch");
  Matrix out = Eigen::Map<const Matrix>(a.value().data(), rows, cols);
  auto result = make_result(std::move(out), {a}, [a](const Matrix& g) {
    accumulate_grad(a, Eigen::Map<const Matrix>(g.data(), a.rows(), a.cols()));
  });
  result.node()->height = 0;
  result.node()->width = 0;
  return result;
}

Tensor mean_rows(const Tensor& a) {
  Matrix out = a.value().colwise().mean();
  return make_result(std::move(out), {a}, [a](const Matrix& g) {
    Matrix ga = g.replicate(a.rows(), 1) / static_cast<float>(a.rows());
    accumulate_grad(a, ga);
  });
}

Tensor mean_cols(const Tensor& a) {
  Matrix out = a.value().rowwise().mean();
  auto t = make_result(std::move(out), {a}, [a](const Matrix& g) {
    Matrix ga = g.replicate(1, a.cols()) / static_cast<float>(a.cols());
    accumulate_grad(a, ga);
  });
  t.node()->height = 0;
  t.node()->width = 0;
  return t;
}

Tensor sum_all(const Tensor& a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return make_result(std::move(out), {a}, [a](const Matrix& g) {
    accumulate_grad(a, Matrix::Constant(a.rows(), a.cols(), g(0, 0)));
  });
}

Tensor gather_rows(const Tensor& table, std::span<const int> ids) {
  Matrix out(static_cast<Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= table.rows()) {
      throw ShapeError("gather_rows: index " + std::to_string(ids[i]) + " outside table of " +
                       std::to_string(table.rows()) + " rows");
    }
    out.row(static_cast<Index>(i)) = table.value().row(ids[i]);
  }
  std::vector<int> idx(ids.begin(), ids.end());
  return make_result(std::move(out), {table}, [table, idx = std::move(idx)](const Matrix& g) {
    if (!table.requires_grad()) return;
    Matrix full = Matrix::Zero(table.rows(), table.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) full.row(idx[i]) += g.row(static_cast<Index>(i));
    accumulate_grad(table, full);
  });
}

Tensor cross_entropy_sum(const Tensor& logits, std::span<const int> targets) {
  if (static_cast<Index>(targets.size()) != logits.rows()) throw ShapeError("cross_entropy: target count mismatch");
  Matrix probs(logits.rows(), logits.cols());
  double total = 0.0;
  for (Index r = 0; r < logits.rows(); ++r) {
    const float m = logits.value().row(r).maxCoeff();
    probs.row(r) = (logits.value().row(r).array() - m).exp();
    const float z = probs.row(r).sum();
    probs.row(r) /= z;
    const int t = targets[static_cast<std::size_t>(r)];
    if (t < 0) continue;
    if (t >= logits.cols()) throw ShapeError("cross_entropy: target " + std::to_string(t) + " outside vocabulary");
    total -= static_cast<double>(logits.value()(r, t) - m - std::log(z));
  }
  Matrix out(1, 1);
  out(0, 0) = static_cast<float>(total);
  std::vector<int> tgt(targets.begin(), targets.end());
  return make_result(std::move(out), {logits}, [logits, probs = std::move(probs), tgt = std::move(tgt)](const Matrix& g) {
    Matrix ga = probs;
    for (Index r = 0; r < ga.rows(); ++r) {
      const int t = tgt[static_cast<std::size_t>(r)];
      if (t < 0) {
        ga.row(r).setZero();
      } else {
        ga(r, t) -= 1.0f;
      }
    }
    accumulate_grad(logits, ga * g(0, 0));
  });
}

namespace {

struct ConvDims {
  int cin, h, w, cout, ho, wo, cin_g, cout_g;
};

ConvDims conv_dims(const Tensor& x, const Tensor& weight, const Conv2dGeometry& g) {
  if (!x.is_spatial()) throw ShapeError("conv2d: input is not a feature map");
  ConvDims d{};
  d.cin = static_cast<int>(x.rows());
  d.h = x.height();
  d.w = x.width();
  d.cout = static_cast<int>(weight.rows());
  if (g.groups < 1 || d.cin % g.groups != 0 || d.cout % g.groups != 0) {
    throw ShapeError("conv2d: channels not divisible by groups");
  }
  d.cin_g = d.cin / g.groups;
  d.cout_g = d.cout / g.groups;
  if (weight.cols() != static_cast<Index>(d.cin_g) * g.kernel * g.kernel) {
    throw ShapeError("conv2d: weight " + dims(weight) + " does not match " + std::to_string(d.cin) +
                     " input channels with kernel " + std::to_string(g.kernel));
  }
  d.ho = (d.h + 2 * g.padding - g.kernel) / g.stride + 1;
  d.wo = (d.w + 2 * g.padding - g.kernel) / g.stride + 1;
  if (d.ho <= 0 || d.wo <= 0) throw ShapeError("conv2d: output would be empty");
  return d;
}

// Lowers channels [c0, c0+cn) of `x` into a [cn*k*k, ho*wo] patch matrix.
void im2col(const float* x, int c0, int cn, const ConvDims& d, const Conv2dGeometry& g, Matrix& col) {
  const int k = g.kernel;
  col.resize(static_cast<Index>(cn) * k * k, static_cast<Index>(d.ho) * d.wo);
  for (int c = 0; c < cn; ++c) {
    const float* plane = x + static_cast<std::size_t>(c0 + c) * d.h * d.w;
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        float* dst = col.row((static_cast<Index>(c) * k + ki) * k + kj).data();
        for (int oy = 0; oy < d.ho; ++oy) {
          const int iy = oy * g.stride - g.padding + ki;
          float* drow = dst + static_cast<std::size_t>(oy) * d.wo;
          if (iy < 0 || iy >= d.h) {
            std::fill(drow, drow + d.wo, 0.0f);
            continue;
          }
          const float* srow = plane + static_cast<std::size_t>(iy) * d.w;
          for (int ox = 0; ox < d.wo; ++ox) {
            const int ix = ox * g.stride - g.padding + kj;
            drow[ox] = (ix < 0 || ix >= d.w) ? 0.0f : srow[ix];
          }
        }
      }
    }
  }
}

void col2im(const Matrix& col, int c0, int cn, const ConvDims& d, const Conv2dGeometry& g, float* dx) {
  const int k = g.kernel;
  for (int c = 0; c < cn; ++c) {
    float* plane = dx + static_cast<std::size_t>(c0 + c) * d.h * d.w;
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        const float* src = col.row((static_cast<Index>(c) * k + ki) * k + kj).data();
        for (int oy = 0; oy < d.ho; ++oy) {
          const int iy = oy * g.stride - g.padding + ki;
          if (iy < 0 || iy >= d.h) continue;
          float* drow = plane + static_cast<std::size_t>(iy) * d.w;
          const float* srow = src + static_cast<std::size_t>(oy) * d.wo;
          for (int ox = 0; ox < d.wo; ++ox) {
            const int ix = ox * g.stride - g.padding + kj;
            if (ix >= 0 && ix < d.w) drow[ix] += srow[ox];
          }
        }
      }
    }
  }
}

bool is_pointwise(const Conv2dGeometry& g) { return g.kernel == 1 && g.stride == 1 && g.padding == 0; }

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, const Conv2dGeometry& g) {
  const ConvDims d = conv_dims(x, weight, g);
  if (bias.defined() && (bias.rows() != d.cout || bias.cols() != 1)) throw ShapeError("conv2d: bias shape");
  Matrix out(d.cout, static_cast<Index>(d.ho) * d.wo);
  const float* xd = x.value().data();
  const bool depthwise = d.cin_g == 1 && d.cout_g == 1;

  if (depthwise) {
    const int k = g.kernel;
    for (int c = 0; c < d.cout; ++c) {
      const float* plane = xd + static_cast<std::size_t>(c) * d.h * d.w;
      const float* wk = weight.value().row(c).data();
      float* orow = out.row(c).data();
      for (int oy = 0; oy < d.ho; ++oy) {
        for (int ox = 0; ox < d.wo; ++ox) {
          float acc = 0.0f;
          for (int ki = 0; ki < k; ++ki) {
            const int iy = oy * g.stride - g.padding + ki;
            if (iy < 0 || iy >= d.h) continue;
            for (int kj = 0; kj < k; ++kj) {
              const int ix = ox * g.stride - g.padding + kj;
              if (ix < 0 || ix >= d.w) continue;
              acc += wk[ki * k + kj] * plane[iy * d.w + ix];
            }
          }
          orow[oy * d.wo + ox] = acc;
        }
      }
    }
  } else if (g.groups == 1 && is_pointwise(g)) {
    out.noalias() = weight.value() * x.value();
  } else {
    Matrix col;
    for (int gi = 0; gi < g.groups; ++gi) {
      im2col(xd, gi * d.cin_g, d.cin_g, d, g, col);
      out.middleRows(gi * d.cout_g, d.cout_g).noalias() = weight.value().middleRows(gi * d.cout_g, d.cout_g) * col;
    }
  }
  if (bias.defined()) out.colwise() += bias.value().col(0);

  auto result = make_result(std::move(out), {x, weight, bias}, [x, weight, bias, d, g, depthwise](const Matrix& go) {
    if (bias.requires_grad()) accumulate_grad(bias, go.rowwise().sum());
    const bool need_x = x.requires_grad();
    const bool need_w = weight.requires_grad();
    Matrix dx;
    if (need_x) dx = Matrix::Zero(d.cin, static_cast<Index>(d.h) * d.w);
    if (depthwise) {
      const int k = g.kernel;
      Matrix dw = Matrix::Zero(weight.rows(), weight.cols());
      const float* xd = x.value().data();
      for (int c = 0; c < d.cout; ++c) {
        const float* plane = xd + static_cast<std::size_t>(c) * d.h * d.w;
        const float* wk = weight.value().row(c).data();
        const float* grow = go.row(c).data();
        float* dwk = dw.row(c).data();
        float* dxp = need_x ? dx.row(c).data() : nullptr;
        for (int oy = 0; oy < d.ho; ++oy) {
          for (int ox = 0; ox < d.wo; ++ox) {
            const float gv = grow[oy * d.wo + ox];
            for (int ki = 0; ki < k; ++ki) {
              const int iy = oy * g.stride - g.padding + ki;
              if (iy < 0 || iy >= d.h) continue;
              for (int kj = 0; kj < k; ++kj) {
                const int ix = ox * g.stride - g.padding + kj;
                if (ix < 0 || ix >= d.w) continue;
                dwk[ki * k + kj] += gv * plane[iy * d.w + ix];
                if (dxp) dxp[iy * d.w + ix] += gv * wk[ki * k + kj];
              }
            }
          }
        }
      }
      if (need_w) accumulate_grad(weight, dw);
    } else if (g.groups == 1 && is_pointwise(g)) {
      if (need_w) accumulate_grad(weight, go * x.value().transpose());
      if (need_x) dx.noalias() = weight.value().transpose() * go;
    } else {
      Matrix col;
      Matrix dw;
      if (need_w) dw = Matrix::Zero(weight.rows(), weight.cols());
      for (int gi = 0; gi < g.groups; ++gi) {
        const auto gslice = go.middleRows(gi * d.cout_g, d.cout_g);
        if (need_w) {
          im2col(x.value().data(), gi * d.cin_g, d.cin_g, d, g, col);
          dw.middleRows(gi * d.cout_g, d.cout_g).noalias() = gslice * col.transpose();
        }
        if (need_x) {
          Matrix dcol = weight.value().middleRows(gi * d.cout_g, d.cout_g).transpose() * gslice;
          col2im(dcol, gi * d.cin_g, d.cin_g, d, g, dx.data());
        }
      }
      if (need_w) accumulate_grad(weight, dw);
    }
    if (need_x) accumulate_grad(x, dx);
  });
  result.node()->height = d.ho;
  result.node()->width = d.wo;
  return result;
}

Tensor avg_pool2d(const Tensor& x, int kernel, int stride) {
  if (!x.is_spatial()) throw ShapeError("avg_pool2d: input is not a feature map");
  const int h = x.height(), w = x.width();
  const int ho = (h - kernel) / stride + 1, wo = (w - kernel) / stride + 1;
  if (ho <= 0 || wo <= 0) throw ShapeError("avg_pool2d: output would be empty");
  const float inv = 1.0f / static_cast<float>(kernel * kernel);
  Matrix out(x.rows(), static_cast<Index>(ho) * wo);
  for (Index c = 0; c < x.rows(); ++c) {
    const float* p = x.value().row(c).data();
    float* o = out.row(c).data();
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox) {
        float acc = 0.0f;
        for (int i = 0; i < kernel; ++i) {
          for (int j = 0; j < kernel; ++j) acc += p[(oy * stride + i) * w + ox * stride + j];
        }
        o[oy * wo + ox] = acc * inv;
      }
    }
  }
  auto result = make_result(std::move(out), {x}, [x, kernel, stride, h, w, ho, wo, inv](const Matrix& g) {
    Matrix dx = Matrix::Zero(x.rows(), x.cols());
    for (Index c = 0; c < x.rows(); ++c) {
      float* d = dx.row(c).data();
      const float* gr = g.row(c).data();
      for (int oy = 0; oy < ho; ++oy) {
        for (int ox = 0; ox < wo; ++ox) {
          const float v = gr[oy * wo + ox] * inv;
          for (int i = 0; i < kernel; ++i) {
            for (int j = 0; j < kernel; ++j) d[(oy * stride + i) * w + ox * stride + j] += v;
          }
        }
      }
    }
    (void)h;
    accumulate_grad(x, dx);
  });
  result.node()->height = ho;
  result.node()->width = wo;
  return result;
}

}  // namespace featinv::ops
