#include <cmath>

#include "doctest.h"
#include "featinv/nn.hpp"
#include "featinv/ops.hpp"
#include "gradcheck.hpp"

using namespace featinv;
using featinv::testing::max_grad_error;

namespace {

Tensor param(Index r, Index c, std::uint64_t seed, float scale = 1.0f) {
  Rng rng(seed);
  return Tensor(rng.normal_matrix(r, c, scale), true);
}

Tensor map_param(int ch, int h, int w, std::uint64_t seed) {
  Tensor t = param(ch, static_cast<Index>(h) * w, seed);
  t.set_spatial(h, w);
  return t;
}

constexpr double kTol = 2e-2;

}  // namespace

TEST_CASE("matmul family gradients") {
  auto a = param(3, 4, 1), b = param(4, 5, 2), c = param(5, 4, 3);
  CHECK(max_grad_error([](auto& in) { return ops::matmul(in[0], in[1]); }, {a, b}) < kTol);
  CHECK(max_grad_error([](auto& in) { return ops::matmul_nt(in[0], in[1]); }, {a, c}) < kTol);
  CHECK(max_grad_error([](auto& in) { return ops::transpose(in[0]); }, {a}) < kTol);
}

TEST_CASE("elementwise and broadcast gradients") {
  auto a = param(3, 4, 4), b = param(3, 4, 5), r = param(1, 4, 6), c = param(3, 1, 7);
  CHECK(max_grad_error([](auto& in) { return ops::mul(in[0], in[1]); }, {a, b}) < kTol);
  CHECK(max_grad_error([](auto& in) { return ops::sub(in[0], in[1]); }, {a, b}) < kTol);
  CHECK(max_grad_error([](auto& in) { return ops::add_row(in[0], in[1]); }, {a, r}) < kTol);
  CHECK(max_grad_error([](auto& in) { return ops::mul_row(in[0], in[1]); }, {a, r}) < kTol);
  CHECK(max_grad_error([](auto& in) { return ops::add_col(in[0], in[1]); }, {a, c}) < kTol);
  CHECK(max_grad_error([](auto& in) { return ops::mul_col(in[0], in[1]); }, {a, c}) < kTol);
}

TEST_CASE("activation gradients") {
  auto a = param(4, 6, 8, 2.0f);
  for (auto fn : {&ops::gelu, &ops::quick_gelu, &ops::sigmoid, &ops::tanh, &ops::hardswish}) {
    CHECK(max_grad_error([fn](auto& in) { return fn(in[0]); }, {a}, 1e-3) < kTol);
  }
}

TEST_CASE("softmax, log-softmax and layer norm gradients") {
  auto a = param(3, 7, 9), g = param(1, 7, 10), b = param(1, 7, 11);
  CHECK(max_grad_error([](auto& in) { return ops::softmax_rows(in[0]); }, {a}, 1e-3) < kTol);
  CHECK(max_grad_error([](auto& in) { return ops::log_softmax_rows(in[0]); }, {a}, 1e-3) < kTol);
  CHECK(max_grad_error([](auto& in) { return ops::layer_norm_rows(in[0], in[1], in[2], 1e-5f); }, {a, g, b}, 1e-3) <
        kTol);
}

TEST_CASE("shape op gradients") {
  auto a = param(3, 4, 12), b = param(2, 4, 13), c = param(3, 2, 14);
  CHECK(max_grad_error([](auto& in) { return ops::concat_rows({in[0], in[1]}); }, {a, b}) < kTol);
  CHECK(max_grad_error([](auto& in) { return ops::concat_cols({in[0], in[1]}); }, {a, c}) < kTol);
  CHECK(max_grad_error([](auto& in) { return ops::slice_rows(in[0], 1, 2); }, {a}) < kTol);
  CHECK(max_grad_error([](auto& in) { return ops::slice_cols(in[0], 1, 2); }, {a}) < kTol);
  CHECK(max_grad_error([](auto& in) { return ops::reshape(in[0], 2, 6); }, {a}) < kTol);
  CHECK(max_grad_error([](auto& in) { return ops::mean_rows(in[0]); }, {a}) < kTol);
  CHECK(max_grad_error([](auto& in) { return ops::mean_cols(in[0]); }, {a}) < kTol);
}

TEST_CASE("gather and cross entropy gradients") {
  auto table = param(6, 3, 15), logits = param(4, 5, 16);
  const std::vector<int> ids{0, 3, 3, 5};
  const std::vector<int> targets{1, -1, 4, 0};
  CHECK(max_grad_error([&](auto& in) { return ops::gather_rows(in[0], ids); }, {table}) < kTol);
  CHECK(max_grad_error([&](auto& in) { return ops::cross_entropy_sum(in[0], targets); }, {logits}, 1e-3) < kTol);
}

TEST_CASE("cross entropy value matches a hand computation and skips ignored rows") {
  Matrix l(2, 3);
  l << 1, 2, 3, 0, 0, 0;
  const std::vector<int> t{2, -1};
  const double expect = -(3.0 - std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0)));
  CHECK(ops::cross_entropy_sum(Tensor(l), t).item() == doctest::Approx(expect).epsilon(1e-5));
}

TEST_CASE("conv2d gradients across geometries") {
  struct Case {
    int cin, cout, h, w;
    ops::Conv2dGeometry g;
  };
  const Case cases[] = {
      {2, 3, 5, 5, {3, 1, 1, 1}}, {2, 3, 6, 5, {3, 2, 1, 1}}, {4, 4, 5, 5, {3, 1, 1, 4}},
      {3, 2, 4, 4, {1, 1, 0, 1}}, {4, 6, 4, 4, {3, 2, 1, 2}}, {3, 4, 8, 8, {4, 4, 0, 1}},
  };
  for (const auto& c : cases) {
    CAPTURE(c.g.kernel);
    CAPTURE(c.g.groups);
    auto x = map_param(c.cin, c.h, c.w, 17);
    auto w = param(c.cout, c.cin / c.g.groups * c.g.kernel * c.g.kernel, 18, 0.5f);
    auto b = param(c.cout, 1, 19);
    CHECK(max_grad_error([&](auto& in) { return ops::conv2d(in[0], in[1], in[2], c.g); }, {x, w, b}) < kTol);
  }
}

TEST_CASE("conv2d matches direct summation") {
  Rng rng(3);
  Tensor x(rng.normal_matrix(2, 25, 1.0f));
  x.set_spatial(5, 5);
  Tensor w(rng.normal_matrix(3, 2 * 9, 1.0f));
  Tensor y = ops::conv2d(x, w, Tensor(), {3, 2, 1, 1});
  REQUIRE(y.height() == 3);
  REQUIRE(y.width() == 3);
  for (int co = 0; co < 3; ++co) {
    for (int oy = 0; oy < 3; ++oy) {
      for (int ox = 0; ox < 3; ++ox) {
        double acc = 0;
        for (int ci = 0; ci < 2; ++ci)
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              const int iy = oy * 2 - 1 + ky, ix = ox * 2 - 1 + kx;
              if (iy < 0 || ix < 0 || iy >= 5 || ix >= 5) continue;
              acc += w.value()(co, ci * 9 + ky * 3 + kx) * x.value()(ci, iy * 5 + ix);
            }
        CHECK(y.value()(co, oy * 3 + ox) == doctest::Approx(acc).epsilon(1e-4));
      }
    }
  }
}

TEST_CASE("avg pool gradient and value") {
  auto x = map_param(2, 4, 6, 20);
  CHECK(max_grad_error([](auto& in) { return ops::avg_pool2d(in[0], 2, 2); }, {x}) < kTol);
  Tensor y = ops::avg_pool2d(x, 2, 2);
  CHECK(y.height() == 2);
  CHECK(y.width() == 3);
  const auto& v = x.value();
  CHECK(y.value()(1, 0) == doctest::Approx((v(1, 0) + v(1, 1) + v(1, 6) + v(1, 7)) / 4));
}

TEST_CASE("attention gradients with a causal mask") {
  auto q = param(4, 6, 21), k = param(4, 6, 22), v = param(4, 6, 23);
  const Matrix mask = nn::causal_mask(4, 1);
  CHECK(max_grad_error([&](auto& in) { return nn::attention(in[0], in[1], in[2], 2, &mask); }, {q, k, v}, 1e-3) <
        kTol);
}

TEST_CASE("causal mask with bidirectional prefix") {
  const Matrix m = nn::causal_mask(4, 2);
  CHECK(m(0, 1) == 0.0f);
  CHECK(m(1, 0) == 0.0f);
  CHECK(m(0, 2) < -1e8f);
  CHECK(m(2, 3) < -1e8f);
  CHECK(m(3, 0) == 0.0f);
}

TEST_CASE("no-grad mode records no graph") {
  auto a = param(2, 2, 24);
  Tensor y;
  {
    NoGradGuard ng;
    y = ops::mul(a, a);
  }
  CHECK_FALSE(y.requires_grad());
  CHECK(grad_enabled());
}

TEST_CASE("gradient accumulates across shared uses") {
  Tensor a(Matrix::Constant(1, 1, 3.0f), true);
  ops::sum_all(ops::add(ops::mul(a, a), a)).backward();
  CHECK(a.grad()(0, 0) == doctest::Approx(7.0f));
}
