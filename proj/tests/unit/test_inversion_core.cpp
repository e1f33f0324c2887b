#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "featinv/error.hpp"
#include "featinv/feature_capture.hpp"
#include "featinv/inversion_core.hpp"
#include "gradcheck.hpp"

using namespace featinv;

namespace {

Matrix mat(Index r, Index c, std::initializer_list<float> v) {
  Matrix m(r, c);
  std::copy(v.begin(), v.end(), m.data());
  return m;
}

InversionConfig small_config(TapShape shape, AttackTask task = AttackTask::kCaption) {
  InversionConfig c;
  c.task = task;
  c.input_shape = std::move(shape);
  c.d_prime = 16;
  c.num_queries = 4;
  c.spatial_channels = 8;
  c.alignment.hidden = 12;
  c.alignment.layers = 2;
  c.alignment.heads = 3;
  c.alignment.text_vocab = 20;
  c.d_lm = 10;
  c.num_classes = 3;
  c.seed = 5;
  return c;
}

Tensor random_feature(const TapShape& s, std::uint64_t seed) {
  Rng rng(seed);
  if (s.size() == 3) return Tensor::spatial(rng.normal_matrix(s[0], s[1] * s[2], 1.0f), int(s[1]), int(s[2]));
  return Tensor(rng.normal_matrix(1, s[0], 1.0f));
}

// Plain-loop reference for one alignment layer with K query rows, no text.
struct RefLayer {
  Matrix q, k, v, o, cq, ck, cv, co, fi, fo;
  Matrix bq, bk, bv, bo, bcq, bck, bcv, bco, bfi, bfo;
  Matrix g1, b1, g2, b2, g3, b3;
};

Matrix ref_ln(const Matrix& x, const Matrix& g, const Matrix& b) {
  Matrix out(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    double mu = 0, var = 0;
    for (Index j = 0; j < x.cols(); ++j) mu += x(i, j);
    mu /= double(x.cols());
    for (Index j = 0; j < x.cols(); ++j) var += (x(i, j) - mu) * (x(i, j) - mu);
    var /= double(x.cols());
    for (Index j = 0; j < x.cols(); ++j) out(i, j) = float((x(i, j) - mu) / std::sqrt(var + 1e-12) * g(0, j) + b(0, j));
  }
  return out;
}

Matrix ref_lin(const Matrix& x, const Matrix& w, const Matrix& b) {
  Matrix out(x.rows(), w.rows());
  for (Index i = 0; i < x.rows(); ++i)
    for (Index o = 0; o < w.rows(); ++o) {
      double acc = b(0, o);
      for (Index j = 0; j < x.cols(); ++j) acc += double(x(i, j)) * w(o, j);
      out(i, o) = float(acc);
    }
  return out;
}

Matrix ref_attn(const Matrix& q, const Matrix& k, const Matrix& v) {
  Matrix out(q.rows(), v.cols());
  for (Index i = 0; i < q.rows(); ++i) {
    std::vector<double> s(static_cast<std::size_t>(k.rows()));
    double mx = -1e300, z = 0;
    for (Index j = 0; j < k.rows(); ++j) {
      double d = 0;
      for (Index c = 0; c < q.cols(); ++c) d += double(q(i, c)) * k(j, c);
      s[j] = d / std::sqrt(double(q.cols()));
      mx = std::max(mx, s[j]);
    }
    for (auto& e : s) z += (e = std::exp(e - mx));
    for (Index c = 0; c < v.cols(); ++c) {
      double acc = 0;
      for (Index j = 0; j < k.rows(); ++j) acc += s[j] / z * v(j, c);
      out(i, c) = float(acc);
    }
  }
  return out;
}

Matrix ref_gelu(Matrix x) {
  for (Index i = 0; i < x.size(); ++i) x.data()[i] = float(0.5 * x.data()[i] * (1 + std::erf(x.data()[i] / std::sqrt(2.0))));
  return x;
}

}  // namespace

TEST_CASE("project_vector identity") {
  auto p = ProjectionParams::from_matrices(Matrix::Identity(3, 3), Matrix::Zero(3, 1));
  Tensor y = project_vector(Tensor(mat(1, 3, {1, -2, 0.5f})), p);
  CHECK(y.value() == mat(1, 3, {1, -2, 0.5f}));
}

TEST_CASE("project_vector hand matrix-vector product") {
  auto p = ProjectionParams::from_matrices(mat(3, 2, {1, 0, 0, 1, 1, 1}), mat(3, 1, {0, 0, 1}));
  Tensor y = project_vector(Tensor(mat(1, 2, {2, 3})), p);
  CHECK(y.value() == mat(1, 3, {2, 3, 6}));
  CHECK_THROWS_AS(project_vector(Tensor(mat(1, 3, {1, 2, 3})), p), ShapeError);
}

TEST_CASE("ViT-B/16 base feature projects to 1024") {
  Rng rng(1);
  ProjectionParams p(EncoderHandle(standard_spec("clip-vit-b16")).tap("base").expected_shape[0], 1024, rng);
  CHECK(project_vector(random_feature({512}, 2), p).cols() == 1024);
}

TEST_CASE("projection is affine") {
  Rng rng(2);
  ProjectionParams p(40, 24, rng);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor f1 = random_feature({40}, 100 + trial), f2 = random_feature({40}, 200 + trial);
    const float a = float(rng.normal()), b = float(rng.normal());
    const Matrix zero = project_vector(Tensor(Matrix::Zero(1, 40)), p).value();
    auto lin = [&](const Matrix& f) { return Matrix(project_vector(Tensor(f), p).value() - zero); };
    const Matrix lhs = lin(a * f1.value() + b * f2.value());
    const Matrix rhs = a * lin(f1.value()) + b * lin(f2.value());
    CHECK((lhs - rhs).norm() <= 1e-5 * std::max(1.0f, rhs.norm()));
  }
}

TEST_CASE("ResNet50 layer2 map projects to 1024") {
  Rng rng(3);
  SpatialProjector g(SpatialProjectorConfig{{512, 28, 28}, 64, 2}, rng);
  ProjectionParams p(g.output_dim(), 1024, rng);
  Tensor y = project_spatial(random_feature({512, 28, 28}, 4), g, p);
  CHECK(y.rows() == 1);
  CHECK(y.cols() == 1024);
  CHECK(g.stem_stride() == 2);
  CHECK_THROWS_AS(project_spatial(random_feature({512, 14, 14}, 4), g, p), ShapeError);
}

TEST_CASE("spatial projection of zeros through a zero affine is zero") {
  Rng rng(4);
  SpatialProjector g(SpatialProjectorConfig{{16, 8, 8}, 8, 2}, rng);
  auto p = ProjectionParams::from_matrices(Matrix::Zero(6, 8), Matrix::Zero(6, 1));
  Tensor y = project_spatial(Tensor::spatial(Matrix::Zero(16, 64), 8, 8), g, p);
  CHECK(y.value().isZero(0.0f));
}

TEST_CASE("seeded spatial projector is deterministic") {
  auto make = [] {
    Rng rng(9);
    return SpatialProjector(SpatialProjectorConfig{{8, 16, 16}, 8, 2}, rng);
  };
  auto g1 = make(), g2 = make();
  Tensor f = random_feature({8, 16, 16}, 5);
  CHECK(g1.forward(f).value() == g2.forward(f).value());
}

TEST_CASE("align output shape K x d''") {
  AlignmentConfig cfg;  // d'' = 768, 12 heads
  Rng rng(6);
  AlignmentTransformer t(cfg, 1024, rng);
  QueryTokens q(32, 1024, rng);
  Tensor z = align(q, random_feature({1024}, 7), {}, t);
  CHECK(z.rows() == 32);
  CHECK(z.cols() == 768);
}

TEST_CASE("inference-mode alignment ignores text") {
  AlignmentConfig cfg;
  cfg.hidden = 16;
  cfg.heads = 4;
  cfg.text_vocab = 30;
  Rng rng(8);
  AlignmentTransformer t(cfg, 16, rng);
  QueryTokens q(5, 16, rng);
  Tensor f = random_feature({16}, 9);
  const std::vector<int> a{1, 2, 3}, b{7, 7, 8, 9, 10, 11};
  const Matrix z0 = align(q, f, {}, t).value();
  CHECK(align(q, f, a, t).value() == z0);
  CHECK(align(q, f, b, t).value() == z0);
  cfg.strict = true;
  t.set_config(cfg);
  CHECK_THROWS_AS(align(q, f, a, t), ValidationError);
}

TEST_CASE("train-mode text never reaches the query outputs") {
  AlignmentConfig cfg;
  cfg.hidden = 16;
  cfg.heads = 4;
  cfg.text_vocab = 30;
  cfg.mode = AlignMode::kTrainWithText;
  Rng rng(10);
  AlignmentTransformer t(cfg, 16, rng);
  QueryTokens q(5, 16, rng);
  Tensor f = random_feature({16}, 11);
  const std::vector<int> a{1, 2, 3}, b{4, 5, 6, 7};
  CHECK((align(q, f, a, t).value() - align(q, f, b, t).value()).cwiseAbs().maxCoeff() < 1e-6f);
}

TEST_CASE("cross-attention step matches a hand computation") {
  // q = [1, -1], keys = values = I: softmax([1, -1] / sqrt 2).
  Tensor q(mat(1, 2, {1, -1}));
  Tensor kv(Matrix::Identity(2, 2));
  const double p1 = 1.0 / (1.0 + std::exp(-std::sqrt(2.0)));
  Tensor out = nn::attention(q, kv, kv, 1, nullptr);
  CHECK(out.value()(0, 0) == doctest::Approx(p1));
  CHECK(out.value()(0, 1) == doctest::Approx(1 - p1));
}

TEST_CASE("single-layer single-head alignment with K=1, d''=2 matches a loop reference") {
  AlignmentConfig cfg;
  cfg.hidden = 2;
  cfg.heads = 1;
  cfg.layers = 1;
  cfg.intermediate = 3;
  Rng rng(12);
  AlignmentTransformer t(cfg, 2, rng);
  QueryTokens q(1, 2, rng);
  q.q.value_mut() = mat(1, 2, {0.3f, -1.2f});
  // Hand-set weights: every parameter gets a distinct small value.
  auto params = t.params();
  float v = 0.1f;
  for (auto& [name, p] : params) {
    for (Index i = 0; i < p.size(); ++i) {
      p.value_mut().data()[i] = (name.find("LayerNorm") != std::string::npos || name.find("layernorm") != std::string::npos)
                                    ? (name.ends_with("weight") ? 1.0f + v : v)
                                    : v * ((i % 2) ? -1.0f : 1.0f);
      v = std::fmod(v * 1.7f + 0.13f, 0.9f);
    }
  }
  auto get = [&](const std::string& n) -> Matrix {
    for (auto& [name, p] : params)
      if (name == n) return p.value();
    FAIL("missing " << n);
    return {};
  };
  const std::string L = "encoder.layer.0.";
  Matrix feats = mat(2, 2, {1.0f, 0.5f, -0.4f, 2.0f});
  Matrix x = ref_ln(q.q.value(), get("layernorm.weight"), get("layernorm.bias"));
  {
    Matrix a = ref_attn(ref_lin(x, get(L + "attention.attention.query.weight"), get(L + "attention.attention.query.bias")),
                        ref_lin(x, get(L + "attention.attention.key.weight"), get(L + "attention.attention.key.bias")),
                        ref_lin(x, get(L + "attention.attention.value.weight"), get(L + "attention.attention.value.bias")));
    x = ref_ln(x + ref_lin(a, get(L + "attention.output.dense.weight"), get(L + "attention.output.dense.bias")),
               get(L + "attention.output.LayerNorm.weight"), get(L + "attention.output.LayerNorm.bias"));
  }
  {
    Matrix c = ref_attn(
        ref_lin(x, get(L + "crossattention.attention.query.weight"), get(L + "crossattention.attention.query.bias")),
        ref_lin(feats, get(L + "crossattention.attention.key.weight"), get(L + "crossattention.attention.key.bias")),
        ref_lin(feats, get(L + "crossattention.attention.value.weight"), get(L + "crossattention.attention.value.bias")));
    x = ref_ln(x + ref_lin(c, get(L + "crossattention.output.dense.weight"), get(L + "crossattention.output.dense.bias")),
               get(L + "crossattention.output.LayerNorm.weight"), get(L + "crossattention.output.LayerNorm.bias"));
  }
  {
    Matrix h = ref_gelu(ref_lin(x, get(L + "intermediate_query.dense.weight"), get(L + "intermediate_query.dense.bias")));
    x = ref_ln(x + ref_lin(h, get(L + "output_query.dense.weight"), get(L + "output_query.dense.bias")),
               get(L + "output_query.LayerNorm.weight"), get(L + "output_query.LayerNorm.bias"));
  }
  Tensor z = t.forward(q, Tensor(feats));
  REQUIRE(z.rows() == 1);
  CHECK((z.value() - x).cwiseAbs().maxCoeff() < 1e-5f);
}

TEST_CASE("to_lm_space") {
  Matrix z = mat(2, 2, {1, 2, 3, 4});
  CHECK(to_lm_space(Tensor(z), LMBridge::from_matrix(Matrix::Identity(2, 2))).value() == z);
  CHECK(to_lm_space(Tensor(z), LMBridge::from_matrix(mat(1, 2, {1, 1}))).value() == mat(2, 1, {3, 7}));
  CHECK(to_lm_space(Tensor(Matrix::Zero(2, 2)), LMBridge::from_matrix(mat(1, 2, {1, 1}))).value().isZero(0.0f));
  CHECK_THROWS_AS(to_lm_space(Tensor(Matrix::Zero(2, 3)), LMBridge::from_matrix(mat(1, 2, {1, 1}))), ShapeError);
}

TEST_CASE("shape closure over every standard tap") {
  for (const auto& name : standard_spec_names()) {
    if (name == "clip-rn101") continue;  // same taps as clip-rn50 except base width
    EncoderHandle h(standard_spec(name));
    for (const auto& tp : h.spec().tap_points) {
      CAPTURE(name);
      CAPTURE(tp.layer_name);
      auto cfg = small_config(tp.expected_shape);
      InversionModel m(cfg);
      Tensor e = m.lm_prefix(random_feature(tp.expected_shape, 13));
      CHECK(e.rows() == cfg.num_queries);
      CHECK(e.cols() == cfg.d_lm);
    }
  }
}

TEST_CASE("alignment rejects hidden sizes not divisible by heads") {
  AlignmentConfig cfg;
  cfg.hidden = 10;
  cfg.heads = 4;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
}

TEST_CASE("inversion model gradients") {
  auto cfg = small_config({4, 4, 4});
  cfg.d_prime = 6;
  cfg.num_queries = 2;
  cfg.spatial_channels = 3;
  cfg.spatial_blocks = 1;
  cfg.alignment.hidden = 4;
  cfg.alignment.heads = 2;
  cfg.alignment.layers = 1;
  cfg.alignment.intermediate = 5;
  cfg.d_lm = 3;
  InversionModel m(cfg);
  Tensor f = random_feature({4, 4, 4}, 14);
  // Unit-scale queries keep the central differences out of the layer-norm
  // blow-up regime of near-zero inputs.
  Tensor q = m.queries().q;
  q.value_mut() *= 50.0f;
  std::vector<Tensor> ps;
  for (auto& [n, t] : m.params()) ps.push_back(t);
  CHECK(featinv::testing::max_grad_error([&](auto&) { return m.lm_prefix(f); }, ps, 1e-3) < 3e-2);
}

TEST_CASE("checkpoint round trip and version guard") {
  auto dir = std::filesystem::temp_directory_path() / "featinv_test_ckpt";
  std::filesystem::remove_all(dir);
  auto cfg = small_config({24});
  cfg.encoder_id = "toy";
  cfg.layer_name = "base";
  InversionModel m(cfg);
  save_model(m, dir, {{"epoch", 3}});
  nlohmann::json meta;
  InversionModel back = load_model(dir, &meta);
  CHECK(meta["epoch"] == 3);
  CHECK(hash_params(back.params()) == hash_params(m.params()));
  CHECK(back.config().layer_name == "base");
  meta["version"] = 99;
  std::ofstream(dir / "meta.json") << meta.dump();
  CHECK_THROWS_WITH_AS(load_model(dir), doctest::Contains("unsupported checkpoint version"), FormatError);
}

TEST_CASE("label model classifies from the projected feature") {
  auto cfg = small_config({24}, AttackTask::kLabel);
  InversionModel m(cfg);
  CHECK(m.class_logits(random_feature({24}, 15)).cols() == 3);
  for (const auto& [n, t] : m.params()) CHECK_FALSE(n.starts_with("alignment."));
  cfg.label_input = LabelInput::kPooledAligned;
  InversionModel pooled(cfg);
  CHECK(pooled.class_logits(random_feature({24}, 15)).cols() == 3);
}

TEST_CASE("pretrained alignment weights load where shapes match") {
  auto cfg = small_config({24});
  InversionModel donor(cfg);
  cfg.seed = 99;
  InversionModel m(cfg);
  TensorMap src;
  for (auto& [k, v] : to_tensor_map(donor.params())) {
    if (k == "queries.query_tokens") {
      HostTensor q = v;
      q.shape.insert(q.shape.begin(), 1);
      src["qformer.query_tokens"] = q;
    } else if (k.starts_with("alignment.")) {
      src["qformer." + k.substr(10)] = v;
    }
  }
  src["qformer.encoder.layer.0.attention.attention.query.weight"] = HostTensor{{3, 3}, std::vector<float>(9, 0.f)};
  const auto loaded = m.load_pretrained_alignment(src);
  CHECK(std::find(loaded.begin(), loaded.end(), "queries.query_tokens") != loaded.end());
  CHECK(std::find(loaded.begin(), loaded.end(), "alignment.encoder.layer.0.attention.attention.query.weight") ==
        loaded.end());
  CHECK(m.queries().q.value() == donor.queries().q.value());
}
