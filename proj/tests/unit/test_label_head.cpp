#include <algorithm>
#include <numeric>

#include "doctest.h"
#include "featinv/error.hpp"
#include "featinv/label_head.hpp"
#include "featinv/rng.hpp"

using namespace featinv;

namespace {

nn::Linear linear(const Matrix& w, const Matrix& b) {
  nn::Linear l;
  l.weight = Tensor(w);
  l.bias = Tensor(b);
  return l;
}

Tensor row(std::initializer_list<float> v) {
  Matrix m(1, static_cast<Index>(v.size()));
  Index i = 0;
  for (float x : v) m(0, i++) = x;
  return Tensor(m);
}

// k-largest by sorting indices with a stable (value desc, index asc) order.
bool in_top_k(const std::vector<float>& logits, int cls, int k) {
  std::vector<int> idx(logits.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return logits[size_t(a)] > logits[size_t(b)]; });
  return std::find(idx.begin(), idx.begin() + std::min<size_t>(size_t(k), idx.size()), cls) !=
         idx.begin() + std::min<size_t>(size_t(k), idx.size());
}

}  // namespace

TEST_CASE("identity classifier picks the larger coordinate") {
  Matrix w(2, 2);
  w << 1, 0, 0, 1;
  auto p = predict_label(row({3, 1}), linear(w, Matrix::Zero(1, 2)));
  CHECK(p.predicted == 0);
  CHECK(p.logits == std::vector<float>{3, 1});
}

TEST_CASE("constant logits from the bias alone") {
  Matrix b(1, 2);
  b << 0.5f, 0.1f;
  auto l = linear(Matrix::Zero(2, 3), b);
  Rng rng(4);
  for (int i = 0; i < 10; ++i) CHECK(predict_label(Tensor(rng.normal_matrix(1, 3, 5.0f)), l).predicted == 0);
}

TEST_CASE("ties go to the lowest class index") {
  auto p = prediction_from_logits({0.2f, 0.7f, 0.7f, 0.7f});
  CHECK(p.predicted == 1);
  CHECK(class_rank(p.logits, 3) == 2);
}

TEST_CASE("input width must match the classifier") {
  auto l = linear(Matrix::Zero(2, 3), Matrix::Zero(1, 2));
  CHECK_THROWS_AS(predict_label(row({1, 2}), l), ShapeError);
  CHECK_THROWS_AS(prediction_from_logits({1.0f}), ValidationError);
}

TEST_CASE("perfect predictions") {
  std::vector<LabelPrediction> ps;
  for (int c = 0; c < 6; ++c) {
    std::vector<float> lg(6, 0.0f);
    lg[size_t(c)] = 1.0f;
    ps.push_back(prediction_from_logits(lg, c));
  }
  auto r = evaluate_classification(ps);
  CHECK(r.top1 == 100.0);
  CHECK(r.top5 == 100.0);
  for (int t = 0; t < 6; ++t)
    for (int p = 0; p < 6; ++p) CHECK(r.confusion_at(t, p) == (t == p ? 1 : 0));
  for (auto& m : r.per_class) CHECK(m.f1 == doctest::Approx(100.0));
}

TEST_CASE("two of three correct") {
  std::vector<LabelPrediction> ps{prediction_from_logits({2, 1, 0}, 0), prediction_from_logits({0, 2, 1}, 1),
                                  prediction_from_logits({2, 1, 0}, 2)};
  auto r = evaluate_classification(ps);
  CHECK(r.top1 == doctest::Approx(66.67).epsilon(1e-4));
  // Class 0: predicted twice, one correct; support 1.
  CHECK(r.per_class[0].precision == doctest::Approx(50.0));
  CHECK(r.per_class[0].recall == doctest::Approx(100.0));
  CHECK(r.per_class[0].f1 == doctest::Approx(2 * 50.0 * 100.0 / 150.0));
  CHECK(r.per_class[2].precision == 0.0);
  CHECK(r.per_class[2].support == 1);
  auto j = r.to_json();
  CHECK(j["per_class"].size() == 3);
  CHECK(j["per_class"][0]["class"] == "0");
  CHECK(r.to_text().find("top1 66.67") != std::string::npos);
}

TEST_CASE("missing true label is an error") {
  std::vector<LabelPrediction> ps{prediction_from_logits({1, 0}, 0), prediction_from_logits({1, 0})};
  CHECK_THROWS_AS(evaluate_classification(ps), ValidationError);
}

TEST_CASE("randomized report properties") {
  Rng rng(77);
  for (int trial = 0; trial < 30; ++trial) {
    const int n = 2 + int(rng.below(9));
    const int count = 1 + int(rng.below(60));
    std::vector<LabelPrediction> ps, scaled;
    int top1 = 0, top5 = 0;
    for (int i = 0; i < count; ++i) {
      std::vector<float> lg(static_cast<size_t>(n));
      // Coarse values make ties common.
      for (auto& v : lg) v = float(rng.below(4));
      const int t = int(rng.below(uint64_t(n)));
      top1 += in_top_k(lg, t, 1);
      top5 += in_top_k(lg, t, 5);
      ps.push_back(prediction_from_logits(lg, t));
      for (auto& v : lg) v *= 3.5f;
      scaled.push_back(prediction_from_logits(lg, t));
      CHECK(scaled.back().predicted == ps.back().predicted);
    }
    auto r = evaluate_classification(ps);
    auto rs = evaluate_classification(scaled);
    CHECK(r.top1 == doctest::Approx(100.0 * top1 / count));
    CHECK(r.top5 == doctest::Approx(100.0 * top5 / count));
    CHECK(rs.top1 == r.top1);
    CHECK(rs.top5 == r.top5);
    CHECK(r.top1 <= r.top5);
    std::int64_t total = 0, tp = 0;
    for (int c = 0; c < n; ++c) {
      std::int64_t rowsum = 0;
      for (int k = 0; k < n; ++k) rowsum += r.confusion_at(c, k);
      CHECK(rowsum == r.per_class[size_t(c)].support);
      total += rowsum;
      tp += r.confusion_at(c, c);
      for (double v : {r.per_class[size_t(c)].precision, r.per_class[size_t(c)].recall, r.per_class[size_t(c)].f1}) {
        CHECK(v >= 0.0);
        CHECK(v <= 100.0);
      }
    }
    CHECK(total == count);
    CHECK(100.0 * double(tp) / double(total) == doctest::Approx(r.top1));
  }
}
