// Copyright 2026 The featinv Authors
// SPDX-License-Identifier: Apache-2.0

#include "featinv/label_head.hpp"

#include <cstdio>

#include "featinv/error.hpp"

namespace featinv {

int argmax_lowest(std::span<const float> values) {
  if (values.empty()) throw ValidationError("argmax of an empty vector");
  int best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  }
  return best;
}

int class_rank(std::span<const float> logits, int cls) {
  if (cls < 0 || static_cast<std::size_t>(cls) >= logits.size()) throw ValidationError("class index out of range");
  const float v = logits[static_cast<std::size_t>(cls)];
  int rank = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (logits[i] > v || (logits[i] == v && static_cast<int>(i) < cls)) ++rank;
  }
  return rank;
}

LabelPrediction prediction_from_logits(std::vector<float> logits, std::optional<int> true_label) {
  if (logits.size() < 2) throw ValidationError("a classifier needs at least two classes");
  LabelPrediction p;
  p.predicted = argmax_lowest(logits);
  p.logits = std::move(logits);
  if (true_label && (*true_label < 0 || static_cast<std::size_t>(*true_label) >= p.logits.size())) {
    throw ValidationError("true label " + std::to_string(*true_label) + " out of range");
  }
  p.true_label = true_label;
  return p;
}

LabelPrediction predict_label(const Tensor& x, const nn::Linear& classifier, std::optional<int> true_label) {
  if (x.rows() != 1 || x.cols() != classifier.in_features()) {
    throw ShapeError("classifier expects a [1, " + std::to_string(classifier.in_features()) + "] input, got [" +
                     std::to_string(x.rows()) + ", " + std::to_string(x.cols()) + "]");
  }
  NoGradGuard ng;
  const Matrix logits = classifier.forward(x).value();
  return prediction_from_logits(std::vector<float>(logits.data(), logits.data() + logits.size()), true_label);
}

ClassificationReport evaluate_classification(std::span<const LabelPrediction> predictions,
                                             std::vector<std::string> class_names) {
  if (predictions.empty()) throw ValidationError("no predictions to evaluate");
  const int n = static_cast<int>(predictions.front().logits.size());
  ClassificationReport r;
  r.num_classes = n;
  r.count = static_cast<std::int64_t>(predictions.size());
  r.confusion.assign(static_cast<std::size_t>(n) * n, 0);
  std::int64_t hit1 = 0, hit5 = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const auto& p = predictions[i];
    if (!p.true_label) throw ValidationError("prediction " + std::to_string(i) + " has no true label");
    if (static_cast<int>(p.logits.size()) != n) throw ShapeError("predictions disagree on class count");
    const int rank = class_rank(p.logits, *p.true_label);
    hit1 += rank < 1;
    hit5 += rank < 5;
    ++r.confusion[static_cast<std::size_t>(*p.true_label * n + p.predicted)];
  }
  r.top1 = 100.0 * static_cast<double>(hit1) / static_cast<double>(r.count);
  r.top5 = 100.0 * static_cast<double>(hit5) / static_cast<double>(r.count);
  r.per_class.resize(static_cast<std::size_t>(n));
  for (int c = 0; c < n; ++c) {
    std::int64_t tp = r.confusion_at(c, c), support = 0, predicted = 0;
    for (int k = 0; k < n; ++k) {
      support += r.confusion_at(c, k);
      predicted += r.confusion_at(k, c);
    }
    auto& m = r.per_class[static_cast<std::size_t>(c)];
    m.support = support;
    m.precision = predicted ? 100.0 * static_cast<double>(tp) / static_cast<double>(predicted) : 0.0;
    m.recall = support ? 100.0 * static_cast<double>(tp) / static_cast<double>(support) : 0.0;
    m.f1 = m.precision + m.recall > 0 ? 2 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
  }
  if (class_names.empty()) {
    for (int c = 0; c < n; ++c) class_names.push_back(std::to_string(c));
  }
  if (static_cast<int>(class_names.size()) != n) throw ValidationError("class name count does not match classes");
  r.class_names = std::move(class_names);
  return r;
}

std::string ClassificationReport::to_text() const {
  std::string out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "top1 %.2f  top5 %.2f  n=%lld\n", top1, top5, static_cast<long long>(count));
  out += buf;
  std::snprintf(buf, sizeof buf, "%-20s %9s %9s %9s %8s\n", "class", "precision", "recall", "f1", "support");
  out += buf;
  for (int c = 0; c < num_classes; ++c) {
    const auto& m = per_class[static_cast<std::size_t>(c)];
    std::snprintf(buf, sizeof buf, "%-20s %9.2f %9.2f %9.2f %8lld\n", class_names[static_cast<std::size_t>(c)].c_str(),
                  m.precision, m.recall, m.f1, static_cast<long long>(m.support));
    out += buf;
  }
  return out;
}

nlohmann::json ClassificationReport::to_json() const {
  nlohmann::json classes = nlohmann::json::array();
  for (int c = 0; c < num_classes; ++c) {
    const auto& m = per_class[static_cast<std::size_t>(c)];
    classes.push_back({{"class", class_names[static_cast<std::size_t>(c)]},
                       {"precision", m.precision},
                       {"recall", m.recall},
                       {"f1", m.f1},
                       {"support", m.support}});
  }
  nlohmann::json conf = nlohmann::json::array();
  for (int t = 0; t < num_classes; ++t) {
    std::vector<std::int64_t> row(confusion.begin() + t * num_classes, confusion.begin() + (t + 1) * num_classes);
    conf.push_back(row);
  }
  return {{"top1", top1}, {"top5", top5}, {"count", count}, {"per_class", classes}, {"confusion", conf}};
}

}  // namespace featinv
