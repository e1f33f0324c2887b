// Copyright 2026 The featinv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "featinv/nn.hpp"
#include "json.hpp"

namespace featinv {

struct LabelPrediction {
  std::vector<float> logits;
  int predicted = 0;
  std::optional<int> true_label;
};

/// Index of the largest value; ties go to the lowest index.
int argmax_lowest(std::span<const float> values);

/// Rank of `cls` under the argmax ordering (0 = predicted class).
int class_rank(std::span<const float> logits, int cls);

LabelPrediction prediction_from_logits(std::vector<float> logits, std::optional<int> true_label = std::nullopt);

/// logits = W x + b for a [1, in] row `x`.
LabelPrediction predict_label(const Tensor& x, const nn::Linear& classifier,
                              std::optional<int> true_label = std::nullopt);

struct ClassMetrics {
  double precision = 0;  // percent
  double recall = 0;
  double f1 = 0;
  std::int64_t support = 0;
};

struct ClassificationReport {
  double top1 = 0;  // percent
  double top5 = 0;
  std::int64_t count = 0;
  int num_classes = 0;
  /// Row = true class, column = predicted class, row-major.
  std::vector<std::int64_t> confusion;
  std::vector<ClassMetrics> per_class;
  std::vector<std::string> class_names;

  std::int64_t confusion_at(int truth, int predicted) const {
    return confusion[static_cast<std::size_t>(truth * num_classes + predicted)];
  }
  std::string to_text() const;
  nlohmann::json to_json() const;
};

/// Requires every prediction to carry a true label. Classes with no
/// predictions get precision 0.
ClassificationReport evaluate_classification(std::span<const LabelPrediction> predictions,
                                             std::vector<std::string> class_names = {});

}  // namespace featinv
