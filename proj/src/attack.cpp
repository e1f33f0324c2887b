// Copyright 2026 The featinv Authors
// SPDX-License-Identifier: Apache-2.0

#include "featinv/attack.hpp"

#include "featinv/error.hpp"

namespace featinv {

void check_compatible(const InversionModel& model, const FeatureRecord& r) {
  const auto& c = model.config();
  if (r.layer_name != c.layer_name) {
    throw ValidationError("feature " + r.image_id + " was captured at layer '" + r.layer_name +
                          "' but the checkpoint attacks layer '" + c.layer_name + "'");
  }
  if (!c.encoder_id.empty() && r.encoder_id != c.encoder_id) {
    throw ValidationError("feature " + r.image_id + " comes from encoder '" + r.encoder_id +
                          "' but the checkpoint targets '" + c.encoder_id + "'");
  }
  if (r.shape != c.input_shape) {
    throw ShapeError("feature " + r.image_id + " has shape " + shape_string(r.shape) + ", checkpoint expects " +
                     shape_string(c.input_shape));
  }
}

std::vector<LabelPrediction> attack_labels(const InversionModel& model, std::span<const FeatureRecord> records,
                                           std::span<const int> labels) {
  if (!labels.empty() && labels.size() != records.size()) throw ValidationError("one label per record expected");
  NoGradGuard ng;
  std::vector<LabelPrediction> out;
  out.reserve(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    check_compatible(model, records[i]);
    const Matrix l = model.class_logits(records[i].to_tensor()).value();
    out.push_back(prediction_from_logits(std::vector<float>(l.data(), l.data() + l.size()),
                                         labels.empty() ? std::nullopt : std::optional<int>(labels[i])));
  }
  return out;
}

std::vector<CaptionSequence> attack_captions(const InversionModel& model, const LanguageModel& lm,
                                             std::span<const FeatureRecord> records, const DecodeConfig& decode) {
  NoGradGuard ng;
  std::vector<CaptionSequence> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    check_compatible(model, r);
    out.push_back(generate_caption(lm, model.lm_prefix(r.to_tensor()), decode));
  }
  return out;
}

}  // namespace featinv
