// Copyright 2026 The featinv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <string>
#include <vector>

#include "featinv/caption_head.hpp"
#include "featinv/feature_capture.hpp"
#include "featinv/inversion_core.hpp"
#include "featinv/label_head.hpp"

namespace featinv {

/// Throws ValidationError naming both layers when `r` was captured at a
/// different tap (or encoder, or shape) than the model was built for. An
/// empty encoder id in the model config matches any encoder.
void check_compatible(const InversionModel& model, const FeatureRecord& r);

/// Runs the label head over records; `labels` (optional) supplies the true
/// label per record.
std::vector<LabelPrediction> attack_labels(const InversionModel& model, std::span<const FeatureRecord> records,
                                           std::span<const int> labels = {});

std::vector<CaptionSequence> attack_captions(const InversionModel& model, const LanguageModel& lm,
                                             std::span<const FeatureRecord> records, const DecodeConfig& decode = {});

}  // namespace featinv
