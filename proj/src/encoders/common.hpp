// Copyright 2026 The featinv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <string_view>

#include "featinv/encoders.hpp"
#include "featinv/error.hpp"
#include "featinv/nn.hpp"

namespace featinv::encoders_detail {

/// Keeps only "visual."-prefixed keys (stripped) when any key has that prefix,
/// and splits packed `in_proj_weight` / `in_proj_bias` into q/k/v projections.
TensorMap normalize_state_dict(const TensorMap& src);

void freeze(const NamedParams& params);

inline void check_input(const Tensor& image, int resolution) {
  if (image.rows() != 3 || image.height() != resolution || image.width() != resolution) {
    throw ShapeError("encoder expects a [3," + std::to_string(resolution) + "," + std::to_string(resolution) +
                     "] input, got [" + std::to_string(image.rows()) + "," + std::to_string(image.height()) + "," +
                     std::to_string(image.width()) + "]");
  }
}


}  // namespace featinv::encoders_detail
