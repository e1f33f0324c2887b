// Copyright 2026 The featinv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "featinv/image.hpp"
#include "featinv/tensor.hpp"

namespace featinv::plots {

using Color = std::array<std::uint8_t, 3>;

/// Draws text with the built-in 5x7 font (upper-cased; unknown glyphs are
/// blank). `scale` multiplies the glyph size.
void draw_text(Image& img, int x, int y, std::string_view text, Color color, int scale = 1);
int text_width(std::string_view text, int scale = 1);
void fill_rect(Image& img, int x0, int y0, int x1, int y1, Color color);

/// Bar histogram of bin counts over [lo, hi].
Image histogram(std::span<const std::int64_t> counts, double lo, double hi, std::string_view title,
                std::string_view x_label);

/// Grouped bars: one group per category, one bar per series.
Image grouped_bars(const std::vector<std::string>& categories, const std::vector<std::string>& series,
                   const std::vector<std::vector<double>>& values, std::string_view title);

/// Row-normalized confusion matrix as a heat grid with counts.
Image confusion_matrix(std::span<const std::int64_t> counts, int num_classes,
                       const std::vector<std::string>& class_names, std::string_view title);

/// Channel mean of a [C, H*W] map as an [H, W] matrix.
Matrix channel_mean_map(const Tensor& feature);

/// Min-max normalized map, bilinearly upsampled to the image size, colour
/// mapped and blended over `base` with weight `alpha`. A constant map
/// renders uniformly.
Image heatmap_overlay(const Matrix& map, const Image& base, double alpha = 0.5);

/// Blue-to-red colour ramp for t in [0, 1].
Color colormap(double t);

}  // namespace featinv::plots
