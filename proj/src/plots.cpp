// Copyright 2026 The featinv Authors
// SPDX-License-Identifier: Apache-2.0

#include "featinv/plots.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <map>

#include "featinv/error.hpp"

namespace featinv::plots {

namespace {

// 5x7 glyphs, one byte per row, bit 4 is the leftmost column.
const std::map<char, std::array<std::uint8_t, 7>>& font() {
  static const std::map<char, std::array<std::uint8_t, 7>> glyphs{
    {'#', {0x0a, 0x0a, 0x1f, 0x0a, 0x1f, 0x0a, 0x0a}},
    {'%', {0x18, 0x19, 0x02, 0x04, 0x08, 0x13, 0x03}},
    {'\'', {0x04, 0x04, 0x08, 0x00, 0x00, 0x00, 0x00}},
    {'(', {0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02}},
    {')', {0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08}},
    {'+', {0x00, 0x04, 0x04, 0x1f, 0x04, 0x04, 0x00}},
    {',', {0x00, 0x00, 0x00, 0x00, 0x0c, 0x04, 0x08}},
    {'-', {0x00, 0x00, 0x00, 0x1f, 0x00, 0x00, 0x00}},
    {'.', {0x00, 0x00, 0x00, 0x00, 0x00, 0x0c, 0x0c}},
    {'/', {0x00, 0x01, 0x02, 0x04, 0x08, 0x10, 0x00}},
    {'0', {0x0e, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0e}},
    {'1', {0x04, 0x0c, 0x04, 0x04, 0x04, 0x04, 0x0e}},
    {'2', {0x0e, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1f}},
    {'3', {0x1f, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0e}},
    {'4', {0x02, 0x06, 0x0a, 0x12, 0x1f, 0x02, 0x02}},
    {'5', {0x1f, 0x10, 0x1e, 0x01, 0x01, 0x11, 0x0e}},
    {'6', {0x06, 0x08, 0x10, 0x1e, 0x11, 0x11, 0x0e}},
    {'7', {0x1f, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08}},
    {'8', {0x0e, 0x11, 0x11, 0x0e, 0x11, 0x11, 0x0e}},
    {'9', {0x0e, 0x11, 0x11, 0x0f, 0x01, 0x02, 0x0c}},
    {':', {0x00, 0x0c, 0x0c, 0x00, 0x0c, 0x0c, 0x00}},
    {'<', {0x02, 0x04, 0x08, 0x10, 0x08, 0x04, 0x02}},
    {'=', {0x00, 0x00, 0x1f, 0x00, 0x1f, 0x00, 0x00}},
    {'>', {0x08, 0x04, 0x02, 0x01, 0x02, 0x04, 0x08}},
    {'A', {0x0e, 0x11, 0x11, 0x1f, 0x11, 0x11, 0x11}},
    {'B', {0x1e, 0x11, 0x11, 0x1e, 0x11, 0x11, 0x1e}},
    {'C', {0x0e, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0e}},
    {'D', {0x1c, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1c}},
    {'E', {0x1f, 0x10, 0x10, 0x1e, 0x10, 0x10, 0x1f}},
    {'F', {0x1f, 0x10, 0x10, 0x1e, 0x10, 0x10, 0x10}},
    {'G', {0x0e, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0f}},
    {'H', {0x11, 0x11, 0x11, 0x1f, 0x11, 0x11, 0x11}},
    {'I', {0x0e, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0e}},
    {'J', {0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0c}},
    {'K', {0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11}},
    {'L', {0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1f}},
    {'M', {0x11, 0x1b, 0x15, 0x15, 0x11, 0x11, 0x11}},
    {'N', {0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11}},
    {'O', {0x0e, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0e}},
    {'P', {0x1e, 0x11, 0x11, 0x1e, 0x10, 0x10, 0x10}},
    {'Q', {0x0e, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0d}},
    {'R', {0x1e, 0x11, 0x11, 0x1e, 0x14, 0x12, 0x11}},
    {'S', {0x0f, 0x10, 0x10, 0x0e, 0x01, 0x01, 0x1e}},
    {'T', {0x1f, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04}},
    {'U', {0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0e}},
    {'V', {0x11, 0x11, 0x11, 0x11, 0x11, 0x0a, 0x04}},
    {'W', {0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0a}},
    {'X', {0x11, 0x11, 0x0a, 0x04, 0x0a, 0x11, 0x11}},
    {'Y', {0x11, 0x11, 0x0a, 0x04, 0x04, 0x04, 0x04}},
    {'Z', {0x1f, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1f}},
    {'_', {0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1f}},
  };
  return glyphs;
}

constexpr Color kWhite{255, 255, 255};
constexpr Color kBlack{0, 0, 0};
constexpr Color kGrid{220, 220, 220};
constexpr std::array<Color, 6> kSeries{{{31, 119, 180}, {255, 127, 14}, {44, 160, 44},
                                         {214, 39, 40}, {148, 103, 189}, {140, 86, 75}}};

std::string fmt(double v, int digits) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

double nice_ceiling(double v) {
  if (v <= 0.0) return 1.0;
  const double p = std::pow(10.0, std::floor(std::log10(v)));
  for (double m : {1.0, 2.0, 5.0, 10.0}) {
    if (m * p >= v) return m * p;
  }
  return 10.0 * p;
}

void draw_axes(Image& img, int left, int top, int right, int bottom, double ymax, int ticks) {
  for (int t = 0; t <= ticks; ++t) {
    const int y = bottom - (bottom - top) * t / ticks;
    fill_rect(img, left, y, right, y + 1, kGrid);
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.3g", ymax * t / ticks);
    const std::string label = buf;
    draw_text(img, left - 4 - text_width(label), y - 3, label, kBlack);
  }
  fill_rect(img, left, top, left + 1, bottom + 1, kBlack);
  fill_rect(img, left, bottom, right, bottom + 1, kBlack);
}

}  // namespace

int text_width(std::string_view text, int scale) { return static_cast<int>(text.size()) * 6 * scale; }

void fill_rect(Image& img, int x0, int y0, int x1, int y1, Color color) {
  x0 = std::clamp(x0, 0, img.width);
  x1 = std::clamp(x1, 0, img.width);
  y0 = std::clamp(y0, 0, img.height);
  y1 = std::clamp(y1, 0, img.height);
  for (int y = y0; y < y1; ++y) {
    for (int x = x0; x < x1; ++x) std::copy(color.begin(), color.end(), img.at(x, y));
  }
}

void draw_text(Image& img, int x, int y, std::string_view text, Color color, int scale) {
  const auto& glyphs = font();
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = static_cast<char>(std::toupper(static_cast<unsigned char>(text[i])));
    auto it = glyphs.find(c);
    if (it == glyphs.end()) continue;
    const int gx = x + static_cast<int>(i) * 6 * scale;
    for (int row = 0; row < 7; ++row) {
      for (int col = 0; col < 5; ++col) {
        if ((it->second[static_cast<std::size_t>(row)] >> (4 - col)) & 1) {
          fill_rect(img, gx + col * scale, y + row * scale, gx + (col + 1) * scale, y + (row + 1) * scale, color);
        }
      }
    }
  }
}

Color colormap(double t) {
  t = std::clamp(std::isfinite(t) ? t : 0.0, 0.0, 1.0);
  // Piecewise-linear blue -> cyan -> yellow -> red.
  static constexpr std::array<std::array<double, 3>, 4> stops{
      {{0.0, 0.0, 255.0}, {0.0, 255.0, 255.0}, {255.0, 255.0, 0.0}, {255.0, 0.0, 0.0}}};
  const double s = t * 3.0;
  const int i = std::min(2, static_cast<int>(s));
  const double f = s - i;
  Color c{};
  for (int k = 0; k < 3; ++k) {
    c[static_cast<std::size_t>(k)] = static_cast<std::uint8_t>(std::lround(
        stops[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)] * (1 - f) +
        stops[static_cast<std::size_t>(i + 1)][static_cast<std::size_t>(k)] * f));
  }
  return c;
}

Image histogram(std::span<const std::int64_t> counts, double lo, double hi, std::string_view title,
                std::string_view x_label) {
  if (counts.empty()) throw ValidationError("histogram: no bins");
  const int left = 60, top = 30, plot_w = 480, plot_h = 240;
  Image img(left + plot_w + 20, top + plot_h + 50, kWhite);
  const std::int64_t peak = *std::max_element(counts.begin(), counts.end());
  const double ymax = nice_ceiling(static_cast<double>(peak));
  draw_axes(img, left, top, left + plot_w, top + plot_h, ymax, 4);
  const int n = static_cast<int>(counts.size());
  for (int i = 0; i < n; ++i) {
    const int x0 = left + plot_w * i / n + 1;
    const int x1 = left + plot_w * (i + 1) / n;
    const int h = static_cast<int>(std::lround(plot_h * static_cast<double>(counts[static_cast<std::size_t>(i)]) / ymax));
    fill_rect(img, x0, top + plot_h - h, x1, top + plot_h, kSeries[0]);
  }
  for (int t = 0; t <= 4; ++t) {
    const std::string label = fmt(lo + (hi - lo) * t / 4, 2);
    draw_text(img, left + plot_w * t / 4 - text_width(label) / 2, top + plot_h + 6, label, kBlack);
  }
  draw_text(img, left + (plot_w - text_width(x_label)) / 2, top + plot_h + 24, x_label, kBlack);
  draw_text(img, left, 8, title, kBlack, 2);
  return img;
}

Image grouped_bars(const std::vector<std::string>& categories, const std::vector<std::string>& series,
                   const std::vector<std::vector<double>>& values, std::string_view title) {
  if (categories.empty() || series.empty()) throw ValidationError("bar chart: nothing to plot");
  if (values.size() != series.size()) throw ShapeError("bar chart: one value row per series expected");
  double peak = 0.0;
  for (const auto& row : values) {
    if (row.size() != categories.size()) throw ShapeError("bar chart: one value per category expected");
    for (double v : row) peak = std::max(peak, v);
  }
  const int left = 60, top = 30, group_w = std::max(60, 24 * static_cast<int>(series.size()) + 20);
  const int plot_w = group_w * static_cast<int>(categories.size()), plot_h = 240;
  const int legend_h = 12 * static_cast<int>(series.size());
  Image img(left + plot_w + 20, top + plot_h + 40 + legend_h, kWhite);
  const double ymax = nice_ceiling(peak);
  draw_axes(img, left, top, left + plot_w, top + plot_h, ymax, 4);
  const int bar_w = (group_w - 20) / static_cast<int>(series.size());
  for (std::size_t c = 0; c < categories.size(); ++c) {
    const int gx = left + group_w * static_cast<int>(c) + 10;
    for (std::size_t s = 0; s < series.size(); ++s) {
      const int h = static_cast<int>(std::lround(plot_h * std::max(0.0, values[s][c]) / ymax));
      const int x0 = gx + bar_w * static_cast<int>(s);
      fill_rect(img, x0, top + plot_h - h, x0 + bar_w - 2, top + plot_h, kSeries[s % kSeries.size()]);
    }
    const std::string& name = categories[c];
    draw_text(img, gx + (group_w - 20 - text_width(name)) / 2, top + plot_h + 6, name, kBlack);
  }
  for (std::size_t s = 0; s < series.size(); ++s) {
    const int y = top + plot_h + 24 + 12 * static_cast<int>(s);
    fill_rect(img, left, y, left + 8, y + 7, kSeries[s % kSeries.size()]);
    draw_text(img, left + 12, y, series[s], kBlack);
  }
  draw_text(img, left, 8, title, kBlack, 2);
  return img;
}

Image confusion_matrix(std::span<const std::int64_t> counts, int num_classes,
                       const std::vector<std::string>& class_names, std::string_view title) {
  if (num_classes < 1 || counts.size() != static_cast<std::size_t>(num_classes) * num_classes) {
    throw ShapeError("confusion matrix: expected num_classes^2 counts");
  }
  const int cell = num_classes <= 20 ? 28 : std::max(2, 560 / num_classes);
  const bool labels = num_classes <= 20;
  std::size_t name_len = 0;
  for (const auto& n : class_names) name_len = std::max(name_len, n.size());
  const int left = labels ? 10 + text_width(std::string(std::min<std::size_t>(name_len, 12), ' ')) : 10;
  const int top = 30;
  const int width = std::max(left + cell * num_classes + 10, text_width(title, 2) + 12);
  Image img(width, top + cell * num_classes + 10, kWhite);
  for (int r = 0; r < num_classes; ++r) {
    std::int64_t row_total = 0;
    for (int c = 0; c < num_classes; ++c) row_total += counts[static_cast<std::size_t>(r * num_classes + c)];
    for (int c = 0; c < num_classes; ++c) {
      const std::int64_t v = counts[static_cast<std::size_t>(r * num_classes + c)];
      const double frac = row_total > 0 ? static_cast<double>(v) / static_cast<double>(row_total) : 0.0;
      const auto shade = static_cast<std::uint8_t>(std::lround(255.0 * (1.0 - frac)));
      const int x0 = left + c * cell, y0 = top + r * cell;
      fill_rect(img, x0, y0, x0 + cell - 1, y0 + cell - 1, Color{shade, shade, 255});
      if (labels && v > 0) {
        const std::string s = std::to_string(v);
        draw_text(img, x0 + (cell - text_width(s)) / 2, y0 + (cell - 7) / 2, s, frac > 0.5 ? kWhite : kBlack);
      }
    }
    if (labels && static_cast<std::size_t>(r) < class_names.size()) {
      draw_text(img, 4, top + r * cell + (cell - 7) / 2, class_names[static_cast<std::size_t>(r)].substr(0, 12), kBlack);
    }
  }
  draw_text(img, 4, 8, title, kBlack, 2);
  return img;
}

Matrix channel_mean_map(const Tensor& feature) {
  if (!feature.is_spatial()) throw ShapeError("heatmap needs a spatial feature map, got a vector tap");
  const Matrix mean = feature.value().colwise().mean();
  Matrix out(feature.height(), feature.width());
  for (Index y = 0; y < out.rows(); ++y) {
    for (Index x = 0; x < out.cols(); ++x) out(y, x) = mean(0, y * out.cols() + x);
  }
  return out;
}

Image heatmap_overlay(const Matrix& map, const Image& base, double alpha) {
  if (map.size() == 0) throw ShapeError("heatmap: empty map");
  if (base.width < 1 || base.height < 1) throw ShapeError("heatmap: empty base image");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("heatmap: alpha must lie in [0, 1]");
  const float lo = map.minCoeff(), hi = map.maxCoeff();
  // Spreads at float rounding level count as constant.
  const float tol = 1e-5f * std::max(std::abs(lo), std::abs(hi));
  const float span = hi - lo > tol ? hi - lo : 0.0f;
  Image out = base;
  const double sy = static_cast<double>(map.rows()) / base.height;
  const double sx = static_cast<double>(map.cols()) / base.width;
  for (int y = 0; y < base.height; ++y) {
    // Pixel-centre aligned bilinear sampling.
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(map.rows() - 1));
    const auto y0 = static_cast<Index>(fy);
    const Index y1 = std::min<Index>(y0 + 1, map.rows() - 1);
    const double wy = fy - static_cast<double>(y0);
    for (int x = 0; x < base.width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(map.cols() - 1));
      const auto x0 = static_cast<Index>(fx);
      const Index x1 = std::min<Index>(x0 + 1, map.cols() - 1);
      const double wx = fx - static_cast<double>(x0);
      const double v = (1 - wy) * ((1 - wx) * map(y0, x0) + wx * map(y0, x1)) +
                       wy * ((1 - wx) * map(y1, x0) + wx * map(y1, x1));
      const double t = span > 0 ? (v - lo) / span : 0.0;
      const Color c = colormap(t);
      std::uint8_t* px = out.at(x, y);
      for (int k = 0; k < 3; ++k) {
        px[k] = static_cast<std::uint8_t>(std::lround((1 - alpha) * px[k] + alpha * c[static_cast<std::size_t>(k)]));
      }
    }
  }
  return out;
}

}  // namespace featinv::plots
