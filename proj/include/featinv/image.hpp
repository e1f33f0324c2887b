// Copyright 2026 The featinv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "featinv/tensor.hpp"

namespace featinv {

/// 8-bit interleaved RGB image.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;  // height * width * 3

  Image() = default;
  Image(int w, int h, std::array<std::uint8_t, 3> fill = {0, 0, 0});

  std::uint8_t* at(int x, int y) { return rgb.data() + (static_cast<std::size_t>(y) * width + x) * 3; }
  const std::uint8_t* at(int x, int y) const {
    return rgb.data() + (static_cast<std::size_t>(y) * width + x) * 3;
  }
  bool operator==(const Image&) const = default;
};

/// Dispatches on extension: .ppm always; .jpg/.jpeg and .png when built with
/// libjpeg / libpng.
Image read_image(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const Image& img);
/// PNG writer (zlib only).
void write_png(const std::filesystem::path& path, const Image& img);

enum class Interpolation { kBilinear, kBicubic };

struct Preprocess {
  int resize_shorter = 224;  // 0 disables resizing
  int crop = 224;            // centre crop size; 0 disables
  Interpolation interpolation = Interpolation::kBicubic;
  std::array<float, 3> mean{0.48145466f, 0.4578275f, 0.40821073f};
  std::array<float, 3> std{0.26862954f, 0.26130258f, 0.27577711f};
};

Image resize(const Image& img, int width, int height, Interpolation interp);
Image center_crop(const Image& img, int size);

/// Resize and centre crop as the encoder would see the image.
Image preprocess_image(const Image& img, const Preprocess& p);

/// Resize, crop and normalise into a [3, H*W] feature map.
Tensor to_input_tensor(const Image& img, const Preprocess& p);

}  // namespace featinv
