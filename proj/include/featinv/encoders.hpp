// Copyright 2026 The featinv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "featinv/safetensors.hpp"
#include "featinv/tensor.hpp"

namespace featinv {

enum class ArchitectureFamily { kResnet, kVit, kMobilenet, kToy };

std::string to_string(ArchitectureFamily f);
ArchitectureFamily parse_family(std::string_view s);

/// Dimension list of a tap: {d} for vectors, {C, H, W} for feature maps.
using TapShape = std::vector<std::int64_t>;

std::string shape_string(const TapShape& s);

enum class HookAction { kContinue, kStop };

/// Called at every named stage boundary, in forward order. The hook may
/// replace `feature`; the forward pass continues from the replaced value.
using StageHook = std::function<HookAction(std::string_view layer, Tensor& feature)>;

/// CLIP-style modified ResNet (three-conv stem, anti-aliased strides,
/// attention pooling head).
struct ResNetConfig {
  std::array<int, 4> layers{3, 4, 6, 3};
  int width = 64;
  int output_dim = 1024;
  int heads = 32;
  int resolution = 224;
};

/// CLIP-style vision transformer (class token, pre-LN, QuickGELU).
struct VitConfig {
  int resolution = 224;
  int patch = 16;
  int width = 768;
  int layers = 12;
  int heads = 12;
  int output_dim = 512;
};

/// torchvision MobileNetV2 / MobileNetV3 layouts.
struct MobileNetConfig {
  enum class Version { kV2, kV3Large, kV3Small };
  Version version = Version::kV2;
  float width_mult = 1.0f;
  int num_classes = 1000;
  int resolution = 224;
};

/// Small strided-conv encoder for desk-scale runs.
struct ToyConfig {
  int resolution = 32;
  std::array<int, 4> channels{8, 16, 32, 64};
  int base_dim = 64;
};

using ArchitectureConfig = std::variant<ResNetConfig, VitConfig, MobileNetConfig, ToyConfig>;

class Encoder {
 public:
  virtual ~Encoder() = default;

  virtual ArchitectureFamily family() const = 0;
  /// Tap names in forward order; the last one is the final output ("base").
  virtual std::vector<std::string> layer_names() const = 0;
  virtual TapShape layer_shape(std::string_view layer) const = 0;
  virtual int input_resolution() const = 0;

  /// Runs the encoder on a [3, R*R] input map. Returns the final output as a
  /// [1, d] row, or an undefined tensor when the hook stopped early.
  virtual Tensor forward(const Tensor& image, const StageHook& hook) const = 0;

  virtual NamedParams params() const = 0;
  /// Loads published weights; `src` keys may carry a "visual." prefix.
  virtual void load_weights(const TensorMap& src) = 0;

  bool has_layer(std::string_view layer) const;
};

std::unique_ptr<Encoder> make_encoder(const ArchitectureConfig& config, std::uint64_t seed);

}  // namespace featinv
