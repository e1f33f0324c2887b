// Copyright 2026 The featinv Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <sstream>

#include "common.hpp"

namespace featinv {

std::unique_ptr<Encoder> make_resnet(const ResNetConfig& cfg, std::uint64_t seed);
std::unique_ptr<Encoder> make_vit(const VitConfig& cfg, std::uint64_t seed);
std::unique_ptr<Encoder> make_mobilenet(const MobileNetConfig& cfg, std::uint64_t seed);
std::unique_ptr<Encoder> make_toy(const ToyConfig& cfg, std::uint64_t seed);

std::string to_string(ArchitectureFamily f) {
  switch (f) {
    case ArchitectureFamily::kResnet:
      return "resnet";
    case ArchitectureFamily::kVit:
      return "vit";
    case ArchitectureFamily::kMobilenet:
      return "mobilenet";
    case ArchitectureFamily::kToy:
      return "toy";
  }
  return "unknown";
}

ArchitectureFamily parse_family(std::string_view s) {
  if (s == "resnet") return ArchitectureFamily::kResnet;
  if (s == "vit") return ArchitectureFamily::kVit;
  if (s == "mobilenet") return ArchitectureFamily::kMobilenet;
  if (s == "toy") return ArchitectureFamily::kToy;
  throw ValidationError("unknown architecture family '" + std::string(s) + "'");
}

std::string shape_string(const TapShape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

bool Encoder::has_layer(std::string_view layer) const {
  const auto names = layer_names();
  return std::find(names.begin(), names.end(), layer) != names.end();
}

std::unique_ptr<Encoder> make_encoder(const ArchitectureConfig& config, std::uint64_t seed) {
  return std::visit(
      [seed](const auto& cfg) -> std::unique_ptr<Encoder> {
        using T = std::decay_t<decltype(cfg)>;
        if constexpr (std::is_same_v<T, ResNetConfig>) return make_resnet(cfg, seed);
        if constexpr (std::is_same_v<T, VitConfig>) return make_vit(cfg, seed);
        if constexpr (std::is_same_v<T, MobileNetConfig>) return make_mobilenet(cfg, seed);
        if constexpr (std::is_same_v<T, ToyConfig>) return make_toy(cfg, seed);
      },
      config);
}

namespace encoders_detail {

TensorMap normalize_state_dict(const TensorMap& src) {
  const std::string prefix = "visual.";
  const bool any_prefixed =
      std::any_of(src.begin(), src.end(), [&](const auto& kv) { return kv.first.starts_with(prefix); });
  TensorMap out;
  for (const auto& [key, t] : src) {
    std::string k = key;
    if (any_prefixed) {
      // Full CLIP checkpoints mix visual and text towers; keep the visual one.
      if (!k.starts_with(prefix)) continue;
      k = k.substr(prefix.size());
    }
    const auto split = [&](const std::string& suffix, const std::string& param) {
      const std::string base = k.substr(0, k.size() - suffix.size());
      const std::int64_t third = t.shape.front() / 3;
      const std::int64_t row = t.numel() / t.shape.front();
      const char* names[3] = {"q_proj.", "k_proj.", "v_proj."};
      for (int i = 0; i < 3; ++i) {
        HostTensor part;
        part.shape = t.shape;
        part.shape.front() = third;
        part.data.assign(t.data.begin() + i * third * row, t.data.begin() + (i + 1) * third * row);
        out[base + names[i] + param] = std::move(part);
      }
    };
    if (k.ends_with("in_proj_weight")) {
      split("in_proj_weight", "weight");
    } else if (k.ends_with("in_proj_bias")) {
      split("in_proj_bias", "bias");
    } else {
      out[k] = t;
    }
  }
  return out;
}

void freeze(const NamedParams& params) {
  for (const auto& [name, t] : params) t.node()->requires_grad = false;
}

}  // namespace encoders_detail
}  // namespace featinv
