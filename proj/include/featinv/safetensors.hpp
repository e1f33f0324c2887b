// Copyright 2026 The featinv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "featinv/tensor.hpp"

namespace featinv {

/// A named n-d tensor promoted to f32.
struct HostTensor {
  std::vector<std::int64_t> shape;
  std::vector<float> data;

  std::int64_t numel() const;
};

using TensorMap = std::map<std::string, HostTensor>;

std::uint16_t float_to_half(float f);
float half_to_float(std::uint16_t h);
float bf16_to_float(std::uint16_t h);

/// Reads a safetensors file. F32, F16 and BF16 entries are promoted to f32,
/// integer and BOOL entries are skipped, and any other dtype is rejected.
TensorMap read_safetensors(const std::filesystem::path& path,
                           std::map<std::string, std::string>* metadata = nullptr);

/// Writes f32 entries in key order.
void write_safetensors(const std::filesystem::path& path, const TensorMap& tensors,
                       const std::map<std::string, std::string>& metadata = {});

TensorMap to_tensor_map(const NamedParams& params);

/// Copies matching entries from `src` into `dst`. An entry matches when the
/// element counts agree and the leading dimension agrees (bias vectors may be
/// either orientation). Returns the names that were loaded; when `strict` is
/// set, a missing or mismatched entry throws.
std::vector<std::string> load_params(const NamedParams& dst, const TensorMap& src, bool strict);

}  // namespace featinv
