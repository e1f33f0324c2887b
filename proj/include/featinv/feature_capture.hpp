// Copyright 2026 The featinv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "featinv/encoders.hpp"
#include "featinv/image.hpp"

namespace featinv {

struct TapPoint {
  std::string layer_name;
  /// Empty means "take whatever the encoder declares".
  TapShape expected_shape;
};

struct EncoderSpec {
  std::string encoder_id;
  ArchitectureConfig architecture;
  std::vector<TapPoint> tap_points;
  /// "random-seeded", or a path to a safetensors file.
  std::string weights_source = "random-seeded";
  std::uint64_t seed = 0;
  Preprocess preprocess;

  ArchitectureFamily family() const;
};

/// Catalogue of encoders with pinned configs, taps and preprocessing:
/// clip-rn50, clip-rn101, clip-vit-b16, clip-vit-b32, mobilenet-v2,
/// mobilenet-v3-large, mobilenet-v3-small, toy.
EncoderSpec standard_spec(std::string_view name);
std::vector<std::string> standard_spec_names();

/// Registered encoder. Read-only after construction; forward passes run in
/// no-grad mode and may be issued from several threads.
class EncoderHandle {
 public:
  explicit EncoderHandle(EncoderSpec spec);

  const EncoderSpec& spec() const { return spec_; }
  const Encoder& encoder() const { return *encoder_; }
  const TapPoint& tap(std::string_view layer) const;
  bool has_tap(std::string_view layer) const;

  /// Runs the encoder up to the deepest requested tap and returns copies of
  /// the requested features keyed by layer name.
  std::map<std::string, Tensor> capture(const Tensor& image, std::span<const std::string> layers) const;

 private:
  EncoderSpec spec_;
  std::unique_ptr<Encoder> encoder_;
};

class EncoderRegistry {
 public:
  std::shared_ptr<const EncoderHandle> register_encoder(EncoderSpec spec);
  std::shared_ptr<const EncoderHandle> get(std::string_view encoder_id) const;
  std::vector<std::string> ids() const;

 private:
  mutable std::mutex mu_;
  std::map<std::string, std::shared_ptr<const EncoderHandle>, std::less<>> handles_;
};

std::shared_ptr<const EncoderHandle> register_encoder(EncoderRegistry& registry, EncoderSpec spec);

enum class Dtype : std::uint8_t { kF32 = 0, kF16 = 1 };

std::size_t dtype_width(Dtype d);
std::string to_string(Dtype d);
Dtype parse_dtype(std::string_view s);

/// One tapped tensor. The payload keeps the stored bytes so that f16 records
/// survive a round trip bit-exactly; values() promotes to f32.
struct FeatureRecord {
  std::string encoder_id;
  std::string layer_name;
  std::string image_id;
  Dtype dtype = Dtype::kF32;
  TapShape shape;
  std::vector<std::uint8_t> payload;
  bool defended = false;

  static FeatureRecord from_values(std::string encoder_id, std::string layer_name, std::string image_id,
                                   TapShape shape, std::span<const float> values, Dtype dtype = Dtype::kF32);
  /// Builds a record from a [C, H*W] map or a [1, d] row.
  static FeatureRecord from_tensor(std::string encoder_id, std::string layer_name, std::string image_id,
                                   const Tensor& t, Dtype dtype = Dtype::kF32);

  std::int64_t numel() const;
  std::vector<float> values() const;
  /// [C, H*W] feature map for rank-3 records, [1, d] row otherwise.
  Tensor to_tensor() const;
  /// Throws on payload-length mismatch or non-finite values.
  void validate() const;

  bool operator==(const FeatureRecord&) const = default;
};

std::vector<std::uint8_t> encode_record(const FeatureRecord& r);
FeatureRecord decode_record(std::span<const std::uint8_t> bytes);
void write_record(const FeatureRecord& r, const std::filesystem::path& path);
FeatureRecord read_record(const std::filesystem::path& path);

/// One record per preprocessed image at `tap`. Images must be [3, R*R] with
/// R the encoder's input resolution.
std::vector<FeatureRecord> extract_features(const EncoderHandle& handle, std::span<const Tensor> images,
                                            std::span<const std::string> image_ids, std::string_view tap,
                                            Dtype dtype = Dtype::kF32);

/// Directory of .capr files with an index.tsv manifest.
class FeatureStore {
 public:
  struct Entry {
    std::string file;
    std::string encoder_id;
    std::string layer_name;
    std::string image_id;
    Dtype dtype = Dtype::kF32;
    TapShape shape;
    bool defended = false;
  };

  /// Opens an existing store, or creates an empty one when `create` is set.
  explicit FeatureStore(std::filesystem::path dir, bool create = false);

  const std::filesystem::path& dir() const { return dir_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  void add(const FeatureRecord& r);
  FeatureRecord load(std::size_t i) const;
  /// Index of the record for `image_id`, or -1.
  std::ptrdiff_t find(std::string_view image_id) const;

 private:
  void append_index(const Entry& e);

  std::filesystem::path dir_;
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t, std::less<>> by_image_;
};

}  // namespace featinv
