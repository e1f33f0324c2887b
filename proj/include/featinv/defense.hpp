// Copyright 2026 The featinv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "featinv/caption_head.hpp"
#include "featinv/datasets.hpp"
#include "featinv/feature_capture.hpp"
#include "featinv/label_head.hpp"
#include "featinv/metrics.hpp"
#include "featinv/rng.hpp"

namespace featinv {

struct NoisyFeature {
  Tensor noisy;  // F + eps, same layout as F
  Matrix eps;
};

/// eps ~ N(0, sigma^2) elementwise.
NoisyFeature inject_noise(const Tensor& f, double sigma, Rng& rng);
NoisyFeature inject_noise(const Tensor& f, double sigma, const CounterNormal& stream);

/// noisy - eps; throws ShapeError if the shapes differ.
Tensor strip_noise(const Tensor& noisy, const Matrix& eps);

/// Per-layer noise levels. A layer listed in `auto_std` gets sigma equal to
/// the feature standard deviation over a calibration batch.
struct NoiseSchedule {
  std::map<std::string, double> sigma;
  std::set<std::string> auto_std;
  int calibration_batch = 16;
  std::uint64_t seed = 0;

  bool resolved() const { return auto_std.empty(); }
  std::set<std::string> layers() const;
  void validate() const;

  /// `layer = <sigma>` or `layer = auto-std`, plus `calibration_batch = N`
  /// and `seed = N`; '#' starts a comment.
  static NoiseSchedule parse(std::string_view text);
  static NoiseSchedule load(const std::filesystem::path& path);
  std::string to_text() const;

  /// Counter-stream key for one (image, layer) pair.
  std::uint64_t key(std::string_view image_id, std::string_view layer) const;
};

/// Fills in auto-std layers from up to `calibration_batch` images.
NoiseSchedule calibrate(const NoiseSchedule& schedule, const EncoderHandle& encoder, std::span<const Tensor> images);

struct DefendedOutput {
  Tensor final_output;  // [1, d]
  /// Obfuscated views an interceptor would observe, keyed by layer.
  std::map<std::string, Tensor> leaked;
};

/// Wraps an encoder so every scheduled tap boundary adds eps and the next
/// layer receives the feature with eps removed.
class DefendedEncoder {
 public:
  DefendedEncoder(std::shared_ptr<const EncoderHandle> encoder, NoiseSchedule schedule,
                  std::set<std::string> leak_taps = {});

  const EncoderHandle& encoder() const { return *encoder_; }
  const NoiseSchedule& schedule() const { return schedule_; }

  /// Noise for each image comes from its own counter stream, keyed by the
  /// image id; eps lives only inside this call.
  DefendedOutput forward(const Tensor& image, std::string_view image_id) const;

  /// Leaked views as feature records with the defended flag set.
  std::vector<FeatureRecord> leaked_records(const DefendedOutput& out, std::string_view image_id,
                                            Dtype dtype = Dtype::kF32) const;

 private:
  std::shared_ptr<const EncoderHandle> encoder_;
  NoiseSchedule schedule_;
  std::set<std::string> leak_;
};

struct LabelDefenseReport {
  ClassificationReport clean;
  ClassificationReport defended;
};

struct CaptionDefenseReport {
  MetricReport clean;
  MetricReport defended;
  std::vector<std::string> clean_captions;
  std::vector<std::string> defended_captions;
};

/// Runs a frozen attack model on paired clean and defended records of the
/// same images. Records must match the model's tap and each other by id.
LabelDefenseReport evaluate_label_defense(const InversionModel& model, std::span<const FeatureRecord> clean,
                                          std::span<const FeatureRecord> defended, const DatasetManifest& truth);

CaptionDefenseReport evaluate_caption_defense(const InversionModel& model, const LanguageModel& lm,
                                              std::span<const FeatureRecord> clean,
                                              std::span<const FeatureRecord> defended, const DatasetManifest& truth,
                                              const MetricConfig& metrics = {}, TextEmbedder* embedder = nullptr,
                                              const DecodeConfig& decode = {});

struct OverheadReport {
  int repetitions = 0;
  double median_clean_seconds = 0;
  double median_defended_seconds = 0;
  /// median_defended / median_clean - 1.
  double relative_increase = 0;

  nlohmann::json to_json() const;
};

/// Interleaved timing of plain and defended forwards over the batch, after
/// `warmup` untimed rounds; `repetitions` must be at least 100.
OverheadReport measure_overhead(const DefendedEncoder& defended, std::span<const Tensor> images,
                                int repetitions = 100, int warmup = 5);

}  // namespace featinv
