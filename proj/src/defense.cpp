// Copyright 2026 The featinv Authors
// SPDX-License-Identifier: Apache-2.0

#include "featinv/defense.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>

#include "featinv/attack.hpp"
#include "featinv/error.hpp"

namespace featinv {

namespace {

Tensor with_layout(Matrix m, const Tensor& like) {
  if (like.is_spatial()) return Tensor::spatial(std::move(m), like.height(), like.width());
  return Tensor(std::move(m));
}

void check_sigma(double sigma) {
  if (!(sigma >= 0) || !std::isfinite(sigma)) throw ValidationError("noise sigma must be finite and >= 0");
}

}  // namespace

NoisyFeature inject_noise(const Tensor& f, double sigma, Rng& rng) {
  check_sigma(sigma);
  Matrix eps = sigma == 0 ? Matrix::Zero(f.rows(), f.cols()) : rng.normal_matrix(f.rows(), f.cols(), static_cast<float>(sigma));
  return {with_layout(f.value() + eps, f), std::move(eps)};
}

NoisyFeature inject_noise(const Tensor& f, double sigma, const CounterNormal& stream) {
  check_sigma(sigma);
  Matrix eps(f.rows(), f.cols());
  if (sigma > 0) {
    stream.fill(eps.data(), static_cast<std::size_t>(eps.size()), static_cast<float>(sigma));
  } else {
    eps.setZero();
  }
  return {with_layout(f.value() + eps, f), std::move(eps)};
}

Tensor strip_noise(const Tensor& noisy, const Matrix& eps) {
  if (noisy.rows() != eps.rows() || noisy.cols() != eps.cols()) {
    throw ShapeError("noise shape [" + std::to_string(eps.rows()) + ", " + std::to_string(eps.cols()) +
                     "] does not match feature [" + std::to_string(noisy.rows()) + ", " +
                     std::to_string(noisy.cols()) + "]");
  }
  return with_layout(noisy.value() - eps, noisy);
}

// --------------------------------------------------------------- schedule

std::set<std::string> NoiseSchedule::layers() const {
  std::set<std::string> out(auto_std);
  for (const auto& [l, s] : sigma) out.insert(l);
  return out;
}

void NoiseSchedule::validate() const {
  for (const auto& [l, s] : sigma) {
    check_sigma(s);
    if (auto_std.contains(l)) throw ValidationError("layer " + l + " has both a fixed sigma and auto-std");
  }
  if (calibration_batch < 1) throw ValidationError("calibration_batch must be >= 1");
}

NoiseSchedule NoiseSchedule::parse(std::string_view text) {
  NoiseSchedule s;
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  auto trim = [](std::string v) {
    const auto b = v.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::string();
    return v.substr(b, v.find_last_not_of(" \t\r") - b + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = "defense config line " + std::to_string(lineno);
    if (eq == std::string::npos) throw ValidationError(where + ": expected key = value");
    const std::string k = trim(line.substr(0, eq)), v = trim(line.substr(eq + 1));
    try {
      if (k == "calibration_batch") {
        s.calibration_batch = std::stoi(v);
      } else if (k == "seed") {
        s.seed = std::stoull(v);
      } else if (v == "auto-std") {
        s.auto_std.insert(k);
      } else {
        std::size_t pos = 0;
        s.sigma[k] = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
      }
    } catch (const std::logic_error&) {
      throw ValidationError(where + ": bad value '" + v + "' for " + k);
    }
  }
  s.validate();
  return s;
}

NoiseSchedule NoiseSchedule::load(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw Error("cannot read defense config " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse(ss.str());
}

std::string NoiseSchedule::to_text() const {
  std::ostringstream o;
  o.precision(9);
  o << "seed = " << seed << "\ncalibration_batch = " << calibration_batch << "\n";
  for (const auto& l : auto_std) o << l << " = auto-std\n";
  for (const auto& [l, s] : sigma) o << l << " = " << s << "\n";
  return o.str();
}

std::uint64_t NoiseSchedule::key(std::string_view image_id, std::string_view layer) const {
  return splitmix64(splitmix64(seed ^ hash_string(image_id)) ^ hash_string(layer));
}

NoiseSchedule calibrate(const NoiseSchedule& schedule, const EncoderHandle& encoder, std::span<const Tensor> images) {
  schedule.validate();
  NoiseSchedule out = schedule;
  if (schedule.auto_std.empty()) return out;
  if (images.empty()) throw ValidationError("auto-std calibration needs at least one image");
  std::vector<std::string> layers(schedule.auto_std.begin(), schedule.auto_std.end());
  for (const auto& l : layers) {
    if (!encoder.encoder().has_layer(l)) throw ValidationError("encoder has no layer '" + l + "'");
  }
  std::map<std::string, std::pair<double, double>> sums;  // sum, sum of squares
  std::map<std::string, double> counts;
  const std::size_t n = std::min(images.size(), static_cast<std::size_t>(schedule.calibration_batch));
  for (std::size_t i = 0; i < n; ++i) {
    for (const auto& [l, t] : encoder.capture(images[i], layers)) {
      const auto& v = t.value();
      sums[l].first += static_cast<double>(v.sum());
      sums[l].second += static_cast<double>(v.squaredNorm());
      counts[l] += static_cast<double>(v.size());
    }
  }
  for (const auto& l : layers) {
    const double mean = sums[l].first / counts[l];
    out.sigma[l] = std::sqrt(std::max(0.0, sums[l].second / counts[l] - mean * mean));
  }
  out.auto_std.clear();
  return out;
}

// ---------------------------------------------------------- encoder wrap

DefendedEncoder::DefendedEncoder(std::shared_ptr<const EncoderHandle> encoder, NoiseSchedule schedule,
                                 std::set<std::string> leak_taps)
    : encoder_(std::move(encoder)), schedule_(std::move(schedule)), leak_(std::move(leak_taps)) {
  if (!encoder_) throw ValidationError("defended encoder needs an encoder");
  schedule_.validate();
  if (!schedule_.resolved()) throw ValidationError("noise schedule has unresolved auto-std layers; calibrate first");
  for (const auto& [l, s] : schedule_.sigma) {
    if (!encoder_->encoder().has_layer(l)) throw ValidationError("encoder has no layer '" + l + "'");
  }
  for (const auto& l : leak_) {
    if (!encoder_->encoder().has_layer(l)) throw ValidationError("encoder has no layer '" + l + "'");
  }
}

DefendedOutput DefendedEncoder::forward(const Tensor& image, std::string_view image_id) const {
  NoGradGuard ng;
  DefendedOutput out;
  auto hook = [&](std::string_view layer, Tensor& f) {
    auto it = schedule_.sigma.find(std::string(layer));
    if (it == schedule_.sigma.end()) {
      if (leak_.contains(std::string(layer))) out.leaked[std::string(layer)] = with_layout(f.value(), f);
      return HookAction::kContinue;
    }
    // Same arithmetic as inject_noise/strip_noise, with one allocation.
    check_sigma(it->second);
    thread_local Matrix eps;
    eps.resize(f.rows(), f.cols());
    if (it->second > 0) {
      CounterNormal(schedule_.key(image_id, layer))
          .fill(eps.data(), static_cast<std::size_t>(eps.size()), static_cast<float>(it->second));
    } else {
      eps.setZero();
    }
    Matrix v = f.value() + eps;
    if (leak_.contains(std::string(layer))) out.leaked[std::string(layer)] = with_layout(v, f);
    v -= eps;
    f = with_layout(std::move(v), f);
    return HookAction::kContinue;
  };
  out.final_output = encoder_->encoder().forward(image, hook);
  return out;
}

std::vector<FeatureRecord> DefendedEncoder::leaked_records(const DefendedOutput& out, std::string_view image_id,
                                                           Dtype dtype) const {
  std::vector<FeatureRecord> recs;
  for (const auto& [layer, t] : out.leaked) {
    auto r = FeatureRecord::from_tensor(encoder_->spec().encoder_id, layer, std::string(image_id), t, dtype);
    r.defended = schedule_.sigma.contains(layer);
    recs.push_back(std::move(r));
  }
  return recs;
}

// ------------------------------------------------------------- evaluation

namespace {

void check_pairing(std::span<const FeatureRecord> clean, std::span<const FeatureRecord> defended) {
  if (clean.empty()) throw ValidationError("no records to evaluate");
  if (clean.size() != defended.size()) throw ValidationError("clean and defended record counts differ");
  for (std::size_t i = 0; i < clean.size(); ++i) {
    if (clean[i].image_id != defended[i].image_id) {
      throw ValidationError("record " + std::to_string(i) + " pairs " + clean[i].image_id + " with " +
                            defended[i].image_id);
    }
    if (clean[i].layer_name != defended[i].layer_name) {
      throw ValidationError("clean layer '" + clean[i].layer_name + "' vs leaked layer '" + defended[i].layer_name + "'");
    }
  }
}

const ManifestRecord& truth_for(const DatasetManifest& m, const std::string& id) {
  const ManifestRecord* r = m.find(id);
  if (!r) throw ValidationError("no ground truth for image " + id);
  return *r;
}

}  // namespace

LabelDefenseReport evaluate_label_defense(const InversionModel& model, std::span<const FeatureRecord> clean,
                                          std::span<const FeatureRecord> defended, const DatasetManifest& truth) {
  check_pairing(clean, defended);
  std::vector<int> labels;
  for (const auto& r : clean) {
    const auto& t = truth_for(truth, r.image_id);
    if (!t.label) throw ValidationError("image " + r.image_id + " has no label");
    labels.push_back(*t.label);
  }
  const auto names = truth.class_names.size() == static_cast<std::size_t>(model.config().num_classes)
                         ? truth.class_names
                         : std::vector<std::string>{};
  return {evaluate_classification(attack_labels(model, clean, labels), names),
          evaluate_classification(attack_labels(model, defended, labels), names)};
}

CaptionDefenseReport evaluate_caption_defense(const InversionModel& model, const LanguageModel& lm,
                                              std::span<const FeatureRecord> clean,
                                              std::span<const FeatureRecord> defended, const DatasetManifest& truth,
                                              const MetricConfig& metrics, TextEmbedder* embedder,
                                              const DecodeConfig& decode) {
  check_pairing(clean, defended);
  std::vector<std::vector<std::string>> refs;
  for (const auto& r : clean) refs.push_back(truth_for(truth, r.image_id).captions);
  CaptionDefenseReport rep;
  for (const auto& c : attack_captions(model, lm, clean, decode)) rep.clean_captions.push_back(c.text);
  for (const auto& c : attack_captions(model, lm, defended, decode)) rep.defended_captions.push_back(c.text);
  rep.clean = evaluate_captions(rep.clean_captions, refs, metrics, embedder);
  rep.defended = evaluate_captions(rep.defended_captions, refs, metrics, embedder);
  return rep;
}

nlohmann::json OverheadReport::to_json() const {
  return {{"repetitions", repetitions},
          {"median_clean_seconds", median_clean_seconds},
          {"median_defended_seconds", median_defended_seconds},
          {"relative_increase", relative_increase}};
}

OverheadReport measure_overhead(const DefendedEncoder& defended, std::span<const Tensor> images, int repetitions,
                                int warmup) {
  if (repetitions < 100) throw ValidationError("overhead timing needs at least 100 repetitions");
  if (images.empty()) throw ValidationError("overhead timing needs at least one image");
  NoGradGuard ng;
  const Encoder& enc = defended.encoder().encoder();
  const StageHook pass = [](std::string_view, Tensor&) { return HookAction::kContinue; };
  auto run_clean = [&] {
    for (const auto& im : images) enc.forward(im, pass);
  };
  auto run_defended = [&] {
    for (std::size_t i = 0; i < images.size(); ++i) defended.forward(images[i], "overhead_" + std::to_string(i));
  };
  for (int w = 0; w < warmup; ++w) {
    run_clean();
    run_defended();
  }
  using clock = std::chrono::steady_clock;
  std::vector<double> tc, td;
  for (int r = 0; r < repetitions; ++r) {
    // Alternate the order so drift affects both sides equally.
    for (int side = 0; side < 2; ++side) {
      const bool clean_side = (side == 0) == (r % 2 == 0);
      const auto t0 = clock::now();
      clean_side ? run_clean() : run_defended();
      (clean_side ? tc : td).push_back(std::chrono::duration<double>(clock::now() - t0).count());
    }
  }
  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
  };
  OverheadReport rep;
  rep.repetitions = repetitions;
  rep.median_clean_seconds = median(tc);
  rep.median_defended_seconds = median(td);
  rep.relative_increase = rep.median_defended_seconds / rep.median_clean_seconds - 1.0;
  return rep;
}

}  // namespace featinv
