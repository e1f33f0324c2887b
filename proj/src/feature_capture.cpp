// Copyright 2026 The featinv Authors
// SPDX-License-Identifier: Apache-2.0

#include "featinv/feature_capture.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "featinv/error.hpp"
#include "featinv/safetensors.hpp"

namespace featinv {

static_assert(std::endian::native == std::endian::little, "record IO assumes a little-endian host");

ArchitectureFamily EncoderSpec::family() const {
  return std::visit(
      [](const auto& cfg) {
        using T = std::decay_t<decltype(cfg)>;
        if constexpr (std::is_same_v<T, ResNetConfig>) return ArchitectureFamily::kResnet;
        if constexpr (std::is_same_v<T, VitConfig>) return ArchitectureFamily::kVit;
        if constexpr (std::is_same_v<T, MobileNetConfig>) return ArchitectureFamily::kMobilenet;
        if constexpr (std::is_same_v<T, ToyConfig>) return ArchitectureFamily::kToy;
      },
      architecture);
}

namespace {

Preprocess clip_preprocess() { return Preprocess{}; }

Preprocess imagenet_preprocess() {
  Preprocess p;
  p.resize_shorter = 256;
  p.crop = 224;
  p.interpolation = Interpolation::kBilinear;
  p.mean = {0.485f, 0.456f, 0.406f};
  p.std = {0.229f, 0.224f, 0.225f};
  return p;
}

std::vector<TapPoint> taps(std::initializer_list<const char*> names) {
  std::vector<TapPoint> out;
  for (const char* n : names) out.push_back({n, {}});
  return out;
}

}  // namespace

std::vector<std::string> standard_spec_names() {
  return {"clip-rn50",    "clip-rn101",         "clip-vit-b16",       "clip-vit-b32",
          "mobilenet-v2", "mobilenet-v3-large", "mobilenet-v3-small", "toy"};
}

EncoderSpec standard_spec(std::string_view name) {
  EncoderSpec s;
  s.encoder_id = std::string(name);
  if (name == "clip-rn50") {
    s.architecture = ResNetConfig{};
    s.tap_points = {{"layer1", {256, 56, 56}},
                    {"layer2", {512, 28, 28}},
                    {"layer3", {1024, 14, 14}},
                    {"layer4", {2048, 7, 7}},
                    {"base", {1024}}};
    s.preprocess = clip_preprocess();
  } else if (name == "clip-rn101") {
    ResNetConfig c;
    c.layers = {3, 4, 23, 3};
    c.output_dim = 512;
    s.architecture = c;
    s.tap_points = {{"layer1", {256, 56, 56}},
                    {"layer2", {512, 28, 28}},
                    {"layer3", {1024, 14, 14}},
                    {"layer4", {2048, 7, 7}},
                    {"base", {512}}};
    s.preprocess = clip_preprocess();
  } else if (name == "clip-vit-b16" || name == "clip-vit-b32") {
    VitConfig c;
    c.patch = name == "clip-vit-b16" ? 16 : 32;
    s.architecture = c;
    s.tap_points = {{"no-proj", {768}}, {"base", {512}}};
    s.preprocess = clip_preprocess();
  } else if (name.starts_with("mobilenet-")) {
    MobileNetConfig c;
    if (name == "mobilenet-v2") {
      c.version = MobileNetConfig::Version::kV2;
    } else if (name == "mobilenet-v3-large") {
      c.version = MobileNetConfig::Version::kV3Large;
    } else if (name == "mobilenet-v3-small") {
      c.version = MobileNetConfig::Version::kV3Small;
    } else {
      throw ValidationError("unknown standard encoder '" + std::string(name) + "'");
    }
    s.architecture = c;
    s.tap_points = {{"features", {}}, {"base", {1000}}};
    s.preprocess = imagenet_preprocess();
  } else if (name == "toy") {
    s.architecture = ToyConfig{};
    s.tap_points = taps({"layer1", "layer2", "layer3", "layer4", "base"});
    s.preprocess.resize_shorter = 32;
    s.preprocess.crop = 32;
    s.preprocess.interpolation = Interpolation::kBilinear;
    s.preprocess.mean = {0.5f, 0.5f, 0.5f};
    s.preprocess.std = {0.25f, 0.25f, 0.25f};
  } else {
    throw ValidationError("unknown standard encoder '" + std::string(name) + "'");
  }
  return s;
}

EncoderHandle::EncoderHandle(EncoderSpec spec) : spec_(std::move(spec)) {
  if (spec_.encoder_id.empty()) throw ValidationError("encoder_id must not be empty");
  if (spec_.tap_points.empty()) throw ValidationError("encoder '" + spec_.encoder_id + "' has no tap points");
  encoder_ = make_encoder(spec_.architecture, spec_.seed);
  if (spec_.weights_source != "random-seeded") {
    std::string path = spec_.weights_source;
    if (path.starts_with("file://")) path = path.substr(7);
    if (!std::filesystem::exists(path)) {
      throw ValidationError("weights for '" + spec_.encoder_id + "' not found at " + path);
    }
    encoder_->load_weights(read_safetensors(path));
  }
  for (auto& tp : spec_.tap_points) {
    if (!encoder_->has_layer(tp.layer_name)) {
      throw ValidationError("encoder '" + spec_.encoder_id + "' cannot resolve tap '" + tp.layer_name + "'");
    }
    const TapShape actual = encoder_->layer_shape(tp.layer_name);
    if (tp.expected_shape.empty()) {
      tp.expected_shape = actual;
    } else if (tp.expected_shape != actual) {
      throw ShapeError("tap '" + tp.layer_name + "' declared " + shape_string(tp.expected_shape) + " but encoder gives " +
                       shape_string(actual));
    }
  }
  const int res = encoder_->input_resolution();
  if (spec_.preprocess.crop != 0 && spec_.preprocess.crop != res) {
    throw ValidationError("preprocess crop " + std::to_string(spec_.preprocess.crop) +
                          " does not match encoder resolution " + std::to_string(res));
  }
}

const TapPoint& EncoderHandle::tap(std::string_view layer) const {
  for (const auto& tp : spec_.tap_points) {
    if (tp.layer_name == layer) return tp;
  }
  throw ValidationError("encoder '" + spec_.encoder_id + "' has no registered tap '" + std::string(layer) + "'");
}

bool EncoderHandle::has_tap(std::string_view layer) const {
  return std::any_of(spec_.tap_points.begin(), spec_.tap_points.end(),
                     [&](const TapPoint& tp) { return tp.layer_name == layer; });
}

std::map<std::string, Tensor> EncoderHandle::capture(const Tensor& image, std::span<const std::string> layers) const {
  for (const auto& l : layers) tap(l);
  std::map<std::string, Tensor> out;
  if (layers.empty()) return out;
  NoGradGuard ng;
  encoder_->forward(image, [&](std::string_view layer, Tensor& f) {
    if (std::find(layers.begin(), layers.end(), layer) != layers.end()) {
      Tensor copy(f.value());
      if (f.is_spatial()) copy.set_spatial(f.height(), f.width());
      out.emplace(std::string(layer), std::move(copy));
    }
    return out.size() == layers.size() ? HookAction::kStop : HookAction::kContinue;
  });
  return out;
}

std::shared_ptr<const EncoderHandle> EncoderRegistry::register_encoder(EncoderSpec spec) {
  {
    std::lock_guard lock(mu_);
    if (handles_.count(spec.encoder_id)) {
      throw ValidationError("encoder_id '" + spec.encoder_id + "' is already registered");
    }
  }
  auto handle = std::make_shared<const EncoderHandle>(std::move(spec));
  std::lock_guard lock(mu_);
  auto [it, inserted] = handles_.emplace(handle->spec().encoder_id, handle);
  if (!inserted) throw ValidationError("encoder_id '" + handle->spec().encoder_id + "' is already registered");
  return it->second;
}

std::shared_ptr<const EncoderHandle> EncoderRegistry::get(std::string_view encoder_id) const {
  std::lock_guard lock(mu_);
  auto it = handles_.find(encoder_id);
  if (it == handles_.end()) throw ValidationError("no encoder registered as '" + std::string(encoder_id) + "'");
  return it->second;
}

std::vector<std::string> EncoderRegistry::ids() const {
  std::lock_guard lock(mu_);
  std::vector<std::string> out;
  for (const auto& [k, v] : handles_) out.push_back(k);
  return out;
}

std::shared_ptr<const EncoderHandle> register_encoder(EncoderRegistry& registry, EncoderSpec spec) {
  return registry.register_encoder(std::move(spec));
}

std::size_t dtype_width(Dtype d) { return d == Dtype::kF16 ? 2 : 4; }

std::string to_string(Dtype d) { return d == Dtype::kF16 ? "f16" : "f32"; }

Dtype parse_dtype(std::string_view s) {
  if (s == "f32") return Dtype::kF32;
  if (s == "f16") return Dtype::kF16;
  throw ValidationError("unknown dtype '" + std::string(s) + "'");
}

FeatureRecord FeatureRecord::from_values(std::string encoder_id, std::string layer_name, std::string image_id,
                                         TapShape shape, std::span<const float> values, Dtype dtype) {
  FeatureRecord r;
  r.encoder_id = std::move(encoder_id);
  r.layer_name = std::move(layer_name);
  r.image_id = std::move(image_id);
  r.dtype = dtype;
  r.shape = std::move(shape);
  if (static_cast<std::int64_t>(values.size()) != r.numel()) {
    throw ShapeError("record values do not match shape " + shape_string(r.shape));
  }
  if (dtype == Dtype::kF32) {
    r.payload.resize(values.size() * 4);
    std::memcpy(r.payload.data(), values.data(), r.payload.size());
  } else {
    r.payload.resize(values.size() * 2);
    for (std::size_t i = 0; i < values.size(); ++i) {
      const std::uint16_t h = float_to_half(values[i]);
      std::memcpy(r.payload.data() + 2 * i, &h, 2);
    }
  }
  r.validate();
  return r;
}

FeatureRecord FeatureRecord::from_tensor(std::string encoder_id, std::string layer_name, std::string image_id,
                                         const Tensor& t, Dtype dtype) {
  TapShape shape;
  if (t.is_spatial()) {
    shape = {t.rows(), t.height(), t.width()};
  } else if (t.rows() == 1) {
    shape = {t.cols()};
  } else {
    shape = {t.rows(), t.cols()};
  }
  return from_values(std::move(encoder_id), std::move(layer_name), std::move(image_id), std::move(shape),
                     std::span<const float>(t.value().data(), static_cast<std::size_t>(t.size())), dtype);
}

std::int64_t FeatureRecord::numel() const {
  return std::accumulate(shape.begin(), shape.end(), std::int64_t{1}, std::multiplies<>());
}

std::vector<float> FeatureRecord::values() const {
  const std::size_t n = payload.size() / dtype_width(dtype);
  std::vector<float> out(n);
  if (dtype == Dtype::kF32) {
    std::memcpy(out.data(), payload.data(), n * 4);
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      std::uint16_t h;
      std::memcpy(&h, payload.data() + 2 * i, 2);
      out[i] = half_to_float(h);
    }
  }
  return out;
}

Tensor FeatureRecord::to_tensor() const {
  const std::vector<float> v = values();
  if (shape.size() == 3) {
    Matrix m = Eigen::Map<const Matrix>(v.data(), shape[0], shape[1] * shape[2]);
    return Tensor::spatial(std::move(m), static_cast<int>(shape[1]), static_cast<int>(shape[2]));
  }
  const Index rows = shape.size() == 2 ? shape[0] : 1;
  return Tensor(Eigen::Map<const Matrix>(v.data(), rows, static_cast<Index>(v.size()) / rows));
}

void FeatureRecord::validate() const {
  for (auto d : shape) {
    if (d <= 0 || d > std::numeric_limits<std::uint32_t>::max()) throw FormatError("record has a bad dimension");
  }
  const auto expect = static_cast<std::size_t>(numel()) * dtype_width(dtype);
  if (payload.size() != expect) {
    throw FormatError("payload length mismatch: expected " + std::to_string(expect) + " bytes, found " +
                      std::to_string(payload.size()));
  }
  for (float v : values()) {
    if (!std::isfinite(v)) throw NumericError("record '" + image_id + "/" + layer_name + "' has non-finite values");
  }
}

namespace {

constexpr char kMagic[4] = {'C', 'A', 'P', 'R'};
constexpr std::uint16_t kVersion = 1;

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

void put_string(std::vector<std::uint8_t>& out, const std::string& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.insert(out.end(), s.begin(), s.end());
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}

  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, b_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string get_string(const char* what) {
    const auto n = get<std::uint32_t>(what);
    need(n, what);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  std::size_t remaining() const { return b_.size() - pos_; }
  std::span<const std::uint8_t> rest() const { return b_.subspan(pos_); }

 private:
  void need(std::size_t n, const char* what) const {
    if (remaining() < n) throw FormatError(std::string("corrupt header: truncated ") + what);
  }

  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_record(const FeatureRecord& r) {
  r.validate();
  if (r.shape.size() > 255) throw FormatError("record rank too large");
  std::vector<std::uint8_t> out;
  out.reserve(64 + r.payload.size());
  out.insert(out.end(), kMagic, kMagic + 4);
  put<std::uint16_t>(out, kVersion);
  put<std::uint8_t>(out, static_cast<std::uint8_t>(r.dtype));
  put<std::uint8_t>(out, r.defended ? 1 : 0);
  put<std::uint8_t>(out, static_cast<std::uint8_t>(r.shape.size()));
  for (auto d : r.shape) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  put_string(out, r.encoder_id);
  put_string(out, r.layer_name);
  put_string(out, r.image_id);
  out.insert(out.end(), r.payload.begin(), r.payload.end());
  return out;
}

FeatureRecord decode_record(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("corrupt header: bad magic");
  Reader rd(bytes.subspan(4));
  const auto version = rd.get<std::uint16_t>("version");
  if (version != kVersion) throw FormatError("unsupported format version " + std::to_string(version));
  FeatureRecord r;
  const auto dtype = rd.get<std::uint8_t>("dtype");
  if (dtype > 1) throw FormatError("corrupt header: unknown dtype code " + std::to_string(dtype));
  r.dtype = static_cast<Dtype>(dtype);
  const auto defended = rd.get<std::uint8_t>("defended flag");
  if (defended > 1) throw FormatError("corrupt header: defended flag is not 0/1");
  r.defended = defended == 1;
  const auto rank = rd.get<std::uint8_t>("rank");
  for (int i = 0; i < rank; ++i) r.shape.push_back(rd.get<std::uint32_t>("shape"));
  r.encoder_id = rd.get_string("encoder_id");
  r.layer_name = rd.get_string("layer_name");
  r.image_id = rd.get_string("image_id");
  const auto expect = static_cast<std::size_t>(r.numel()) * dtype_width(r.dtype);
  if (rd.remaining() != expect) {
    throw FormatError("payload length mismatch: expected " + std::to_string(expect) + " bytes, found " +
                      std::to_string(rd.remaining()));
  }
  const auto rest = rd.rest();
  r.payload.assign(rest.begin(), rest.end());
  r.validate();
  return r;
}

void write_record(const FeatureRecord& r, const std::filesystem::path& path) {
  const auto bytes = encode_record(r);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("failed writing " + path.string());
}

FeatureRecord read_record(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  try {
    return decode_record(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

std::vector<FeatureRecord> extract_features(const EncoderHandle& handle, std::span<const Tensor> images,
                                            std::span<const std::string> image_ids, std::string_view tap,
                                            Dtype dtype) {
  if (images.size() != image_ids.size()) throw ValidationError("extract_features: one image id per image required");
  const TapPoint& tp = handle.tap(tap);
  const int res = handle.encoder().input_resolution();
  std::vector<FeatureRecord> out;
  out.reserve(images.size());
  const std::string layer(tap);
  for (std::size_t i = 0; i < images.size(); ++i) {
    const Tensor& img = images[i];
    if (img.rows() != 3 || img.height() != res || img.width() != res) {
      throw ShapeError("image '" + image_ids[i] + "' is not a [3," + std::to_string(res) + "," + std::to_string(res) +
                       "] input");
    }
    auto feats = handle.capture(img, std::span<const std::string>(&layer, 1));
    FeatureRecord r = FeatureRecord::from_tensor(handle.spec().encoder_id, layer, image_ids[i], feats.at(layer), dtype);
    if (r.shape != tp.expected_shape) {
      throw ShapeError("tap '" + layer + "' produced " + shape_string(r.shape) + ", expected " +
                       shape_string(tp.expected_shape));
    }
    out.push_back(std::move(r));
  }
  return out;
}

namespace {

constexpr const char* kIndexName = "index.tsv";
constexpr const char* kIndexHeader = "#featinv-features\tversion=1";

std::string shape_field(const TapShape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out;
}

TapShape parse_shape_field(const std::string& s) {
  TapShape out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, 'x')) out.push_back(std::stoll(part));
  return out;
}

std::string sanitize(std::string_view s) {
  std::string out;
  for (char c : s) out += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '.') ? c : '_';
  return out.substr(0, 80);
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string f;
  while (std::getline(ss, f, '\t')) out.push_back(f);
  return out;
}

}  // namespace

FeatureStore::FeatureStore(std::filesystem::path dir, bool create) : dir_(std::move(dir)) {
  const auto index = dir_ / kIndexName;
  if (!std::filesystem::exists(index)) {
    if (!create) throw Error("no feature store at " + dir_.string());
    std::filesystem::create_directories(dir_);
    std::ofstream f(index);
    f << kIndexHeader << "\n";
    return;
  }
  std::ifstream f(index);
  std::string line;
  if (!std::getline(f, line) || line != kIndexHeader) throw FormatError(index.string() + ": not a feature index");
  int lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto fields = split_tabs(line);
    if (fields.size() != 7) {
      throw FormatError(index.string() + ":" + std::to_string(lineno) + ": expected 7 fields");
    }
    Entry e{fields[0], fields[1], fields[2], fields[3], parse_dtype(fields[4]), parse_shape_field(fields[5]),
            fields[6] == "1"};
    by_image_.emplace(e.image_id, entries_.size());
    entries_.push_back(std::move(e));
  }
}

void FeatureStore::add(const FeatureRecord& r) {
  std::ostringstream name;
  name << std::setw(7) << std::setfill('0') << entries_.size() << "_" << sanitize(r.image_id) << ".capr";
  Entry e{name.str(), r.encoder_id, r.layer_name, r.image_id, r.dtype, r.shape, r.defended};
  for (const auto* s : {&e.encoder_id, &e.layer_name, &e.image_id}) {
    if (s->find_first_of("\t\n") != std::string::npos) throw ValidationError("record metadata contains tab/newline");
  }
  write_record(r, dir_ / e.file);
  append_index(e);
  by_image_.emplace(e.image_id, entries_.size());
  entries_.push_back(std::move(e));
}

void FeatureStore::append_index(const Entry& e) {
  std::ofstream f(dir_ / kIndexName, std::ios::app);
  f << e.file << '\t' << e.encoder_id << '\t' << e.layer_name << '\t' << e.image_id << '\t' << to_string(e.dtype)
    << '\t' << shape_field(e.shape) << '\t' << (e.defended ? 1 : 0) << '\n';
  if (!f) throw Error("failed updating " + (dir_ / kIndexName).string());
}

FeatureRecord FeatureStore::load(std::size_t i) const {
  if (i >= entries_.size()) throw ValidationError("feature store index out of range");
  return read_record(dir_ / entries_[i].file);
}

std::ptrdiff_t FeatureStore::find(std::string_view image_id) const {
  auto it = by_image_.find(image_id);
  return it == by_image_.end() ? -1 : static_cast<std::ptrdiff_t>(it->second);
}

}  // namespace featinv
