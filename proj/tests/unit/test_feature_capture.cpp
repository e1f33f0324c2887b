#include <cstring>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "featinv/error.hpp"
#include "featinv/feature_capture.hpp"
#include "featinv/rng.hpp"
#include "featinv/safetensors.hpp"

using namespace featinv;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("featinv_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Tensor zeros_image(int res) { return Tensor::spatial(Matrix::Zero(3, static_cast<Index>(res) * res), res, res); }

FeatureRecord random_record(TapShape shape, Dtype dtype, std::uint64_t seed) {
  Rng rng(seed);
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  std::vector<float> v(static_cast<std::size_t>(n));
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return FeatureRecord::from_values("clip-rn50", "layer4", "img-0001", shape, v, dtype);
}

// Byte-for-byte layout built independently of encode_record.
std::vector<std::uint8_t> expected_bytes(const FeatureRecord& r) {
  std::vector<std::uint8_t> b = {'C', 'A', 'P', 'R', 1, 0, static_cast<std::uint8_t>(r.dtype),
                                 static_cast<std::uint8_t>(r.defended), static_cast<std::uint8_t>(r.shape.size())};
  auto u32 = [&](std::uint32_t v) {
    for (int i = 0; i < 4; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  };
  for (auto d : r.shape) u32(static_cast<std::uint32_t>(d));
  for (const auto* s : {&r.encoder_id, &r.layer_name, &r.image_id}) {
    u32(static_cast<std::uint32_t>(s->size()));
    b.insert(b.end(), s->begin(), s->end());
  }
  b.insert(b.end(), r.payload.begin(), r.payload.end());
  return b;
}

}  // namespace

TEST_CASE("ResNet50 spec exposes five taps with the published shapes") {
  EncoderRegistry reg;
  auto h = register_encoder(reg, standard_spec("clip-rn50"));
  REQUIRE(h->spec().tap_points.size() == 5);
  CHECK(h->tap("layer1").expected_shape == TapShape{256, 56, 56});
  CHECK(h->tap("layer2").expected_shape == TapShape{512, 28, 28});
  CHECK(h->tap("layer3").expected_shape == TapShape{1024, 14, 14});
  CHECK(h->tap("layer4").expected_shape == TapShape{2048, 7, 7});
  CHECK(h->tap("base").expected_shape == TapShape{1024});
}

TEST_CASE("ViT-B/16 base tap is a 512-vector") {
  EncoderRegistry reg;
  auto h = register_encoder(reg, standard_spec("clip-vit-b16"));
  CHECK(h->tap("base").expected_shape == TapShape{512});
}

TEST_CASE("standard specs agree with their encoders") {
  for (const auto& name : standard_spec_names()) {
    CAPTURE(name);
    CHECK_NOTHROW(EncoderHandle(standard_spec(name)));
  }
  CHECK(EncoderHandle(standard_spec("clip-rn101")).tap("base").expected_shape == TapShape{512});
  CHECK(EncoderHandle(standard_spec("mobilenet-v3-small")).tap("base").expected_shape == TapShape{1000});
}

TEST_CASE("unresolvable tap is rejected") {
  auto spec = standard_spec("clip-rn50");
  spec.tap_points.push_back({"layer9", {}});
  EncoderRegistry reg;
  CHECK_THROWS_AS(register_encoder(reg, spec), ValidationError);
}

TEST_CASE("registry guards") {
  EncoderRegistry reg;
  register_encoder(reg, standard_spec("toy"));
  CHECK_THROWS_AS(register_encoder(reg, standard_spec("toy")), ValidationError);
  auto empty = standard_spec("toy");
  empty.encoder_id = "toy2";
  empty.tap_points.clear();
  CHECK_THROWS_AS(register_encoder(reg, empty), ValidationError);
  auto wrong = standard_spec("toy");
  wrong.encoder_id = "toy3";
  wrong.tap_points = {{"layer1", {8, 15, 15}}};
  CHECK_THROWS_AS(register_encoder(reg, wrong), ShapeError);
  auto missing = standard_spec("toy");
  missing.encoder_id = "toy4";
  missing.weights_source = "/nonexistent/weights.safetensors";
  CHECK_THROWS_AS(register_encoder(reg, missing), ValidationError);
  CHECK_THROWS_AS(parse_family("transformer"), ValidationError);
  CHECK_THROWS_AS(reg.get("nope"), ValidationError);
  CHECK(reg.ids() == std::vector<std::string>{"toy"});
}

TEST_CASE("weights loaded from a file reproduce the source encoder") {
  auto dir = temp_dir("weights");
  auto src = make_encoder(ToyConfig{}, 77);
  write_safetensors(dir / "toy.safetensors", to_tensor_map(src->params()));
  auto spec = standard_spec("toy");
  spec.weights_source = (dir / "toy.safetensors").string();
  EncoderHandle h(spec);
  CHECK(hash_params(h.encoder().params()) == hash_params(src->params()));
}

static void write_raw_safetensors(const fs::path& path, const std::string& header, const std::string& data) {
  std::ofstream f(path, std::ios::binary);
  const std::uint64_t n = header.size();
  f.write(reinterpret_cast<const char*>(&n), 8);
  f << header << data;
}

TEST_CASE("integer safetensors entries are skipped, unknown float types rejected") {
  auto dir = temp_dir("dtypes");
  const float one = 1.0f;
  std::string data(reinterpret_cast<const char*>(&one), 4);
  data += std::string(8, '\0');
  write_raw_safetensors(dir / "mixed.safetensors",
                        R"({"w":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},)"
                        R"("bn.num_batches_tracked":{"dtype":"I64","shape":[],"data_offsets":[4,12]}})",
                        data);
  const TensorMap m = read_safetensors(dir / "mixed.safetensors");
  CHECK(m.size() == 1);
  CHECK(m.at("w").data.at(0) == 1.0f);

  write_raw_safetensors(dir / "f64.safetensors", R"({"w":{"dtype":"F64","shape":[1],"data_offsets":[0,8]}})",
                        std::string(8, '\0'));
  CHECK_THROWS_AS(read_safetensors(dir / "f64.safetensors"), FormatError);
}

TEST_CASE("extraction is deterministic and unflagged") {
  EncoderHandle h(standard_spec("toy"));
  std::vector<Tensor> imgs{zeros_image(32), zeros_image(32)};
  std::vector<std::string> ids{"a", "b"};
  auto recs = extract_features(h, imgs, ids, "layer3");
  REQUIRE(recs.size() == 2);
  CHECK(recs[0].payload == recs[1].payload);
  CHECK_FALSE(recs[0].defended);
  CHECK(recs[0].shape == TapShape{32, 4, 4});
  auto again = extract_features(h, imgs, ids, "layer3");
  CHECK(again[0].payload == recs[0].payload);
}

TEST_CASE("one image through ResNet50 layer4") {
  EncoderHandle h(standard_spec("clip-rn50"));
  Rng rng(5);
  std::vector<Tensor> imgs{Tensor::spatial(rng.normal_matrix(3, 224 * 224, 1.0f), 224, 224)};
  std::vector<std::string> ids{"x"};
  auto recs = extract_features(h, imgs, ids, "layer4");
  CHECK(recs.at(0).shape == TapShape{2048, 7, 7});
}

TEST_CASE("extraction rejects images at the wrong resolution") {
  EncoderHandle h(standard_spec("toy"));
  std::vector<Tensor> imgs{zeros_image(64)};
  std::vector<std::string> ids{"a"};
  CHECK_THROWS_AS(extract_features(h, imgs, ids, "base"), ShapeError);
  std::vector<Tensor> ok{zeros_image(32)};
  CHECK_THROWS_AS(extract_features(h, ok, ids, "no-proj"), ValidationError);
}

TEST_CASE("f32 record round trip is bit-exact") {
  auto dir = temp_dir("roundtrip");
  auto r = random_record({2048, 7, 7}, Dtype::kF32, 1);
  r.defended = true;
  write_record(r, dir / "r.capr");
  CHECK(read_record(dir / "r.capr") == r);
}

TEST_CASE("f16 record bytes match an independent layout") {
  auto r = random_record({4, 3, 2}, Dtype::kF16, 2);
  const auto bytes = encode_record(r);
  CHECK(bytes == expected_bytes(r));
  CHECK(decode_record(bytes) == r);
  // Known half encodings.
  auto k = FeatureRecord::from_values("e", "l", "i", {4}, std::vector<float>{1.0f, -2.0f, 0.5f, 65504.0f}, Dtype::kF16);
  const std::uint16_t want[4] = {0x3C00, 0xC000, 0x3800, 0x7BFF};
  CHECK(std::memcmp(k.payload.data(), want, 8) == 0);
  CHECK(k.values() == std::vector<float>{1.0f, -2.0f, 0.5f, 65504.0f});
}

TEST_CASE("corrupt records are rejected") {
  auto dir = temp_dir("corrupt");
  auto r = random_record({8, 2, 2}, Dtype::kF32, 3);
  auto bytes = encode_record(r);

  auto truncated = bytes;
  truncated.resize(bytes.size() - 5);
  CHECK_THROWS_WITH_AS(decode_record(truncated), doctest::Contains("payload length mismatch"), FormatError);

  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_WITH_AS(decode_record(bad_magic), doctest::Contains("bad magic"), FormatError);

  auto bad_version = bytes;
  bad_version[4] = 2;
  CHECK_THROWS_WITH_AS(decode_record(bad_version), doctest::Contains("unsupported format version"), FormatError);

  std::vector<std::uint8_t> header_only(bytes.begin(), bytes.begin() + 12);
  CHECK_THROWS_AS(decode_record(header_only), FormatError);

  {
    std::ofstream f(dir / "t.capr", std::ios::binary);
    f.write(reinterpret_cast<const char*>(truncated.data()), static_cast<std::streamsize>(truncated.size()));
  }
  CHECK_THROWS_AS(read_record(dir / "t.capr"), FormatError);

  std::vector<float> bad{1.0f, std::nanf("")};
  CHECK_THROWS_AS(FeatureRecord::from_values("e", "l", "i", {2}, bad), NumericError);
}

TEST_CASE("feature store persists records and index") {
  auto dir = temp_dir("store");
  {
    FeatureStore store(dir, true);
    for (int i = 0; i < 3; ++i) {
      auto r = random_record({5}, Dtype::kF32, 10 + i);
      r.image_id = "im/" + std::to_string(i);
      store.add(r);
    }
  }
  FeatureStore reopened(dir);
  REQUIRE(reopened.size() == 3);
  CHECK(reopened.entries()[1].image_id == "im/1");
  CHECK(reopened.find("im/2") == 2);
  CHECK(reopened.find("missing") == -1);
  auto r = reopened.load(2);
  CHECK(r.payload == random_record({5}, Dtype::kF32, 12).payload);
  CHECK_THROWS(FeatureStore(dir / "nope"));
}
