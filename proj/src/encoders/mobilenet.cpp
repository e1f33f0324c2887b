// Copyright 2026 The featinv Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>

#include "common.hpp"

namespace featinv {

namespace {

enum class Act { kNone, kRelu, kRelu6, kHardswish };

Tensor activate(const Tensor& x, Act a) {
  switch (a) {
    case Act::kRelu:
      return ops::relu(x);
    case Act::kRelu6:
      return ops::relu6(x);
    case Act::kHardswish:
      return ops::hardswish(x);
    case Act::kNone:
      break;
  }
  return x;
}

int make_divisible(double v, int divisor = 8) {
  int nv = std::max(divisor, static_cast<int>(v + divisor / 2.0) / divisor * divisor);
  if (nv < 0.9 * v) nv += divisor;
  return nv;
}

// Conv followed by batch norm and an optional activation. torchvision names
// the pair either "<p>.0"/"<p>.1" or as two independent indices.
struct ConvBn {
  std::string conv_name, bn_name;
  nn::Conv2d conv;
  nn::BatchNorm2d bn;
  Act act = Act::kNone;

  Tensor forward(const Tensor& x) const { return activate(bn.forward(conv.forward(x)), act); }
};

struct SqueezeExcite {
  std::string name;
  nn::Conv2d fc1, fc2;

  Tensor forward(const Tensor& x) const {
    Tensor s = ops::mean_cols(x);
    s.set_spatial(1, 1);
    s = ops::relu(fc1.forward(s));
    s = ops::hardsigmoid(fc2.forward(s));
    return ops::mul_col(x, s);
  }
};

struct Unit {
  std::variant<ConvBn, SqueezeExcite> op;
};

struct Block {
  std::string name;
  std::vector<Unit> units;
  bool residual = false;

  Tensor forward(const Tensor& x) const {
    Tensor y = x;
    for (const auto& u : units) {
      y = std::visit([&](const auto& op) { return op.forward(y); }, u.op);
    }
    return residual ? ops::add(x, y) : y;
  }

  NamedParams params() const {
    NamedParams p;
    for (const auto& u : units) {
      if (const auto* c = std::get_if<ConvBn>(&u.op)) {
        append_params(p, c->conv_name, c->conv.params());
        append_params(p, c->bn_name, c->bn.params());
      } else {
        const auto& se = std::get<SqueezeExcite>(u.op);
        append_params(p, se.name + ".fc1", se.fc1.params());
        append_params(p, se.name + ".fc2", se.fc2.params());
      }
    }
    NamedParams out;
    append_params(out, name, p);
    return out;
  }
};

struct V3Setting {
  int kernel, expanded, out;
  bool se;
  bool hardswish;
  int stride;
};

const std::vector<V3Setting> kV3Large = {
    {3, 16, 16, false, false, 1},   {3, 64, 24, false, false, 2},  {3, 72, 24, false, false, 1},
    {5, 72, 40, true, false, 2},    {5, 120, 40, true, false, 1},  {5, 120, 40, true, false, 1},
    {3, 240, 80, false, true, 2},   {3, 200, 80, false, true, 1},  {3, 184, 80, false, true, 1},
    {3, 184, 80, false, true, 1},   {3, 480, 112, true, true, 1},  {3, 672, 112, true, true, 1},
    {5, 672, 160, true, true, 2},   {5, 960, 160, true, true, 1},  {5, 960, 160, true, true, 1},
};

const std::vector<V3Setting> kV3Small = {
    {3, 16, 16, true, false, 2},  {3, 72, 24, false, false, 2}, {3, 88, 24, false, false, 1},
    {5, 96, 40, true, true, 2},   {5, 240, 40, true, true, 1},  {5, 240, 40, true, true, 1},
    {5, 120, 48, true, true, 1},  {5, 144, 48, true, true, 1},  {5, 288, 96, true, true, 2},
    {5, 576, 96, true, true, 1},  {5, 576, 96, true, true, 1},
};

class MobileNetEncoder final : public Encoder {
 public:
  MobileNetEncoder(const MobileNetConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    if (cfg.resolution % 32 != 0) throw ValidationError("mobilenet resolution must be a multiple of 32");
    Rng rng(seed);
    if (cfg.version == MobileNetConfig::Version::kV2) {
      build_v2(rng);
    } else {
      build_v3(rng);
    }
    encoders_detail::freeze(params());
  }

  ArchitectureFamily family() const override { return ArchitectureFamily::kMobilenet; }
  std::vector<std::string> layer_names() const override { return {"features", "base"}; }

  TapShape layer_shape(std::string_view layer) const override {
    if (layer == "features") {
      const std::int64_t s = cfg_.resolution / 32;
      return {feature_channels_, s, s};
    }
    if (layer == "base") return {cfg_.num_classes};
    throw ValidationError("mobilenet has no layer '" + std::string(layer) + "'");
  }

  int input_resolution() const override { return cfg_.resolution; }

  Tensor forward(const Tensor& image, const StageHook& hook) const override {
    encoders_detail::check_input(image, cfg_.resolution);
    Tensor x = image;
    for (const auto& b : blocks_) x = b.forward(x);
    if (hook && hook("features", x) == HookAction::kStop) return {};
    Tensor v = ops::transpose(ops::mean_cols(x));
    Tensor out;
    if (cfg_.version == MobileNetConfig::Version::kV2) {
      out = head_out_.forward(v);
    } else {
      out = head_out_.forward(ops::hardswish(head_hidden_.forward(v)));
    }
    if (hook && hook("base", out) == HookAction::kStop) return {};
    return out;
  }

  NamedParams params() const override {
    NamedParams p;
    for (const auto& b : blocks_) append_params(p, "features", b.params());
    if (cfg_.version == MobileNetConfig::Version::kV2) {
      append_params(p, "classifier.1", head_out_.params());
    } else {
      append_params(p, "classifier.0", head_hidden_.params());
      append_params(p, "classifier.3", head_out_.params());
    }
    return p;
  }

  void load_weights(const TensorMap& src) override { load_params(params(), src, true); }

 private:
  ConvBn conv_bn(std::string conv_name, std::string bn_name, int in, int out, int k, int stride, int groups, Act act,
                 float eps, Rng& rng) {
    ConvBn c;
    c.conv_name = std::move(conv_name);
    c.bn_name = std::move(bn_name);
    c.conv = nn::Conv2d(in, out, {k, stride, (k - 1) / 2, groups}, false, rng);
    c.bn = nn::BatchNorm2d(out, eps);
    c.act = act;
    return c;
  }

  void build_v2(Rng& rng) {
    const float wm = cfg_.width_mult;
    const float eps = 1e-5f;
    struct Setting {
      int t, c, n, s;
    };
    const Setting settings[] = {{1, 16, 1, 1}, {6, 24, 2, 2}, {6, 32, 3, 2}, {6, 64, 4, 2},
                                {6, 96, 3, 1}, {6, 160, 3, 2}, {6, 320, 1, 1}};
    int input = make_divisible(32 * wm);
    const int last = make_divisible(1280 * std::max(1.0f, wm));
    int idx = 0;
    blocks_.push_back({std::to_string(idx++), {{conv_bn("0", "1", 3, input, 3, 2, 1, Act::kRelu6, eps, rng)}}, false});
    for (const auto& st : settings) {
      const int out = make_divisible(st.c * wm);
      for (int i = 0; i < st.n; ++i) {
        const int stride = i == 0 ? st.s : 1;
        const int hidden = static_cast<int>(std::lround(input * st.t));
        Block b;
        b.name = std::to_string(idx++);
        b.residual = stride == 1 && input == out;
        int j = 0;
        if (st.t != 1) {
          b.units.push_back({conv_bn("conv.0.0", "conv.0.1", input, hidden, 1, 1, 1, Act::kRelu6, eps, rng)});
          ++j;
        }
        const std::string dw = "conv." + std::to_string(j);
        b.units.push_back({conv_bn(dw + ".0", dw + ".1", hidden, hidden, 3, stride, hidden, Act::kRelu6, eps, rng)});
        ++j;
        b.units.push_back({conv_bn("conv." + std::to_string(j), "conv." + std::to_string(j + 1), hidden, out, 1, 1, 1,
                                   Act::kNone, eps, rng)});
        blocks_.push_back(std::move(b));
        input = out;
      }
    }
    blocks_.push_back({std::to_string(idx), {{conv_bn("0", "1", input, last, 1, 1, 1, Act::kRelu6, eps, rng)}}, false});
    feature_channels_ = last;
    head_out_ = nn::Linear(last, cfg_.num_classes, true, rng);
  }

  void build_v3(Rng& rng) {
    const bool large = cfg_.version == MobileNetConfig::Version::kV3Large;
    const auto& settings = large ? kV3Large : kV3Small;
    const float wm = cfg_.width_mult;
    const float eps = 1e-3f;
    const auto adj = [wm](int c) { return make_divisible(c * wm); };
    int input = adj(16);
    int idx = 0;
    blocks_.push_back({std::to_string(idx++), {{conv_bn("0", "1", 3, input, 3, 2, 1, Act::kHardswish, eps, rng)}}, false});
    for (const auto& st : settings) {
      const int expanded = adj(st.expanded);
      const int out = adj(st.out);
      const Act act = st.hardswish ? Act::kHardswish : Act::kRelu;
      Block b;
      b.name = std::to_string(idx++);
      b.residual = st.stride == 1 && input == out;
      int j = 0;
      const auto pos = [&](int k) { return "block." + std::to_string(k); };
      if (expanded != input) {
        b.units.push_back({conv_bn(pos(j) + ".0", pos(j) + ".1", input, expanded, 1, 1, 1, act, eps, rng)});
        ++j;
      }
      b.units.push_back(
          {conv_bn(pos(j) + ".0", pos(j) + ".1", expanded, expanded, st.kernel, st.stride, expanded, act, eps, rng)});
      ++j;
      if (st.se) {
        const int squeeze = make_divisible(expanded / 4);
        SqueezeExcite se;
        se.name = pos(j);
        se.fc1 = nn::Conv2d(expanded, squeeze, {1, 1, 0, 1}, true, rng);
        se.fc2 = nn::Conv2d(squeeze, expanded, {1, 1, 0, 1}, true, rng);
        b.units.push_back({std::move(se)});
        ++j;
      }
      b.units.push_back({conv_bn(pos(j) + ".0", pos(j) + ".1", expanded, out, 1, 1, 1, Act::kNone, eps, rng)});
      blocks_.push_back(std::move(b));
      input = out;
    }
    const int last_conv = 6 * input;
    blocks_.push_back(
        {std::to_string(idx), {{conv_bn("0", "1", input, last_conv, 1, 1, 1, Act::kHardswish, eps, rng)}}, false});
    feature_channels_ = last_conv;
    const int last_channel = adj(large ? 1280 : 1024);
    head_hidden_ = nn::Linear(last_conv, last_channel, true, rng);
    head_out_ = nn::Linear(last_channel, cfg_.num_classes, true, rng);
  }

  MobileNetConfig cfg_;
  std::vector<Block> blocks_;
  std::int64_t feature_channels_ = 0;
  nn::Linear head_hidden_, head_out_;
};

}  // namespace

std::unique_ptr<Encoder> make_mobilenet(const MobileNetConfig& cfg, std::uint64_t seed) {
  return std::make_unique<MobileNetEncoder>(cfg, seed);
}

}  // namespace featinv
