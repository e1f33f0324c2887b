// Copyright 2026 The featinv Authors
// SPDX-License-Identifier: Apache-2.0

#include "common.hpp"

namespace featinv {

namespace {

class ToyEncoder final : public Encoder {
 public:
  ToyEncoder(const ToyConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    if (cfg.resolution % 16 != 0) throw ValidationError("toy resolution must be a multiple of 16");
    Rng rng(seed);
    int in = 3;
    for (std::size_t i = 0; i < 4; ++i) {
      convs_[i] = nn::Conv2d(in, cfg.channels[i], {3, 2, 1, 1}, true, rng);
      // Small positive biases keep most ReLUs alive under random weights.
      convs_[i].bias.value_mut().setConstant(0.05f);
      in = cfg.channels[i];
    }
    head_ = nn::Linear(in, cfg.base_dim, true, rng);
    encoders_detail::freeze(params());
  }

  ArchitectureFamily family() const override { return ArchitectureFamily::kToy; }
  std::vector<std::string> layer_names() const override { return {"layer1", "layer2", "layer3", "layer4", "base"}; }

  TapShape layer_shape(std::string_view layer) const override {
    for (int i = 0; i < 4; ++i) {
      if (layer == "layer" + std::to_string(i + 1)) {
        const std::int64_t s = cfg_.resolution >> (i + 1);
        return {cfg_.channels[static_cast<std::size_t>(i)], s, s};
      }
    }
    if (layer == "base") return {cfg_.base_dim};
    throw ValidationError("toy encoder has no layer '" + std::string(layer) + "'");
  }

  int input_resolution() const override { return cfg_.resolution; }

  Tensor forward(const Tensor& image, const StageHook& hook) const override {
    encoders_detail::check_input(image, cfg_.resolution);
    Tensor x = image;
    for (int i = 0; i < 4; ++i) {
      x = ops::relu(convs_[static_cast<std::size_t>(i)].forward(x));
      if (hook && hook("layer" + std::to_string(i + 1), x) == HookAction::kStop) return {};
    }
    Tensor out = head_.forward(ops::transpose(ops::mean_cols(x)));
    if (hook && hook("base", out) == HookAction::kStop) return {};
    return out;
  }

  NamedParams params() const override {
    NamedParams p;
    for (std::size_t i = 0; i < 4; ++i) append_params(p, "layer" + std::to_string(i + 1), convs_[i].params());
    append_params(p, "head", head_.params());
    return p;
  }

  void load_weights(const TensorMap& src) override { load_params(params(), src, true); }

 private:
  ToyConfig cfg_;
  std::array<nn::Conv2d, 4> convs_;
  nn::Linear head_;
};

}  // namespace

std::unique_ptr<Encoder> make_toy(const ToyConfig& cfg, std::uint64_t seed) {
  return std::make_unique<ToyEncoder>(cfg, seed);
}

}  // namespace featinv
