// Copyright 2026 The featinv Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include "common.hpp"

namespace featinv {

namespace {

struct ResidualBlock {
  nn::LayerNorm ln_1, ln_2;
  nn::MultiHeadAttention attn;
  nn::Linear c_fc, c_proj;

  ResidualBlock(int width, int heads, Rng& rng)
      : ln_1(width),
        ln_2(width),
        attn(width, width, heads, rng),
        c_fc(width, width * 4, true, rng),
        c_proj(width * 4, width, true, rng) {}

  Tensor forward(const Tensor& x) const {
    Tensor h = ln_1.forward(x);
    Tensor y = ops::add(x, attn.forward(h, h));
    return ops::add(y, c_proj.forward(ops::quick_gelu(c_fc.forward(ln_2.forward(y)))));
  }

  NamedParams params() const {
    NamedParams p;
    append_params(p, "ln_1", ln_1.params());
    append_params(p, "attn", attn.params());
    append_params(p, "ln_2", ln_2.params());
    append_params(p, "mlp.c_fc", c_fc.params());
    append_params(p, "mlp.c_proj", c_proj.params());
    return p;
  }
};

class VitEncoder final : public Encoder {
 public:
  VitEncoder(const VitConfig& cfg, std::uint64_t seed) : cfg_(cfg), ln_pre_(cfg.width), ln_post_(cfg.width) {
    if (cfg.resolution % cfg.patch != 0) throw ValidationError("vit resolution must be a multiple of the patch size");
    Rng rng(seed);
    const float scale = 1.0f / std::sqrt(static_cast<float>(cfg.width));
    const int grid = cfg.resolution / cfg.patch;
    conv1_ = nn::Conv2d(3, cfg.width, {cfg.patch, cfg.patch, 0, 1}, false, rng);
    class_embedding_ = Tensor(rng.normal_matrix(1, cfg.width, scale));
    positional_embedding_ = Tensor(rng.normal_matrix(grid * grid + 1, cfg.width, scale));
    for (int i = 0; i < cfg.layers; ++i) blocks_.emplace_back(cfg.width, cfg.heads, rng);
    proj_ = Tensor(rng.normal_matrix(cfg.width, cfg.output_dim, scale));
    encoders_detail::freeze(params());
  }

  ArchitectureFamily family() const override { return ArchitectureFamily::kVit; }
  std::vector<std::string> layer_names() const override { return {"no-proj", "base"}; }

  TapShape layer_shape(std::string_view layer) const override {
    if (layer == "no-proj") return {cfg_.width};
    if (layer == "base") return {cfg_.output_dim};
    throw ValidationError("vit has no layer '" + std::string(layer) + "'");
  }

  int input_resolution() const override { return cfg_.resolution; }

  Tensor forward(const Tensor& image, const StageHook& hook) const override {
    encoders_detail::check_input(image, cfg_.resolution);
    Tensor tokens = ops::transpose(conv1_.forward(image));
    Tensor x = ops::add(ops::concat_rows({class_embedding_, tokens}), positional_embedding_);
    x = ln_pre_.forward(x);
    for (const auto& b : blocks_) x = b.forward(x);
    Tensor pooled = ln_post_.forward(ops::slice_rows(x, 0, 1));
    if (hook && hook("no-proj", pooled) == HookAction::kStop) return {};
    Tensor out = ops::matmul(pooled, proj_);
    if (hook && hook("base", out) == HookAction::kStop) return {};
    return out;
  }

  NamedParams params() const override {
    NamedParams p{{"class_embedding", class_embedding_}, {"positional_embedding", positional_embedding_}, {"proj", proj_}};
    append_params(p, "conv1", conv1_.params());
    append_params(p, "ln_pre", ln_pre_.params());
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      append_params(p, "transformer.resblocks." + std::to_string(i), blocks_[i].params());
    }
    append_params(p, "ln_post", ln_post_.params());
    return p;
  }

  void load_weights(const TensorMap& src) override {
    load_params(params(), encoders_detail::normalize_state_dict(src), true);
  }

 private:
  VitConfig cfg_;
  nn::Conv2d conv1_;
  Tensor class_embedding_, positional_embedding_, proj_;
  nn::LayerNorm ln_pre_, ln_post_;
  std::vector<ResidualBlock> blocks_;
};

}  // namespace

std::unique_ptr<Encoder> make_vit(const VitConfig& cfg, std::uint64_t seed) {
  return std::make_unique<VitEncoder>(cfg, seed);
}

}  // namespace featinv
