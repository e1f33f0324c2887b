// Copyright 2026 The featinv Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include "common.hpp"

namespace featinv {

namespace {

using ops::Conv2dGeometry;

struct Bottleneck {
  nn::Conv2d conv1, conv2, conv3;
  nn::BatchNorm2d bn1, bn2, bn3;
  nn::Conv2d down_conv;
  nn::BatchNorm2d down_bn;
  int stride = 1;
  bool has_down = false;

  Bottleneck(int inplanes, int planes, int stride_, Rng& rng) : stride(stride_) {
    conv1 = nn::Conv2d(inplanes, planes, {1, 1, 0, 1}, false, rng);
    bn1 = nn::BatchNorm2d(planes);
    conv2 = nn::Conv2d(planes, planes, {3, 1, 1, 1}, false, rng);
    bn2 = nn::BatchNorm2d(planes);
    conv3 = nn::Conv2d(planes, planes * 4, {1, 1, 0, 1}, false, rng);
    bn3 = nn::BatchNorm2d(planes * 4);
    has_down = stride > 1 || inplanes != planes * 4;
    if (has_down) {
      down_conv = nn::Conv2d(inplanes, planes * 4, {1, 1, 0, 1}, false, rng);
      down_bn = nn::BatchNorm2d(planes * 4);
    }
  }

  Tensor forward(const Tensor& x) const {
    Tensor out = ops::relu(bn1.forward(conv1.forward(x)));
    out = ops::relu(bn2.forward(conv2.forward(out)));
    if (stride > 1) out = ops::avg_pool2d(out, stride, stride);
    out = bn3.forward(conv3.forward(out));
    Tensor identity = x;
    if (has_down) {
      if (stride > 1) identity = ops::avg_pool2d(identity, stride, stride);
      identity = down_bn.forward(down_conv.forward(identity));
    }
    return ops::relu(ops::add(out, identity));
  }

  NamedParams params() const {
    NamedParams p;
    append_params(p, "conv1", conv1.params());
    append_params(p, "bn1", bn1.params());
    append_params(p, "conv2", conv2.params());
    append_params(p, "bn2", bn2.params());
    append_params(p, "conv3", conv3.params());
    append_params(p, "bn3", bn3.params());
    if (has_down) {
      append_params(p, "downsample.0", down_conv.params());
      append_params(p, "downsample.1", down_bn.params());
    }
    return p;
  }
};

struct AttentionPool {
  Tensor positional_embedding;  // [S*S + 1, C]
  nn::Linear q_proj, k_proj, v_proj, c_proj;
  int heads = 1;

  AttentionPool(int spatial, int embed_dim, int heads_, int output_dim, Rng& rng) : heads(heads_) {
    positional_embedding =
        Tensor(rng.normal_matrix(spatial * spatial + 1, embed_dim, 1.0f / std::sqrt(static_cast<float>(embed_dim))));
    q_proj = nn::Linear(embed_dim, embed_dim, true, rng);
    k_proj = nn::Linear(embed_dim, embed_dim, true, rng);
    v_proj = nn::Linear(embed_dim, embed_dim, true, rng);
    c_proj = nn::Linear(embed_dim, output_dim, true, rng);
  }

  Tensor forward(const Tensor& x) const {
    Tensor tokens = ops::transpose(x);
    Tensor seq = ops::concat_rows({ops::mean_rows(tokens), tokens});
    seq = ops::add(seq, positional_embedding);
    Tensor q = q_proj.forward(ops::slice_rows(seq, 0, 1));
    Tensor k = k_proj.forward(seq);
    Tensor v = v_proj.forward(seq);
    return c_proj.forward(nn::attention(q, k, v, heads, nullptr));
  }

  NamedParams params() const {
    NamedParams p{{"positional_embedding", positional_embedding}};
    append_params(p, "q_proj", q_proj.params());
    append_params(p, "k_proj", k_proj.params());
    append_params(p, "v_proj", v_proj.params());
    append_params(p, "c_proj", c_proj.params());
    return p;
  }
};

class ResNetEncoder final : public Encoder {
 public:
  ResNetEncoder(const ResNetConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    if (cfg.resolution % 32 != 0) throw ValidationError("resnet resolution must be a multiple of 32");
    Rng rng(seed);
    const int w = cfg.width;
    conv1_ = nn::Conv2d(3, w / 2, {3, 2, 1, 1}, false, rng);
    bn1_ = nn::BatchNorm2d(w / 2);
    conv2_ = nn::Conv2d(w / 2, w / 2, {3, 1, 1, 1}, false, rng);
    bn2_ = nn::BatchNorm2d(w / 2);
    conv3_ = nn::Conv2d(w / 2, w, {3, 1, 1, 1}, false, rng);
    bn3_ = nn::BatchNorm2d(w);
    int inplanes = w;
    for (int li = 0; li < 4; ++li) {
      const int planes = w << li;
      const int stride = li == 0 ? 1 : 2;
      for (int b = 0; b < cfg.layers[static_cast<std::size_t>(li)]; ++b) {
        stages_[static_cast<std::size_t>(li)].emplace_back(inplanes, planes, b == 0 ? stride : 1, rng);
        inplanes = planes * 4;
      }
    }
    attnpool_.emplace(cfg.resolution / 32, w * 32, cfg.heads, cfg.output_dim, rng);
    encoders_detail::freeze(params());
  }

  ArchitectureFamily family() const override { return ArchitectureFamily::kResnet; }

  std::vector<std::string> layer_names() const override { return {"layer1", "layer2", "layer3", "layer4", "base"}; }

  TapShape layer_shape(std::string_view layer) const override {
    for (int li = 0; li < 4; ++li) {
      if (layer == "layer" + std::to_string(li + 1)) {
        const std::int64_t s = cfg_.resolution / (4 << li);
        return {static_cast<std::int64_t>(cfg_.width) * (4 << li), s, s};
      }
    }
    if (layer == "base") return {cfg_.output_dim};
    throw ValidationError("resnet has no layer '" + std::string(layer) + "'");
  }

  int input_resolution() const override { return cfg_.resolution; }

  Tensor forward(const Tensor& image, const StageHook& hook) const override {
    encoders_detail::check_input(image, cfg_.resolution);
    Tensor x = ops::relu(bn1_.forward(conv1_.forward(image)));
    x = ops::relu(bn2_.forward(conv2_.forward(x)));
    x = ops::relu(bn3_.forward(conv3_.forward(x)));
    x = ops::avg_pool2d(x, 2, 2);
    for (int li = 0; li < 4; ++li) {
      for (const auto& block : stages_[static_cast<std::size_t>(li)]) x = block.forward(x);
      if (hook && hook("layer" + std::to_string(li + 1), x) == HookAction::kStop) return {};
    }
    Tensor out = attnpool_->forward(x);
    if (hook && hook("base", out) == HookAction::kStop) return {};
    return out;
  }

  NamedParams params() const override {
    NamedParams p;
    append_params(p, "conv1", conv1_.params());
    append_params(p, "bn1", bn1_.params());
    append_params(p, "conv2", conv2_.params());
    append_params(p, "bn2", bn2_.params());
    append_params(p, "conv3", conv3_.params());
    append_params(p, "bn3", bn3_.params());
    for (std::size_t li = 0; li < 4; ++li) {
      for (std::size_t b = 0; b < stages_[li].size(); ++b) {
        append_params(p, "layer" + std::to_string(li + 1) + "." + std::to_string(b), stages_[li][b].params());
      }
    }
    append_params(p, "attnpool", attnpool_->params());
    return p;
  }

  void load_weights(const TensorMap& src) override {
    load_params(params(), encoders_detail::normalize_state_dict(src), true);
  }

 private:
  ResNetConfig cfg_;
  nn::Conv2d conv1_, conv2_, conv3_;
  nn::BatchNorm2d bn1_, bn2_, bn3_;
  std::array<std::vector<Bottleneck>, 4> stages_;
  std::optional<AttentionPool> attnpool_;
};

}  // namespace

std::unique_ptr<Encoder> make_resnet(const ResNetConfig& cfg, std::uint64_t seed) {
  return std::make_unique<ResNetEncoder>(cfg, seed);
}

}  // namespace featinv
