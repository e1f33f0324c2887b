// Copyright 2026 The featinv Authors
// SPDX-License-Identifier: Apache-2.0

#include "featinv/inversion_core.hpp"

#include <fstream>

#include "featinv/error.hpp"

namespace featinv {

using nlohmann::json;

ProjectionParams::ProjectionParams(int d, int d_prime, Rng& rng) : affine(d, d_prime, true, rng) {}

ProjectionParams ProjectionParams::from_matrices(const Matrix& w, const Matrix& b) {
  if (b.size() != w.rows()) throw ShapeError("projection bias length must equal W_p rows");
  ProjectionParams p;
  p.affine.weight = Tensor(w, true);
  p.affine.bias = Tensor(Eigen::Map<const Matrix>(b.data(), 1, b.size()), true);
  return p;
}

Tensor project_vector(const Tensor& f, const ProjectionParams& p) {
  if (f.rows() != 1 || f.cols() != p.d()) {
    throw ShapeError("project_vector: expected a [1," + std::to_string(p.d()) + "] feature, got [" +
                     std::to_string(f.rows()) + "," + std::to_string(f.cols()) + "]");
  }
  return p.affine.forward(f);
}

SpatialProjector::SpatialProjector(SpatialProjectorConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
  if (cfg_.input_shape.size() != 3) throw ShapeError("spatial projector needs a [C,H,W] input shape");
  if (cfg_.channels < 1 || cfg_.blocks < 0) throw ValidationError("spatial projector: bad channel/block count");
  const int c = static_cast<int>(cfg_.input_shape[0]);
  const int h = static_cast<int>(cfg_.input_shape[1]);
  const int stride = std::max(1, h / 14);
  stem_ = nn::Conv2d(c, cfg_.channels, {stride, stride, 0, 1}, true, rng);
  for (int i = 0; i < cfg_.blocks; ++i) {
    Block b;
    b.conv1 = nn::Conv2d(cfg_.channels, cfg_.channels, {3, 1, 1, 1}, true, rng);
    b.conv2 = nn::Conv2d(cfg_.channels, cfg_.channels, {3, 1, 1, 1}, true, rng);
    blocks_.push_back(std::move(b));
  }
}

bool SpatialProjector::accepts(const Tensor& f) const {
  return f.is_spatial() && f.rows() == cfg_.input_shape[0] && f.height() == cfg_.input_shape[1] &&
         f.width() == cfg_.input_shape[2];
}

Tensor SpatialProjector::forward(const Tensor& f) const {
  if (!accepts(f)) {
    throw ShapeError("spatial projector declared for " + shape_string(cfg_.input_shape) + ", got [" +
                     std::to_string(f.rows()) + "," + std::to_string(f.height()) + "," + std::to_string(f.width()) +
                     "]");
  }
  Tensor x = ops::relu(stem_.forward(f));
  for (const auto& b : blocks_) {
    Tensor y = b.conv2.forward(ops::relu(b.conv1.forward(x)));
    x = ops::relu(ops::add(x, y));
  }
  return ops::transpose(ops::mean_cols(x));
}

NamedParams SpatialProjector::params() const {
  NamedParams p;
  append_params(p, "stem", stem_.params());
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    append_params(p, "blocks." + std::to_string(i) + ".conv1", blocks_[i].conv1.params());
    append_params(p, "blocks." + std::to_string(i) + ".conv2", blocks_[i].conv2.params());
  }
  return p;
}

Tensor project_spatial(const Tensor& f, const SpatialProjector& g, const ProjectionParams& p) {
  return project_vector(g.forward(f), p);
}

QueryTokens::QueryTokens(int k, int d_prime, Rng& rng) {
  if (k < 1) throw ValidationError("query count K must be at least 1");
  q = Tensor(rng.normal_matrix(k, d_prime, 0.02f), true);
}

void AlignmentConfig::validate() const {
  if (hidden < 1 || layers < 0 || heads < 1) throw ValidationError("alignment: bad hidden/layer/head counts");
  if (hidden % heads != 0) {
    throw ValidationError("alignment hidden size " + std::to_string(hidden) + " is not divisible by " +
                          std::to_string(heads) + " heads");
  }
  if (cross_attention_freq < 1) throw ValidationError("alignment: cross_attention_freq must be >= 1");
}

std::string to_string(AlignMode m) {
  return m == AlignMode::kTrainWithText ? "train_with_text" : "inference_features_only";
}

AlignMode parse_align_mode(std::string_view s) {
  if (s == "train_with_text") return AlignMode::kTrainWithText;
  if (s == "inference_features_only") return AlignMode::kInferenceFeaturesOnly;
  throw ValidationError("unknown alignment mode '" + std::string(s) + "'");
}

AlignmentTransformer::AlignmentTransformer(const AlignmentConfig& cfg, int d_prime, Rng& rng)
    : cfg_(cfg), d_prime_(d_prime) {
  cfg_.validate();
  const int h = cfg_.hidden;
  const int inter = cfg_.intermediate > 0 ? cfg_.intermediate : 4 * h;
  const auto lin = [&](int in, int out) { return nn::Linear(in, out, true, rng, nn::Init::kNormal002); };
  if (d_prime != h) query_proj_ = lin(d_prime, h);
  query_ln_ = nn::LayerNorm(h, cfg_.ln_eps);
  if (cfg_.text_vocab > 0) {
    word_embeddings_ = Tensor(rng.normal_matrix(cfg_.text_vocab, h, 0.02f), true);
    position_embeddings_ = Tensor(rng.normal_matrix(cfg_.max_text_length, h, 0.02f), true);
    text_ln_ = nn::LayerNorm(h, cfg_.ln_eps);
  }
  for (int i = 0; i < cfg_.layers; ++i) {
    Layer l;
    l.q = lin(h, h);
    l.k = lin(h, h);
    l.v = lin(h, h);
    l.attn_out = lin(h, h);
    l.attn_ln = nn::LayerNorm(h, cfg_.ln_eps);
    l.has_cross = i % cfg_.cross_attention_freq == 0;
    if (l.has_cross) {
      l.cq = lin(h, h);
      l.ck = lin(d_prime, h);
      l.cv = lin(d_prime, h);
      l.cross_out = lin(h, h);
      l.cross_ln = nn::LayerNorm(h, cfg_.ln_eps);
    }
    l.ffn_in_q = lin(h, inter);
    l.ffn_out_q = lin(inter, h);
    l.ffn_ln_q = nn::LayerNorm(h, cfg_.ln_eps);
    if (cfg_.text_vocab > 0) {
      l.ffn_in_t = lin(h, inter);
      l.ffn_out_t = lin(inter, h);
      l.ffn_ln_t = nn::LayerNorm(h, cfg_.ln_eps);
    }
    layers_.push_back(std::move(l));
  }
}

void AlignmentTransformer::set_config(const AlignmentConfig& cfg) {
  if (cfg.hidden != cfg_.hidden || cfg.layers != cfg_.layers || cfg.heads != cfg_.heads ||
      cfg.text_vocab != cfg_.text_vocab) {
    throw ValidationError("alignment: only mode and strictness may change after construction");
  }
  cfg_ = cfg;
}

Tensor AlignmentTransformer::embed_text(std::span<const int> ids) const {
  const auto n = std::min<std::size_t>(ids.size(), static_cast<std::size_t>(cfg_.max_text_length));
  for (std::size_t i = 0; i < n; ++i) {
    if (ids[i] < 0 || ids[i] >= cfg_.text_vocab) throw ValidationError("alignment: text token id out of range");
  }
  std::vector<int> pos(n);
  for (std::size_t i = 0; i < n; ++i) pos[i] = static_cast<int>(i);
  Tensor w = ops::gather_rows(word_embeddings_, ids.first(n));
  return text_ln_.forward(ops::add(w, ops::gather_rows(position_embeddings_, pos)));
}

Tensor AlignmentTransformer::forward(const QueryTokens& q, const Tensor& features, std::span<const int> text) const {
  if (features.cols() != d_prime_) {
    throw ShapeError("alignment: features have width " + std::to_string(features.cols()) + ", expected " +
                     std::to_string(d_prime_));
  }
  if (q.q.cols() != d_prime_) throw ShapeError("alignment: query width does not match d'");
  const bool use_text = cfg_.mode == AlignMode::kTrainWithText && !text.empty() && cfg_.text_vocab > 0;
  if (cfg_.mode == AlignMode::kInferenceFeaturesOnly && !text.empty() && cfg_.strict) {
    throw ValidationError("alignment: text supplied in inference_features_only mode");
  }
  const Index k = q.q.rows();
  Tensor x = query_ln_.forward(query_proj_ ? query_proj_->forward(q.q) : q.q);
  Tensor t;
  Matrix mask;
  if (use_text) {
    t = embed_text(text);
    const Index l = t.rows();
    // Queries see queries only; text sees all queries and earlier text.
    mask = Matrix::Zero(k + l, k + l);
    mask.topRightCorner(k, l).setConstant(-1e9f);
    mask.bottomRightCorner(l, l) = nn::causal_mask(l);
  }
  const int heads = cfg_.heads;
  for (const auto& layer : layers_) {
    Tensor all = use_text ? ops::concat_rows({x, t}) : x;
    Tensor a = nn::attention(layer.q.forward(all), layer.k.forward(all), layer.v.forward(all), heads,
                             use_text ? &mask : nullptr);
    all = layer.attn_ln.forward(ops::add(all, layer.attn_out.forward(a)));
    x = use_text ? ops::slice_rows(all, 0, k) : all;
    if (use_text) t = ops::slice_rows(all, k, all.rows() - k);
    if (layer.has_cross) {
      Tensor c = nn::attention(layer.cq.forward(x), layer.ck.forward(features), layer.cv.forward(features), heads,
                               nullptr);
      x = layer.cross_ln.forward(ops::add(x, layer.cross_out.forward(c)));
    }
    x = layer.ffn_ln_q.forward(ops::add(x, layer.ffn_out_q.forward(ops::gelu(layer.ffn_in_q.forward(x)))));
    if (use_text) {
      t = layer.ffn_ln_t.forward(ops::add(t, layer.ffn_out_t.forward(ops::gelu(layer.ffn_in_t.forward(t)))));
    }
  }
  return x;
}

NamedParams AlignmentTransformer::params() const {
  NamedParams p;
  if (query_proj_) append_params(p, "query_proj", query_proj_->params());
  append_params(p, "layernorm", query_ln_.params());
  if (cfg_.text_vocab > 0) {
    p.emplace_back("embeddings.word_embeddings.weight", word_embeddings_);
    p.emplace_back("embeddings.position_embeddings.weight", position_embeddings_);
    append_params(p, "embeddings.LayerNorm", text_ln_.params());
  }
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& l = layers_[i];
    const std::string pre = "encoder.layer." + std::to_string(i) + ".";
    append_params(p, pre + "attention.attention.query", l.q.params());
    append_params(p, pre + "attention.attention.key", l.k.params());
    append_params(p, pre + "attention.attention.value", l.v.params());
    append_params(p, pre + "attention.output.dense", l.attn_out.params());
    append_params(p, pre + "attention.output.LayerNorm", l.attn_ln.params());
    if (l.has_cross) {
      append_params(p, pre + "crossattention.attention.query", l.cq.params());
      append_params(p, pre + "crossattention.attention.key", l.ck.params());
      append_params(p, pre + "crossattention.attention.value", l.cv.params());
      append_params(p, pre + "crossattention.output.dense", l.cross_out.params());
      append_params(p, pre + "crossattention.output.LayerNorm", l.cross_ln.params());
    }
    append_params(p, pre + "intermediate_query.dense", l.ffn_in_q.params());
    append_params(p, pre + "output_query.dense", l.ffn_out_q.params());
    append_params(p, pre + "output_query.LayerNorm", l.ffn_ln_q.params());
    if (cfg_.text_vocab > 0) {
      append_params(p, pre + "intermediate.dense", l.ffn_in_t.params());
      append_params(p, pre + "output.dense", l.ffn_out_t.params());
      append_params(p, pre + "output.LayerNorm", l.ffn_ln_t.params());
    }
  }
  return p;
}

Tensor align(const QueryTokens& q, const Tensor& f_proj, std::span<const int> text, const AlignmentTransformer& t) {
  return t.forward(q, f_proj, text);
}

LMBridge::LMBridge(int d_double_prime, int d_lm, Rng& rng) : w(d_double_prime, d_lm, false, rng) {}

LMBridge LMBridge::from_matrix(const Matrix& w_l) {
  LMBridge b;
  b.w.weight = Tensor(w_l, true);
  return b;
}

Tensor to_lm_space(const Tensor& z, const LMBridge& bridge) {
  if (z.cols() != bridge.w.in_features()) {
    throw ShapeError("to_lm_space: Z has width " + std::to_string(z.cols()) + ", bridge expects " +
                     std::to_string(bridge.w.in_features()));
  }
  return bridge.w.forward(z);
}

std::string to_string(AttackTask t) { return t == AttackTask::kCaption ? "caption" : "label"; }

AttackTask parse_task(std::string_view s) {
  if (s == "caption") return AttackTask::kCaption;
  if (s == "label") return AttackTask::kLabel;
  throw ValidationError("unknown task '" + std::string(s) + "'");
}

void InversionConfig::validate() const {
  if (input_shape.size() != 1 && input_shape.size() != 3) {
    throw ShapeError("inversion model input must be {d} or {C,H,W}, got " + shape_string(input_shape));
  }
  if (d_prime < 1 || num_queries < 1) throw ValidationError("d' and K must be positive");
  if (task == AttackTask::kCaption && d_lm < 1) throw ValidationError("caption task needs the LM width d_LM");
  if (task == AttackTask::kLabel && num_classes < 2) throw ValidationError("label task needs at least 2 classes");
  alignment.validate();
}

InversionModel::InversionModel(InversionConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  Rng rng(cfg_.seed);
  int d = 0;
  if (is_spatial()) {
    spatial_.emplace(SpatialProjectorConfig{cfg_.input_shape, cfg_.spatial_channels, cfg_.spatial_blocks}, rng);
    d = spatial_->output_dim();
  } else {
    d = static_cast<int>(cfg_.input_shape[0]);
  }
  projection_ = ProjectionParams(d, cfg_.d_prime, rng);
  Rng align_rng(splitmix64(cfg_.seed ^ 0xA11CEull));
  if (uses_alignment()) {
    queries_ = QueryTokens(cfg_.num_queries, cfg_.d_prime, align_rng);
    alignment_ = AlignmentTransformer(cfg_.alignment, cfg_.d_prime, align_rng);
  }
  if (cfg_.task == AttackTask::kCaption) {
    bridge_ = LMBridge(cfg_.alignment.hidden, cfg_.d_lm, align_rng);
  } else {
    const int in = cfg_.label_input == LabelInput::kProjected ? cfg_.d_prime : cfg_.alignment.hidden;
    classifier_ = nn::Linear(in, cfg_.num_classes, true, align_rng);
  }
}

bool InversionModel::uses_alignment() const {
  return cfg_.task == AttackTask::kCaption || cfg_.label_input == LabelInput::kPooledAligned;
}

Tensor InversionModel::project(const Tensor& f) const {
  if (is_spatial()) return project_spatial(f, *spatial_, projection_);
  Tensor row = f;
  if (f.rows() != 1) row = ops::reshape(f, 1, f.size());
  return project_vector(row, projection_);
}

Tensor InversionModel::align(const Tensor& f_proj, std::span<const int> text) const {
  if (!uses_alignment()) throw ValidationError("this model has no alignment stage");
  return alignment_.forward(queries_, f_proj, text);
}

Tensor InversionModel::lm_prefix(const Tensor& f, std::span<const int> text) const {
  if (cfg_.task != AttackTask::kCaption) throw ValidationError("lm_prefix requires a caption model");
  return to_lm_space(align(project(f), text), bridge_);
}

Tensor InversionModel::class_logits(const Tensor& f) const {
  if (cfg_.task != AttackTask::kLabel) throw ValidationError("class_logits requires a label model");
  Tensor x = project(f);
  if (cfg_.label_input == LabelInput::kPooledAligned) x = ops::mean_rows(align(x));
  return classifier_.forward(x);
}

void InversionModel::set_mode(AlignMode m) {
  cfg_.alignment.mode = m;
  if (uses_alignment()) alignment_.set_config(cfg_.alignment);
}

NamedParams InversionModel::params() const {
  NamedParams p;
  if (spatial_) append_params(p, "spatial", spatial_->params());
  append_params(p, "projection", projection_.params());
  if (uses_alignment()) {
    p.emplace_back("queries.query_tokens", queries_.q);
    append_params(p, "alignment", alignment_.params());
  }
  if (cfg_.task == AttackTask::kCaption) {
    append_params(p, "bridge", bridge_.params());
  } else {
    append_params(p, "classifier", classifier_.params());
  }
  return p;
}

void InversionModel::load(const TensorMap& src) { load_params(params(), src, true); }

std::vector<std::string> InversionModel::load_pretrained_alignment(const TensorMap& src) {
  if (!uses_alignment()) throw ValidationError("this model has no alignment stage");
  TensorMap mapped;
  for (const auto& [key, t] : src) {
    std::string k = key.starts_with("qformer.") ? key.substr(8) : key;
    if (k == "query_tokens") {
      HostTensor q = t;
      if (q.shape.size() == 3 && q.shape[0] == 1) q.shape.erase(q.shape.begin());
      mapped["queries.query_tokens"] = std::move(q);
    } else {
      mapped["alignment." + k] = t;
    }
  }
  NamedParams targets;
  targets.emplace_back("queries.query_tokens", queries_.q);
  append_params(targets, "alignment", alignment_.params());
  return load_params(targets, mapped, false);
}

json to_json(const InversionConfig& c) {
  const auto& a = c.alignment;
  return json{
      {"task", to_string(c.task)},
      {"encoder_id", c.encoder_id},
      {"layer_name", c.layer_name},
      {"input_shape", c.input_shape},
      {"d_prime", c.d_prime},
      {"num_queries", c.num_queries},
      {"spatial_channels", c.spatial_channels},
      {"spatial_blocks", c.spatial_blocks},
      {"alignment",
       {{"hidden", a.hidden},
        {"layers", a.layers},
        {"heads", a.heads},
        {"intermediate", a.intermediate},
        {"cross_attention_freq", a.cross_attention_freq},
        {"text_vocab", a.text_vocab},
        {"max_text_length", a.max_text_length},
        {"mode", to_string(a.mode)},
        {"strict", a.strict},
        {"ln_eps", a.ln_eps}}},
      {"d_lm", c.d_lm},
      {"num_classes", c.num_classes},
      {"label_input", c.label_input == LabelInput::kProjected ? "projected" : "pooled_aligned"},
      {"seed", c.seed},
  };
}

InversionConfig inversion_config_from_json(const json& j) {
  InversionConfig c;
  c.task = parse_task(j.at("task").get<std::string>());
  c.encoder_id = j.value("encoder_id", "");
  c.layer_name = j.value("layer_name", "");
  c.input_shape = j.at("input_shape").get<TapShape>();
  c.d_prime = j.at("d_prime");
  c.num_queries = j.at("num_queries");
  c.spatial_channels = j.value("spatial_channels", 64);
  c.spatial_blocks = j.value("spatial_blocks", 2);
  const auto& a = j.at("alignment");
  c.alignment.hidden = a.at("hidden");
  c.alignment.layers = a.at("layers");
  c.alignment.heads = a.at("heads");
  c.alignment.intermediate = a.value("intermediate", 0);
  c.alignment.cross_attention_freq = a.value("cross_attention_freq", 1);
  c.alignment.text_vocab = a.value("text_vocab", 0);
  c.alignment.max_text_length = a.value("max_text_length", 64);
  c.alignment.mode = parse_align_mode(a.value("mode", "inference_features_only"));
  c.alignment.strict = a.value("strict", false);
  c.alignment.ln_eps = a.value("ln_eps", 1e-12f);
  c.d_lm = j.value("d_lm", 0);
  c.num_classes = j.value("num_classes", 0);
  const std::string li = j.value("label_input", "projected");
  if (li != "projected" && li != "pooled_aligned") throw ValidationError("unknown label_input '" + li + "'");
  c.label_input = li == "projected" ? LabelInput::kProjected : LabelInput::kPooledAligned;
  c.seed = j.value("seed", std::uint64_t{0});
  return c;
}

void save_model(const InversionModel& model, const std::filesystem::path& dir, const json& extra) {
  std::filesystem::create_directories(dir);
  json meta = extra.is_object() ? extra : json::object();
  meta["format"] = "featinv-checkpoint";
  meta["version"] = kCheckpointVersion;
  meta["config"] = to_json(model.config());
  {
    std::ofstream f(dir / "meta.json");
    f << meta.dump(2) << "\n";
    if (!f) throw Error("failed writing " + (dir / "meta.json").string());
  }
  write_safetensors(dir / "model.safetensors", to_tensor_map(model.params()));
}

InversionModel load_model(const std::filesystem::path& dir, json* meta_out) {
  std::ifstream f(dir / "meta.json");
  if (!f) throw Error("no checkpoint metadata in " + dir.string());
  json meta;
  try {
    meta = json::parse(f);
  } catch (const json::exception& e) {
    throw FormatError((dir / "meta.json").string() + ": " + e.what());
  }
  if (meta.value("format", "") != "featinv-checkpoint") throw FormatError(dir.string() + " is not a checkpoint");
  const int version = meta.value("version", -1);
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " in " + dir.string());
  }
  InversionModel model(inversion_config_from_json(meta.at("config")));
  model.load(read_safetensors(dir / "model.safetensors"));
  if (meta_out) *meta_out = std::move(meta);
  return model;
}

}  // namespace featinv
