// Copyright 2026 The featinv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "featinv/encoders.hpp"
#include "json.hpp"
#include "featinv/nn.hpp"
#include "featinv/safetensors.hpp"

namespace featinv {

/// Affine map from an encoder feature of width d into the unified space d'.
struct ProjectionParams {
  nn::Linear affine;  // weight [d', d], bias [1, d']

  ProjectionParams() = default;
  ProjectionParams(int d, int d_prime, Rng& rng);
  /// Wraps explicit W_p [d', d] and b_p [d'].
  static ProjectionParams from_matrices(const Matrix& w, const Matrix& b);

  int d() const { return affine.in_features(); }
  int d_prime() const { return affine.out_features(); }
  NamedParams params() const { return affine.params(); }
};

/// F [1, d] -> W_p F + b_p as a [1, d'] row.
Tensor project_vector(const Tensor& f, const ProjectionParams& p);

struct SpatialProjectorConfig {
  TapShape input_shape;  // {C, H, W}
  int channels = 64;
  int blocks = 2;
};

/// g(.): patchifying stem to `channels`, residual 3x3 conv blocks, global
/// average pooling. The stem stride brings the grid down to at most 14x14.
class SpatialProjector {
 public:
  SpatialProjector() = default;
  SpatialProjector(SpatialProjectorConfig cfg, Rng& rng);

  const SpatialProjectorConfig& config() const { return cfg_; }
  int output_dim() const { return cfg_.channels; }
  int stem_stride() const { return stem_.geometry.stride; }
  bool accepts(const Tensor& f) const;

  /// [C, H*W] map -> pooled [1, channels] row.
  Tensor forward(const Tensor& f) const;
  NamedParams params() const;

 private:
  struct Block {
    nn::Conv2d conv1, conv2;
  };
  SpatialProjectorConfig cfg_;
  nn::Conv2d stem_;
  std::vector<Block> blocks_;
};

/// W_p g(F) + b_p.
Tensor project_spatial(const Tensor& f, const SpatialProjector& g, const ProjectionParams& p);

struct QueryTokens {
  Tensor q;  // [K, d']

  QueryTokens() = default;
  QueryTokens(int k, int d_prime, Rng& rng);
  int count() const { return static_cast<int>(q.rows()); }
};

enum class AlignMode { kTrainWithText, kInferenceFeaturesOnly };

struct AlignmentConfig {
  int hidden = 768;  // d''
  int layers = 2;
  int heads = 12;
  int intermediate = 0;  // 0 means 4 * hidden
  int cross_attention_freq = 1;
  /// Text vocabulary for the train-mode text branch; 0 disables it.
  int text_vocab = 0;
  int max_text_length = 64;
  AlignMode mode = AlignMode::kInferenceFeaturesOnly;
  /// Reject text passed in inference mode instead of ignoring it.
  bool strict = false;
  float ln_eps = 1e-12f;

  void validate() const;
};

std::string to_string(AlignMode m);
AlignMode parse_align_mode(std::string_view s);

/// Query-token transformer in the BERT/Q-Former layout: self-attention over
/// the queries (plus text rows in train mode), cross-attention from queries
/// to the projected features, separate feed-forward paths for queries and
/// text. Queries never attend to text rows.
class AlignmentTransformer {
 public:
  AlignmentTransformer() = default;
  AlignmentTransformer(const AlignmentConfig& cfg, int d_prime, Rng& rng);

  const AlignmentConfig& config() const { return cfg_; }
  void set_config(const AlignmentConfig& cfg);
  int hidden() const { return cfg_.hidden; }

  /// Q [K, d'], features [n, d'] (n = 1 for a projected vector), optional
  /// text token ids. Returns Z [K, d''].
  Tensor forward(const QueryTokens& q, const Tensor& features, std::span<const int> text = {}) const;
  NamedParams params() const;

 private:
  struct Layer {
    nn::Linear q, k, v, attn_out, cq, ck, cv, cross_out, ffn_in_q, ffn_out_q, ffn_in_t, ffn_out_t;
    nn::LayerNorm attn_ln, cross_ln, ffn_ln_q, ffn_ln_t;
    bool has_cross = false;
  };

  Tensor embed_text(std::span<const int> ids) const;

  AlignmentConfig cfg_;
  int d_prime_ = 0;
  std::optional<nn::Linear> query_proj_;
  nn::LayerNorm query_ln_;
  Tensor word_embeddings_, position_embeddings_;
  nn::LayerNorm text_ln_;
  std::vector<Layer> layers_;
};

/// Z = align(Q, F_proj, text). `text` is used only in train-with-text mode.
Tensor align(const QueryTokens& q, const Tensor& f_proj, std::span<const int> text, const AlignmentTransformer& t);

struct LMBridge {
  nn::Linear w;  // [d_LM, d''], no bias

  LMBridge() = default;
  LMBridge(int d_double_prime, int d_lm, Rng& rng);
  static LMBridge from_matrix(const Matrix& w_l);
  int d_lm() const { return w.out_features(); }
  NamedParams params() const { return w.params(); }
};

/// E = Z W_l^T, [K, d_LM].
Tensor to_lm_space(const Tensor& z, const LMBridge& bridge);

enum class AttackTask { kCaption, kLabel };
enum class LabelInput { kProjected, kPooledAligned };

std::string to_string(AttackTask t);
AttackTask parse_task(std::string_view s);

struct InversionConfig {
  AttackTask task = AttackTask::kCaption;
  std::string encoder_id;
  std::string layer_name;
  TapShape input_shape;  // {d} or {C, H, W}
  int d_prime = 1024;
  int num_queries = 32;
  int spatial_channels = 64;
  int spatial_blocks = 2;
  AlignmentConfig alignment;
  int d_lm = 0;           // caption task
  int num_classes = 0;    // label task
  LabelInput label_input = LabelInput::kProjected;
  std::uint64_t seed = 0;

  void validate() const;
};

/// The attacker model: projection, query tokens, alignment, bridge, plus a
/// linear classifier for the label task.
class InversionModel {
 public:
  explicit InversionModel(InversionConfig cfg);

  const InversionConfig& config() const { return cfg_; }
  bool is_spatial() const { return cfg_.input_shape.size() == 3; }

  /// Feature -> F_proj [1, d'].
  Tensor project(const Tensor& f) const;
  Tensor align(const Tensor& f_proj, std::span<const int> text = {}) const;
  /// Feature -> E [K, d_LM].
  Tensor lm_prefix(const Tensor& f, std::span<const int> text = {}) const;
  /// Feature -> logits [1, num_classes].
  Tensor class_logits(const Tensor& f) const;

  void set_mode(AlignMode m);

  /// Trainable parameters of the components used by the configured task.
  NamedParams params() const;
  void load(const TensorMap& src);
  /// Loads Q-Former-layout weights (optionally under "qformer.") into the
  /// query tokens and alignment stage wherever shapes match. Returns the
  /// names that were loaded.
  std::vector<std::string> load_pretrained_alignment(const TensorMap& src);

  const ProjectionParams& projection() const { return projection_; }
  const AlignmentTransformer& alignment() const { return alignment_; }
  const QueryTokens& queries() const { return queries_; }
  const LMBridge& bridge() const { return bridge_; }
  const nn::Linear& classifier() const { return classifier_; }
  bool uses_alignment() const;

 private:
  InversionConfig cfg_;
  std::optional<SpatialProjector> spatial_;
  ProjectionParams projection_;
  QueryTokens queries_;
  AlignmentTransformer alignment_;
  LMBridge bridge_;
  nn::Linear classifier_;
};

inline constexpr int kCheckpointVersion = 1;

nlohmann::json to_json(const InversionConfig& cfg);
InversionConfig inversion_config_from_json(const nlohmann::json& j);

/// Writes meta.json (version, config, `extra`) and model.safetensors.
void save_model(const InversionModel& model, const std::filesystem::path& dir, const nlohmann::json& extra = {});
/// Loads a checkpoint directory; rejects unknown versions. `meta` receives
/// the full metadata document.
InversionModel load_model(const std::filesystem::path& dir, nlohmann::json* meta = nullptr);

}  // namespace featinv
