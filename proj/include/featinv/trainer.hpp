// Copyright 2026 The featinv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "featinv/caption_head.hpp"
#include "featinv/inversion_core.hpp"
#include "json.hpp"

namespace featinv {

enum class OptimizerKind { kAdam, kAdamW };

std::string to_string(OptimizerKind k);
OptimizerKind parse_optimizer(std::string_view s);

/// Component names accepted in TrainConfig::frozen_components.
inline const std::set<std::string> kComponents{"lm",      "spatial", "projection", "queries",
                                               "alignment", "bridge", "classifier"};

struct TrainConfig {
  AttackTask task = AttackTask::kCaption;
  double learning_rate = 5e-5;
  int epochs = 6;
  int train_batch = 16;
  int eval_batch = 8;
  OptimizerKind optimizer = OptimizerKind::kAdamW;
  std::uint64_t seed = 0;
  std::set<std::string> frozen_components{"lm"};
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  /// Global gradient-norm clip; 0 disables.
  double grad_clip = 1.0;
  std::string prompt;
  bool shuffle = true;

  /// Caption: AdamW 5e-5, 6 epochs, batches 16/8. Label: Adam 5e-4,
  /// 5 epochs, batches 64/16.
  static TrainConfig defaults(AttackTask task);
  void validate() const;

  /// `key = value` lines; '#' starts a comment.
  std::string to_text() const;
  nlohmann::json to_json() const;
  /// Applies `key = value` overrides on top of `base`.
  static TrainConfig parse_text(std::string_view text, TrainConfig base);
  static TrainConfig load(const std::filesystem::path& path, std::optional<AttackTask> task = std::nullopt);
  static TrainConfig from_json(const nlohmann::json& j);
  /// Sets one field from its text form; throws ValidationError on unknown keys.
  void set(std::string_view key, std::string_view value);
};

/// Adam / AdamW (decoupled decay) over named parameters. Parameters without
/// a gradient are skipped for that step.
class Optimizer {
 public:
  Optimizer(NamedParams params, OptimizerKind kind, double lr, double beta1, double beta2, double eps,
            double weight_decay);

  void zero_grad();
  /// Rescales gradients so their global L2 norm is at most `max_norm`.
  /// Returns the norm before clipping.
  double clip_grad_norm(double max_norm);
  void step();

  std::int64_t steps() const { return step_; }
  TensorMap state() const;
  void load_state(const TensorMap& state, std::int64_t steps);

 private:
  NamedParams params_;
  OptimizerKind kind_;
  double lr_, b1_, b2_, eps_, wd_;
  std::int64_t step_ = 0;
  std::vector<Matrix> m_, v_;
};

struct CaptionLossItem {
  Tensor e;  // [K, d_LM]
  const CaptionSequence* reference = nullptr;
};

/// -(1/N) sum_i sum_t log P(c*_{i,t} | c*_{i,<t}, E_i, prompt), teacher forced.
Tensor caption_loss(const LanguageModel& lm, std::span<const CaptionLossItem> batch, std::string_view prompt = {});

/// Mean cross-entropy of [1, C] logit rows against labels.
Tensor label_loss(std::span<const Tensor> logits, std::span<const int> labels);

struct TrainItem {
  std::string image_id;
  Tensor feature;
  /// Caption task; every reference is a separate training example.
  std::vector<CaptionSequence> references;
  int label = -1;
};

struct TrainData {
  std::vector<TrainItem> train;
  std::vector<TrainItem> eval;
};

struct LossReport {
  std::vector<double> epoch_loss;
  std::vector<double> eval_loss;
  /// Label task only: train top-1 percent per epoch.
  std::vector<double> train_top1;
  std::vector<double> step_loss;
  double wall_seconds = 0;
  int best_epoch = -1;
  int start_epoch = 0;

  nlohmann::json to_json() const;
};

struct TrainOptions {
  /// Checkpoints go to `out_dir/last` and `out_dir/best`; empty disables them.
  std::filesystem::path out_dir;
  /// Continue from `out_dir/last` when it exists.
  bool resume = false;
  /// Extra metadata stored with every checkpoint.
  nlohmann::json extra;
  std::function<void(int epoch, double train_loss, double eval_loss)> on_epoch;
};

/// Optimizes the non-frozen attack parameters. The LM (caption task) is
/// frozen and its parameter hash is verified at the end. Throws
/// NumericError on a non-finite loss.
LossReport train(InversionModel& model, const LanguageModel* lm, const TrainData& data, const TrainConfig& cfg,
                 const TrainOptions& options = {});

/// Evaluation loss over `items` without gradient recording.
double evaluate_loss(const InversionModel& model, const LanguageModel* lm, std::span<const TrainItem> items,
                     const TrainConfig& cfg);

struct LMPretrainConfig {
  int epochs = 20;
  int batch = 16;
  double learning_rate = 3e-3;
  std::uint64_t seed = 0;
  double grad_clip = 1.0;
};

/// Next-token pretraining of a TransformerLM on plain captions (no prefix).
/// Returns the mean loss per epoch.
std::vector<double> pretrain_lm(TransformerLM& lm, std::span<const std::string> captions, const LMPretrainConfig& cfg);

}  // namespace featinv
