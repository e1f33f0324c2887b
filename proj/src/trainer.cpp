// Copyright 2026 The featinv Authors
// SPDX-License-Identifier: Apache-2.0

#include "featinv/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>

#include "featinv/error.hpp"
#include "featinv/rng.hpp"
#include "featinv/safetensors.hpp"
#include "featinv/text.hpp"

namespace featinv {

using nlohmann::json;

std::string to_string(OptimizerKind k) { return k == OptimizerKind::kAdam ? "adam" : "adamw"; }

OptimizerKind parse_optimizer(std::string_view s) {
  if (s == "adam") return OptimizerKind::kAdam;
  if (s == "adamw") return OptimizerKind::kAdamW;
  throw ValidationError("unknown optimizer '" + std::string(s) + "' (expected adam or adamw)");
}

// ---------------------------------------------------------------- config

TrainConfig TrainConfig::defaults(AttackTask task) {
  TrainConfig c;
  c.task = task;
  if (task == AttackTask::kLabel) {
    c.learning_rate = 5e-4;
    c.epochs = 5;
    c.train_batch = 64;
    c.eval_batch = 16;
    c.optimizer = OptimizerKind::kAdam;
  }
  return c;
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0) || !std::isfinite(learning_rate)) throw ValidationError("learning_rate must be positive");
  if (epochs < 0) throw ValidationError("epochs must be >= 0");
  if (train_batch < 1 || eval_batch < 1) throw ValidationError("batch sizes must be >= 1");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ValidationError("betas must be in [0, 1)");
  if (!(adam_eps > 0)) throw ValidationError("adam_eps must be positive");
  if (!(grad_clip >= 0) || !(weight_decay >= 0)) throw ValidationError("grad_clip and weight_decay must be >= 0");
  for (const auto& c : frozen_components) {
    if (!kComponents.contains(c)) throw ValidationError("unknown component '" + c + "' in frozen_components");
  }
  if (task == AttackTask::kCaption && !frozen_components.contains("lm")) {
    throw ValidationError("the language model must stay frozen for the caption task");
  }
}

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

double parse_double(std::string_view key, std::string_view v) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(std::string(v), &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return d;
  } catch (const std::exception&) {
    throw ValidationError("bad number for " + std::string(key) + ": '" + std::string(v) + "'");
  }
}

std::int64_t parse_int(std::string_view key, std::string_view v) {
  const double d = parse_double(key, v);
  if (d != std::floor(d)) throw ValidationError("expected an integer for " + std::string(key));
  return static_cast<std::int64_t>(d);
}

bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ValidationError("bad boolean for " + std::string(key) + ": '" + std::string(v) + "'");
}

std::vector<std::pair<std::string, std::string>> parse_pairs(std::string_view text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ValidationError("config line " + std::to_string(lineno) + ": expected key = value");
    out.emplace_back(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
  return out;
}

}  // namespace

void TrainConfig::set(std::string_view key, std::string_view v) {
  if (key == "task") {
    task = parse_task(v);
  } else if (key == "learning_rate" || key == "lr") {
    learning_rate = parse_double(key, v);
  } else if (key == "epochs") {
    epochs = static_cast<int>(parse_int(key, v));
  } else if (key == "train_batch") {
    train_batch = static_cast<int>(parse_int(key, v));
  } else if (key == "eval_batch") {
    eval_batch = static_cast<int>(parse_int(key, v));
  } else if (key == "optimizer") {
    optimizer = parse_optimizer(v);
  } else if (key == "seed") {
    seed = static_cast<std::uint64_t>(parse_int(key, v));
  } else if (key == "frozen_components") {
    frozen_components.clear();
    std::string item;
    std::istringstream in{std::string(v)};
    while (std::getline(in, item, ',')) {
      if (auto t = trim(item); !t.empty()) frozen_components.insert(t);
    }
  } else if (key == "weight_decay") {
    weight_decay = parse_double(key, v);
  } else if (key == "beta1") {
    beta1 = parse_double(key, v);
  } else if (key == "beta2") {
    beta2 = parse_double(key, v);
  } else if (key == "adam_eps") {
    adam_eps = parse_double(key, v);
  } else if (key == "grad_clip") {
    grad_clip = parse_double(key, v);
  } else if (key == "prompt") {
    prompt = std::string(v);
  } else if (key == "shuffle") {
    shuffle = parse_bool(key, v);
  } else {
    throw ValidationError("unknown training option '" + std::string(key) + "'");
  }
}

std::string TrainConfig::to_text() const {
  std::ostringstream o;
  o.precision(17);
  std::string frozen;
  for (const auto& c : frozen_components) frozen += (frozen.empty() ? "" : ",") + c;
  o << "task = " << to_string(task) << "\n"
    << "learning_rate = " << learning_rate << "\n"
    << "epochs = " << epochs << "\n"
    << "train_batch = " << train_batch << "\n"
    << "eval_batch = " << eval_batch << "\n"
    << "optimizer = " << to_string(optimizer) << "\n"
    << "seed = " << seed << "\n"
    << "frozen_components = " << frozen << "\n"
    << "weight_decay = " << weight_decay << "\n"
    << "beta1 = " << beta1 << "\n"
    << "beta2 = " << beta2 << "\n"
    << "adam_eps = " << adam_eps << "\n"
    << "grad_clip = " << grad_clip << "\n"
    << "prompt = " << prompt << "\n"
    << "shuffle = " << (shuffle ? "true" : "false") << "\n";
  return o.str();
}

TrainConfig TrainConfig::parse_text(std::string_view text, TrainConfig base) {
  for (const auto& [k, v] : parse_pairs(text)) base.set(k, v);
  base.validate();
  return base;
}

TrainConfig TrainConfig::load(const std::filesystem::path& path, std::optional<AttackTask> task) {
  std::ifstream f(path);
  if (!f) throw Error("cannot read training config " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  const auto pairs = parse_pairs(ss.str());
  AttackTask t = task.value_or(AttackTask::kCaption);
  for (const auto& [k, v] : pairs) {
    if (k == "task") t = parse_task(v);
  }
  TrainConfig c = defaults(t);
  for (const auto& [k, v] : pairs) c.set(k, v);
  c.validate();
  return c;
}

json TrainConfig::to_json() const {
  return {{"task", to_string(task)},
          {"learning_rate", learning_rate},
          {"epochs", epochs},
          {"train_batch", train_batch},
          {"eval_batch", eval_batch},
          {"optimizer", to_string(optimizer)},
          {"seed", seed},
          {"frozen_components", frozen_components},
          {"weight_decay", weight_decay},
          {"beta1", beta1},
          {"beta2", beta2},
          {"adam_eps", adam_eps},
          {"grad_clip", grad_clip},
          {"prompt", prompt},
          {"shuffle", shuffle}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c = defaults(parse_task(j.value("task", "caption")));
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.epochs = j.value("epochs", c.epochs);
  c.train_batch = j.value("train_batch", c.train_batch);
  c.eval_batch = j.value("eval_batch", c.eval_batch);
  if (j.contains("optimizer")) c.optimizer = parse_optimizer(j["optimizer"].get<std::string>());
  c.seed = j.value("seed", c.seed);
  if (j.contains("frozen_components")) c.frozen_components = j["frozen_components"].get<std::set<std::string>>();
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.adam_eps = j.value("adam_eps", c.adam_eps);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.prompt = j.value("prompt", c.prompt);
  c.shuffle = j.value("shuffle", c.shuffle);
  c.validate();
  return c;
}

// ------------------------------------------------------------- optimizer

Optimizer::Optimizer(NamedParams params, OptimizerKind kind, double lr, double beta1, double beta2, double eps,
                     double weight_decay)
    : params_(std::move(params)), kind_(kind), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps), wd_(weight_decay) {
  for (const auto& [n, t] : params_) {
    m_.push_back(Matrix::Zero(t.rows(), t.cols()));
    v_.push_back(Matrix::Zero(t.rows(), t.cols()));
  }
}

void Optimizer::zero_grad() {
  for (auto& [n, t] : params_) t.zero_grad();
}

double Optimizer::clip_grad_norm(double max_norm) {
  double sq = 0;
  for (const auto& [n, t] : params_) {
    if (t.has_grad()) sq += static_cast<double>(t.grad().squaredNorm());
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm && std::isfinite(norm)) {
    const float s = static_cast<float>(max_norm / (norm + 1e-6));
    for (auto& [n, t] : params_) {
      if (t.has_grad()) t.grad_mut() *= s;
    }
  }
  return norm;
}

void Optimizer::step() {
  ++step_;
  const double bc1 = 1.0 - std::pow(b1_, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(b2_, static_cast<double>(step_));
  const float step_size = static_cast<float>(lr_ / bc1);
  const float inv_bc2 = static_cast<float>(1.0 / bc2);
  const float b1 = static_cast<float>(b1_), b2 = static_cast<float>(b2_), eps = static_cast<float>(eps_);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& t = params_[i].second;
    if (!t.has_grad()) continue;
    Matrix g = t.grad();
    Matrix& w = t.value_mut();
    if (wd_ > 0) {
      if (kind_ == OptimizerKind::kAdamW) {
        w *= static_cast<float>(1.0 - lr_ * wd_);
      } else {
        g += static_cast<float>(wd_) * w;
      }
    }
    m_[i] = b1 * m_[i] + (1 - b1) * g;
    v_[i] = b2 * v_[i] + (1 - b2) * g.cwiseProduct(g);
    w.array() -= step_size * m_[i].array() / ((v_[i].array() * inv_bc2).sqrt() + eps);
  }
}

TensorMap Optimizer::state() const {
  TensorMap out;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    for (const auto& [prefix, mat] : {std::pair{"m.", &m_[i]}, std::pair{"v.", &v_[i]}}) {
      HostTensor h;
      h.shape = {mat->rows(), mat->cols()};
      h.data.assign(mat->data(), mat->data() + mat->size());
      out[prefix + params_[i].first] = std::move(h);
    }
  }
  return out;
}

void Optimizer::load_state(const TensorMap& state, std::int64_t steps) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    for (auto [prefix, mat] : {std::pair{"m.", &m_[i]}, std::pair{"v.", &v_[i]}}) {
      auto it = state.find(prefix + params_[i].first);
      if (it == state.end() || it->second.numel() != mat->size()) {
        throw FormatError("optimizer state missing or mismatched for " + params_[i].first);
      }
      std::copy(it->second.data.begin(), it->second.data.end(), mat->data());
    }
  }
  step_ = steps;
}

// ----------------------------------------------------------------- losses

Tensor caption_loss(const LanguageModel& lm, std::span<const CaptionLossItem> batch, std::string_view prompt) {
  if (batch.empty()) throw ValidationError("caption loss over an empty batch");
  const auto pids = prompt_ids(lm, prompt);
  std::vector<Tensor> terms;
  terms.reserve(batch.size());
  for (const auto& item : batch) {
    if (!item.reference || item.reference->token_ids.empty()) throw ValidationError("empty reference caption");
    const auto& ref = item.reference->token_ids;
    std::vector<int> inputs{lm.bos_id()};
    inputs.insert(inputs.end(), ref.begin(), ref.end() - 1);
    Tensor logits = lm.next_token_logits(build_prefix(lm, item.e, pids), inputs);
    terms.push_back(ops::cross_entropy_sum(logits, ref));
  }
  Tensor total = terms.size() == 1 ? terms[0] : ops::sum_all(ops::concat_rows(terms));
  return ops::scale(total, 1.0f / static_cast<float>(batch.size()));
}

Tensor label_loss(std::span<const Tensor> logits, std::span<const int> labels) {
  if (logits.empty() || logits.size() != labels.size()) throw ValidationError("label loss: batch size mismatch");
  Tensor all = logits.size() == 1 ? logits[0] : ops::concat_rows(std::vector<Tensor>(logits.begin(), logits.end()));
  return ops::scale(ops::cross_entropy_sum(all, labels), 1.0f / static_cast<float>(labels.size()));
}

json LossReport::to_json() const {
  return {{"epoch_loss", epoch_loss}, {"eval_loss", eval_loss},       {"train_top1", train_top1},
          {"step_loss", step_loss},   {"wall_seconds", wall_seconds}, {"best_epoch", best_epoch},
          {"start_epoch", start_epoch}};
}

// ---------------------------------------------------------------- training

namespace {

struct Example {
  std::size_t item;
  std::size_t ref;
};

std::vector<Example> expand(std::span<const TrainItem> items, AttackTask task) {
  std::vector<Example> out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (task == AttackTask::kCaption) {
      if (items[i].references.empty()) throw ValidationError("item " + items[i].image_id + " has no reference captions");
      for (std::size_t r = 0; r < items[i].references.size(); ++r) out.push_back({i, r});
    } else {
      if (items[i].label < 0) throw ValidationError("item " + items[i].image_id + " has no label");
      out.push_back({i, 0});
    }
  }
  return out;
}

std::string component_of(const std::string& param) { return param.substr(0, param.find('.')); }

Tensor batch_loss(const InversionModel& model, const LanguageModel* lm, std::span<const TrainItem> items,
                  std::span<const Example> batch, const TrainConfig& cfg, bool with_text) {
  if (cfg.task == AttackTask::kCaption) {
    std::vector<CaptionLossItem> li;
    li.reserve(batch.size());
    for (const auto& ex : batch) {
      const auto& it = items[ex.item];
      const auto& ref = it.references[ex.ref];
      std::span<const int> text = with_text ? std::span<const int>(ref.token_ids) : std::span<const int>{};
      li.push_back({model.lm_prefix(it.feature, text), &ref});
    }
    return caption_loss(*lm, li, cfg.prompt);
  }
  std::vector<Tensor> logits;
  std::vector<int> labels;
  for (const auto& ex : batch) {
    logits.push_back(model.class_logits(items[ex.item].feature));
    labels.push_back(items[ex.item].label);
  }
  return label_loss(logits, labels);
}

double mean_loss(const InversionModel& model, const LanguageModel* lm, std::span<const TrainItem> items,
                 const TrainConfig& cfg) {
  NoGradGuard ng;
  const auto ex = expand(items, cfg.task);
  double total = 0;
  for (std::size_t s = 0; s < ex.size(); s += static_cast<std::size_t>(cfg.eval_batch)) {
    const std::size_t n = std::min(ex.size() - s, static_cast<std::size_t>(cfg.eval_batch));
    total += static_cast<double>(batch_loss(model, lm, items, std::span(ex).subspan(s, n), cfg, false).value()(0, 0)) *
             static_cast<double>(n);
  }
  return total / static_cast<double>(ex.size());
}

double top1(const InversionModel& model, std::span<const TrainItem> items) {
  NoGradGuard ng;
  std::size_t hits = 0;
  for (const auto& it : items) {
    const Matrix l = model.class_logits(it.feature).value();
    Index best = 0;
    for (Index c = 1; c < l.cols(); ++c) {
      if (l(0, c) > l(0, best)) best = c;
    }
    hits += best == it.label;
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(items.size());
}

void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream f(p);
  f << s;
  if (!f) throw Error("failed writing " + p.string());
}

json read_json(const std::filesystem::path& p) {
  std::ifstream f(p);
  if (!f) throw Error("cannot read " + p.string());
  return json::parse(f);
}

}  // namespace

double evaluate_loss(const InversionModel& model, const LanguageModel* lm, std::span<const TrainItem> items,
                     const TrainConfig& cfg) {
  if (items.empty()) throw ValidationError("evaluation set is empty");
  return mean_loss(model, lm, items, cfg);
}

LossReport train(InversionModel& model, const LanguageModel* lm, const TrainData& data, const TrainConfig& cfg,
                 const TrainOptions& options) {
  cfg.validate();
  if (cfg.task != model.config().task) throw ValidationError("training task does not match the model task");
  if (data.train.empty()) throw ValidationError("training set is empty");
  if (cfg.task == AttackTask::kCaption) {
    if (!lm) throw ValidationError("caption training needs a language model");
    if (lm->embed_dim() != model.config().d_lm) {
      throw ShapeError("model bridges to width " + std::to_string(model.config().d_lm) + " but the LM embeds at " +
                       std::to_string(lm->embed_dim()));
    }
  }
  const auto examples = expand(data.train, cfg.task);
  if (!data.eval.empty()) expand(data.eval, cfg.task);

  // Freeze the LM and any requested attack components for the duration.
  std::vector<std::pair<Tensor, bool>> saved_flags;
  NamedParams lm_params = lm ? lm->params() : NamedParams{};
  for (auto& [n, t] : lm_params) {
    saved_flags.emplace_back(t, t.requires_grad());
    t.node()->requires_grad = false;
  }
  const std::uint64_t lm_hash = hash_params(lm_params);
  NamedParams trainable;
  for (auto& [n, t] : model.params()) {
    saved_flags.emplace_back(t, t.requires_grad());
    const bool frozen = cfg.frozen_components.contains(component_of(n));
    t.node()->requires_grad = !frozen;
    if (!frozen) trainable.emplace_back(n, t);
  }
  struct Restore {
    std::vector<std::pair<Tensor, bool>>& flags;
    ~Restore() {
      for (auto& [t, f] : flags) t.node()->requires_grad = f;
    }
  } restore{saved_flags};

  const AlignMode original_mode = model.config().alignment.mode;
  const bool with_text = model.uses_alignment() && model.config().alignment.text_vocab > 0 && cfg.task == AttackTask::kCaption;

  Optimizer opt(trainable, cfg.optimizer, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
  LossReport report;
  double best = std::numeric_limits<double>::infinity();
  const auto& out = options.out_dir;

  if (!out.empty()) {
    std::filesystem::create_directories(out);
    write_text(out / "train_config.txt", cfg.to_text());
    if (options.resume && std::filesystem::exists(out / "last" / "meta.json")) {
      const json meta = read_json(out / "last" / "meta.json");
      if (meta.at("config") != to_json(model.config())) {
        throw ValidationError("checkpoint in " + (out / "last").string() + " was made for a different model config");
      }
      model.load(read_safetensors(out / "last" / "model.safetensors"));
      opt.load_state(read_safetensors(out / "last" / "optimizer.safetensors"), meta.at("optimizer_steps").get<std::int64_t>());
      const json& r = meta.at("loss_report");
      report.epoch_loss = r.at("epoch_loss").get<std::vector<double>>();
      report.eval_loss = r.at("eval_loss").get<std::vector<double>>();
      report.train_top1 = r.at("train_top1").get<std::vector<double>>();
      report.step_loss = r.at("step_loss").get<std::vector<double>>();
      report.best_epoch = r.at("best_epoch").get<int>();
      report.start_epoch = meta.at("epoch").get<int>();
      best = meta.value("best_metric", best);
    }
  }

  const auto t0 = std::chrono::steady_clock::now();
  for (int epoch = report.start_epoch; epoch < cfg.epochs; ++epoch) {
    std::vector<Example> order = examples;
    if (cfg.shuffle) {
      Rng rng(splitmix64(cfg.seed ^ splitmix64(static_cast<std::uint64_t>(epoch) + 1)));
      shuffle(order, rng);
    }
    if (with_text) model.set_mode(AlignMode::kTrainWithText);
    double epoch_total = 0;
    for (std::size_t s = 0; s < order.size(); s += static_cast<std::size_t>(cfg.train_batch)) {
      const std::size_t n = std::min(order.size() - s, static_cast<std::size_t>(cfg.train_batch));
      const auto batch = std::span(order).subspan(s, n);
      opt.zero_grad();
      Tensor loss = batch_loss(model, lm, data.train, batch, cfg, with_text);
      const double lv = static_cast<double>(loss.value()(0, 0));
      if (!std::isfinite(lv)) {
        model.set_mode(original_mode);
        throw NumericError("non-finite loss " + std::to_string(lv) + " at epoch " + std::to_string(epoch + 1) +
                           ", step " + std::to_string(opt.steps() + 1) + " (first item " +
                           data.train[batch[0].item].image_id + ")");
      }
      loss.backward();
      const double gnorm = opt.clip_grad_norm(cfg.grad_clip);
      if (!std::isfinite(gnorm)) {
        model.set_mode(original_mode);
        throw NumericError("non-finite gradient norm at epoch " + std::to_string(epoch + 1) + ", step " +
                           std::to_string(opt.steps() + 1));
      }
      opt.step();
      report.step_loss.push_back(lv);
      epoch_total += lv * static_cast<double>(n);
    }
    model.set_mode(original_mode);
    const double train_loss = epoch_total / static_cast<double>(order.size());
    report.epoch_loss.push_back(train_loss);
    const double eval_loss = data.eval.empty() ? train_loss : mean_loss(model, lm, data.eval, cfg);
    report.eval_loss.push_back(eval_loss);
    if (cfg.task == AttackTask::kLabel) report.train_top1.push_back(top1(model, data.train));
    const bool improved = eval_loss < best;
    if (improved) {
      best = eval_loss;
      report.best_epoch = epoch + 1;
    }
    if (!out.empty()) {
      json extra = options.extra.is_object() ? options.extra : json::object();
      extra["epoch"] = epoch + 1;
      extra["train_loss"] = train_loss;
      extra["eval_loss"] = eval_loss;
      extra["best_metric"] = best;
      extra["optimizer_steps"] = opt.steps();
      extra["train_config"] = cfg.to_json();
      extra["loss_report"] = report.to_json();
      save_model(model, out / "last", extra);
      write_safetensors(out / "last" / "optimizer.safetensors", opt.state());
      if (improved) save_model(model, out / "best", extra);
    }
    if (options.on_epoch) options.on_epoch(epoch + 1, train_loss, eval_loss);
  }
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!out.empty()) write_text(out / "loss_report.json", report.to_json().dump(2) + "\n");
  if (hash_params(lm_params) != lm_hash) throw Error("language model parameters changed during training");
  return report;
}

std::vector<double> pretrain_lm(TransformerLM& lm, std::span<const std::string> captions, const LMPretrainConfig& cfg) {
  if (captions.empty()) throw ValidationError("no captions to pretrain on");
  if (cfg.epochs < 0 || cfg.batch < 1) throw ValidationError("bad pretraining schedule");
  std::vector<CaptionSequence> refs;
  for (const auto& c : captions) refs.push_back(make_reference(*lm.tokenizer(), c));
  NamedParams params = lm.params();
  for (auto& [n, t] : params) t.node()->requires_grad = true;
  Optimizer opt(params, OptimizerKind::kAdamW, cfg.learning_rate, 0.9, 0.999, 1e-8, 0.0);
  std::vector<std::size_t> order(refs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::vector<double> losses;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng(splitmix64(cfg.seed + static_cast<std::uint64_t>(epoch)));
    shuffle(order, rng);
    double total = 0;
    for (std::size_t s = 0; s < order.size(); s += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t n = std::min(order.size() - s, static_cast<std::size_t>(cfg.batch));
      std::vector<CaptionLossItem> batch;
      for (std::size_t k = 0; k < n; ++k) batch.push_back({Tensor(), &refs[order[s + k]]});
      opt.zero_grad();
      Tensor loss = caption_loss(lm, batch);
      const double lv = static_cast<double>(loss.value()(0, 0));
      if (!std::isfinite(lv)) throw NumericError("non-finite loss during language model pretraining");
      loss.backward();
      opt.clip_grad_norm(cfg.grad_clip);
      opt.step();
      total += lv * static_cast<double>(n);
    }
    losses.push_back(total / static_cast<double>(order.size()));
  }
  opt.zero_grad();
  return losses;
}

}  // namespace featinv
