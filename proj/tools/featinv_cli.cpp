// Copyright 2026 The featinv Authors
// SPDX-License-Identifier: Apache-2.0
//
// featinv: end-to-end command line for capture, training, attacks,
// reports and the noise defense.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "featinv/attack.hpp"
#include "featinv/datasets.hpp"
#include "featinv/defense.hpp"
#include "featinv/error.hpp"
#include "featinv/feature_capture.hpp"
#include "featinv/label_head.hpp"
#include "featinv/metrics.hpp"
#include "featinv/plots.hpp"
#include "featinv/trainer.hpp"
#include "featinv/version.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace featinv;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitPartial = 2;

constexpr const char* kWeightsEnv = "FEATINV_WEIGHTS_DIR";

// ---------------------------------------------------------------- helpers

fs::path prepare_out(const fs::path& out) {
  if (out.empty()) throw ValidationError("--out is required");
  fs::create_directories(out);
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  f << text;
  if (!f) throw Error("failed writing " + path.string());
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string fixed(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

/// Explicit path, then $FEATINV_WEIGHTS_DIR/<encoder>.safetensors, then
/// random-seeded weights.
std::string resolve_weights(const std::string& encoder, const std::string& weights) {
  if (!weights.empty()) return weights;
  if (const char* dir = std::getenv(kWeightsEnv); dir && *dir) {
    const fs::path p = fs::path(dir) / (encoder + ".safetensors");
    if (fs::exists(p)) return p.string();
  }
  if (encoder != "toy") {
    std::cerr << "note: no weights for '" << encoder << "', using random-seeded weights\n";
  }
  return "random-seeded";
}

std::shared_ptr<const EncoderHandle> open_encoder(const std::string& name, const std::string& weights) {
  EncoderSpec spec = standard_spec(name);
  spec.weights_source = weights;
  return std::make_shared<EncoderHandle>(std::move(spec));
}

Tensor load_input(const EncoderHandle& enc, const fs::path& path) {
  return to_input_tensor(read_image(path), enc.spec().preprocess);
}

std::vector<FeatureRecord> load_records(const FeatureStore& store) {
  std::vector<FeatureRecord> out;
  out.reserve(store.size());
  for (std::size_t i = 0; i < store.size(); ++i) out.push_back(store.load(i));
  return out;
}

/// Manifest copy whose relative paths resolve from `dir`.
DatasetManifest rebase(const DatasetManifest& m, const fs::path& dir) {
  DatasetManifest out = m;
  const fs::path base = fs::absolute(dir);
  for (auto& r : out.records) {
    const fs::path p = fs::absolute(m.resolve(r));
    r.path = fs::relative(p, base).generic_string();
  }
  out.root = dir;
  return out;
}

std::vector<std::string> class_names_for(const DatasetManifest& m) {
  if (!m.class_names.empty()) return m.class_names;
  int top = -1;
  for (const auto& r : m.records) top = std::max(top, r.label.value_or(-1));
  std::vector<std::string> names;
  for (int c = 0; c <= top; ++c) names.push_back("class" + std::to_string(c));
  return names;
}

std::unique_ptr<TransformerLM> open_lm(const std::string& dir) {
  if (dir.empty()) throw ValidationError("caption task needs a language model (--lm)");
  auto lm = TransformerLM::load(dir);
  lm->freeze();
  return lm;
}

std::unique_ptr<TextEmbedder> make_embedder(const std::string& spec, std::uint64_t seed) {
  if (spec == "none") return nullptr;
  if (spec == "hashing") return std::make_unique<HashingEmbedder>(256, seed);
  if (spec == "one-hot") return std::make_unique<OneHotEmbedder>();
  if (spec.starts_with("command:")) return std::make_unique<CommandEmbedder>(spec.substr(8));
  throw ValidationError("unknown embedder '" + spec + "' (none, hashing, one-hot, command:<cmd>)");
}

std::vector<ExternalScorer> parse_external(const std::vector<std::string>& specs) {
  std::vector<ExternalScorer> out;
  for (const auto& s : specs) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw ValidationError("--external expects name=command, got '" + s + "'");
    out.push_back({s.substr(0, eq), s.substr(eq + 1)});
  }
  return out;
}

// ---------------------------------------------------------------- run spec

/// Resolved option values of `sub`: explicit values, else the default.
json resolved_options(const CLI::App& sub) {
  json opts = json::object();
  for (const CLI::Option* opt : sub.get_options()) {
    if (opt->get_lnames().empty()) continue;
    const std::string name = "--" + opt->get_lnames().front();
    if (name == "--help") continue;
    if (opt->get_expected_min() == 0) {
      if (opt->count() > 0) opts[name] = true;
      continue;
    }
    if (opt->count() > 0) {
      opts[name] = opt->results();
    } else if (const std::string d = opt->get_default_str(); !d.empty() && d != "{}" && d != "[]") {
      // CLI11 renders an empty vector default as "{}" or "[]".
      opts[name] = std::vector<std::string>{d};
    }
  }
  return opts;
}

/// Writes run.json: subcommand, toolkit version, seed and every resolved
/// option, so `featinv replay run.json` reruns the same command.
void write_run_spec(const CLI::App& sub, const fs::path& out, std::uint64_t seed, json overrides = json::object(),
                    json details = json::object()) {
  json opts = resolved_options(sub);
  for (auto& [k, v] : overrides.items()) opts[k] = v;
  json run{{"format", "featinv-run"},
           {"subcommand", sub.get_name()},
           {"version", version()},
           {"seed", seed},
           {"out", out.generic_string()},
           {"options", opts}};
  if (!details.empty()) run["resolved"] = details;
  write_text(out / "run.json", run.dump(2) + "\n");
}

std::vector<std::string> replay_args(const json& run, const std::string& out_override) {
  if (run.value("format", "") != "featinv-run") throw FormatError("not a featinv run.json document");
  std::vector<std::string> args{run.at("subcommand").get<std::string>()};
  for (auto& [name, value] : run.at("options").items()) {
    if (name == "--out" && !out_override.empty()) {
      args.push_back(name);
      args.push_back(out_override);
    } else if (value.is_boolean()) {
      if (value.get<bool>()) args.push_back(name);
    } else {
      for (const auto& v : value) {
        args.push_back(name);
        args.push_back(v.get<std::string>());
      }
    }
  }
  return args;
}

// ---------------------------------------------------------------- options

struct CommonOptions {
  std::string out;
  std::uint64_t seed = 0;
};

struct MakeToyOptions : CommonOptions {
  std::size_t size = 64;
  int image_size = 32;
  std::string split = "train";
};

struct ConvertOptions : CommonOptions {
  std::string format;
  std::string input;
  std::string images;
  std::string split = "train";
  std::string split_list;
  bool with_label = false;
};

struct SampleOptions : CommonOptions {
  std::string manifest;
  std::size_t target = 0;
};

struct ExtractOptions : CommonOptions {
  std::string encoder = "toy";
  std::string weights;
  std::string manifest;
  std::string layer = "base";
  std::string dtype = "f32";
  int progress = 100;
  std::string schedule;
  std::string sigma;
  int calibration_batch = 16;
};

struct PretrainOptions : CommonOptions {
  std::string manifest;
  int epochs = 20;
  double lr = 3e-3;
  int batch = 16;
  int d_model = 64;
  int layers = 2;
  int heads = 4;
  int max_positions = 96;
  int min_count = 1;
};

struct TrainOptionsCli : CommonOptions {
  std::string task = "caption";
  std::string features;
  std::string manifest;
  std::string eval_features;
  std::string eval_manifest;
  std::string config;
  std::string lm;
  std::optional<double> lr;
  std::optional<int> epochs;
  std::optional<int> train_batch;
  std::optional<std::string> optimizer;
  std::optional<std::string> freeze;
  std::optional<std::string> prompt;
  bool resume = false;
  int d_prime = 1024;
  int queries = 32;
  int align_hidden = 768;
  int align_layers = 2;
  int align_heads = 12;
  int spatial_channels = 64;
  std::string label_input = "projected";
};

struct AttackOptions : CommonOptions {
  std::string checkpoint;
  std::string features;
  std::string lm;
  std::string manifest;
  std::string layer;
  int max_length = 32;
  int beam = 1;
};

struct ReportOptions : CommonOptions {
  std::string predictions;
  std::string manifest;
  std::string sweep;
  double threshold = 0.7;
  std::string embedder = "hashing";
  std::vector<std::string> external;
};

struct DefendOptions : CommonOptions {
  std::string encoder = "toy";
  std::string weights;
  std::string schedule;
  std::string layer;
  std::string sigma;
  std::string checkpoint;
  std::string lm;
  std::string manifest;
  double threshold = 0.7;
  std::string embedder = "hashing";
  int reps = 100;
  int calibration_batch = 16;
};

struct HeatmapOptions : CommonOptions {
  std::string encoder = "toy";
  std::string weights;
  std::string image;
  std::string layers;
  double alpha = 0.5;
};

// ---------------------------------------------------------------- commands

int cmd_make_toy(const CLI::App& sub, const MakeToyOptions& o) {
  const fs::path out = prepare_out(o.out);
  ToyCorpusOptions opts;
  opts.image_size = o.image_size;
  opts.split = parse_split(o.split);
  const DatasetManifest m = make_toy_corpus(o.seed, o.size, out, opts);
  write_run_spec(sub, out, o.seed);
  std::cout << "wrote " << m.records.size() << " toy items to " << (out / "manifest.tsv").string() << "\n";
  return kExitOk;
}

int cmd_convert(const CLI::App& sub, const ConvertOptions& o) {
  const fs::path out = prepare_out(o.out);
  const Split split = parse_split(o.split);
  DatasetManifest m;
  if (o.format == "coco") {
    m = convert_coco(o.input, o.images, out, split);
  } else if (o.format == "flickr8k") {
    std::optional<fs::path> list;
    if (!o.split_list.empty()) list = o.split_list;
    m = convert_flickr8k(o.input, o.images, out, split, list);
  } else if (o.format == "cifar10") {
    m = convert_cifar10(o.input, out, split);
  } else if (o.format == "tiny-imagenet") {
    m = convert_tiny_imagenet(o.input, out, split);
  } else if (o.format == "caption-tsv") {
    m = convert_caption_tsv(o.input, o.images, out, split, o.with_label);
  } else {
    throw ValidationError("unknown format '" + o.format + "'");
  }
  write_manifest(m, out / "manifest.tsv");
  write_run_spec(sub, out, o.seed);
  std::cout << "wrote " << m.records.size() << " records to " << (out / "manifest.tsv").string() << "\n";
  return kExitOk;
}

int cmd_sample(const CLI::App& sub, const SampleOptions& o) {
  const fs::path out = prepare_out(o.out);
  const DatasetManifest m = load_manifest(o.manifest, false);
  const DatasetManifest s = rebase(sample_split(m, {o.target, o.seed}), out);
  write_manifest(s, out / "manifest.tsv");
  write_run_spec(sub, out, o.seed);
  std::cout << "sampled " << s.records.size() << " of " << m.records.size() << " records\n";
  return kExitOk;
}

int cmd_extract(const CLI::App& sub, const ExtractOptions& o) {
  const fs::path out = prepare_out(o.out);
  const std::string weights = resolve_weights(o.encoder, o.weights);
  const auto enc = open_encoder(o.encoder, weights);
  if (!enc->encoder().has_layer(o.layer)) {
    throw ValidationError("encoder '" + o.encoder + "' has no layer '" + o.layer + "'");
  }
  const Dtype dtype = parse_dtype(o.dtype);
  const DatasetManifest m = load_manifest(o.manifest, false);
  FeatureStore store(out, true);
  if (store.size() > 0) throw ValidationError("output store " + out.string() + " is not empty");
  const std::vector<std::string> layers{o.layer};

  // With a schedule, records are the noisy views an interceptor would see.
  std::optional<DefendedEncoder> defended;
  if (!o.schedule.empty() || !o.sigma.empty()) {
    NoiseSchedule schedule = o.schedule.empty() ? NoiseSchedule::parse(o.layer + " = " + o.sigma + "\n")
                                                : NoiseSchedule::load(o.schedule);
    if (o.schedule.empty()) schedule.calibration_batch = o.calibration_batch;
    if (sub.count("--seed") > 0) schedule.seed = o.seed;
    if (!schedule.resolved()) {
      std::vector<Tensor> calib;
      for (const auto& r : m.records) {
        if (calib.size() >= static_cast<std::size_t>(schedule.calibration_batch)) break;
        try {
          calib.push_back(load_input(*enc, m.resolve(r)));
        } catch (const std::exception&) {
          // Unreadable images are reported by the main loop.
        }
      }
      schedule = calibrate(schedule, *enc, calib);
    }
    write_text(out / "noise_schedule.txt", schedule.to_text());
    defended.emplace(enc, schedule, std::set<std::string>{o.layer});
  }

  std::vector<std::pair<std::string, std::string>> failures;
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    const auto& r = m.records[i];
    try {
      const Tensor input = load_input(*enc, m.resolve(r));
      if (defended) {
        const auto recs = defended->leaked_records(defended->forward(input, r.image_id), r.image_id, dtype);
        store.add(recs.at(0));
      } else {
        const Tensor f = enc->capture(input, layers).at(o.layer);
        store.add(FeatureRecord::from_tensor(enc->spec().encoder_id, o.layer, r.image_id, f, dtype));
      }
    } catch (const std::exception& e) {
      failures.emplace_back(r.image_id, e.what());
    }
    if (o.progress > 0 && ((i + 1) % static_cast<std::size_t>(o.progress) == 0 || i + 1 == m.records.size())) {
      std::cerr << "extract: " << (i + 1) << "/" << m.records.size() << "\n";
    }
  }
  std::ostringstream ft;
  ft << "image_id\terror\n";
  for (const auto& [id, msg] : failures) ft << id << "\t" << msg << "\n";
  write_text(out / "failures.tsv", ft.str());
  write_run_spec(sub, out, o.seed, {{"--weights", std::vector<std::string>{weights}}});
  std::cout << "extracted " << store.size() << " records at '" << o.layer << "', " << failures.size()
            << " failures\n";
  for (const auto& [id, msg] : failures) std::cerr << "failed: " << id << ": " << msg << "\n";
  return failures.empty() ? kExitOk : kExitPartial;
}

int cmd_pretrain_lm(const CLI::App& sub, const PretrainOptions& o) {
  const fs::path out = prepare_out(o.out);
  const DatasetManifest m = load_manifest(o.manifest, false);
  std::vector<std::string> captions;
  for (const auto& r : m.records) captions.insert(captions.end(), r.captions.begin(), r.captions.end());
  if (captions.empty()) throw ValidationError("manifest has no captions");
  TransformerLMConfig lc;
  lc.d_model = o.d_model;
  lc.layers = o.layers;
  lc.heads = o.heads;
  lc.max_positions = o.max_positions;
  TransformerLM lm(lc, Tokenizer::build(captions, o.min_count), o.seed);
  LMPretrainConfig pc;
  pc.epochs = o.epochs;
  pc.batch = o.batch;
  pc.learning_rate = o.lr;
  pc.seed = o.seed;
  const auto losses = pretrain_lm(lm, captions, pc);
  lm.save(out);
  std::ostringstream t;
  t << "epoch\tloss\n";
  for (std::size_t e = 0; e < losses.size(); ++e) t << (e + 1) << "\t" << fixed(losses[e], 6) << "\n";
  write_text(out / "pretrain_loss.tsv", t.str());
  write_run_spec(sub, out, o.seed);
  std::cout << "language model: vocab " << lm.vocab_size() << ", final loss "
            << (losses.empty() ? std::string("n/a") : fixed(losses.back())) << "\n";
  return kExitOk;
}

/// Pairs store records with manifest entries by image id.
std::vector<TrainItem> build_items(const FeatureStore& store, const DatasetManifest& m, AttackTask task,
                                   const Tokenizer* tok) {
  std::vector<TrainItem> items;
  for (std::size_t i = 0; i < store.size(); ++i) {
    const FeatureRecord rec = store.load(i);
    const ManifestRecord* mr = m.find(rec.image_id);
    if (!mr) throw ValidationError("feature '" + rec.image_id + "' has no manifest record");
    TrainItem it;
    it.image_id = rec.image_id;
    it.feature = rec.to_tensor();
    if (task == AttackTask::kLabel) {
      if (!mr->label) throw ValidationError("record '" + rec.image_id + "' has no label");
      it.label = *mr->label;
    } else {
      for (const auto& c : mr->captions) it.references.push_back(make_reference(*tok, c));
      if (it.references.empty()) throw ValidationError("record '" + rec.image_id + "' has no captions");
    }
    items.push_back(std::move(it));
  }
  return items;
}

int cmd_train(const CLI::App& sub, const TrainOptionsCli& o) {
  const fs::path out = prepare_out(o.out);
  const AttackTask task = parse_task(o.task);
  TrainConfig cfg = o.config.empty() ? TrainConfig::defaults(task) : TrainConfig::load(o.config, task);
  if (cfg.task != task) throw ValidationError("config task does not match --task");
  if (o.lr) cfg.learning_rate = *o.lr;
  if (o.epochs) cfg.epochs = *o.epochs;
  if (o.train_batch) cfg.train_batch = *o.train_batch;
  if (o.optimizer) cfg.optimizer = parse_optimizer(*o.optimizer);
  if (o.prompt) cfg.prompt = *o.prompt;
  if (o.freeze) {
    cfg.frozen_components.clear();
    for (const auto& c : split_list(*o.freeze)) cfg.frozen_components.insert(c);
  }
  if (sub.count("--seed") > 0 || o.config.empty()) cfg.seed = o.seed;
  cfg.validate();

  const FeatureStore store(o.features);
  if (store.size() == 0) throw ValidationError("feature store " + o.features + " is empty");
  const auto& first = store.entries().front();
  for (const auto& e : store.entries()) {
    if (e.layer_name != first.layer_name || e.encoder_id != first.encoder_id || e.shape != first.shape) {
      throw ValidationError("feature store mixes taps: '" + first.layer_name + "' and '" + e.layer_name + "'");
    }
  }
  const DatasetManifest m = load_manifest(o.manifest, false);

  std::unique_ptr<TransformerLM> lm;
  if (task == AttackTask::kCaption) lm = open_lm(o.lm);
  const Tokenizer* tok = lm ? lm->tokenizer() : nullptr;

  TrainData data;
  data.train = build_items(store, m, task, tok);
  if (!o.eval_features.empty()) {
    const DatasetManifest em = load_manifest(o.eval_manifest.empty() ? o.manifest : o.eval_manifest, false);
    data.eval = build_items(FeatureStore(o.eval_features), em, task, tok);
  }

  InversionConfig ic;
  ic.task = task;
  ic.encoder_id = first.encoder_id;
  ic.layer_name = first.layer_name;
  ic.input_shape = first.shape;
  ic.d_prime = o.d_prime;
  ic.num_queries = o.queries;
  ic.spatial_channels = o.spatial_channels;
  ic.alignment.hidden = o.align_hidden;
  ic.alignment.layers = o.align_layers;
  ic.alignment.heads = o.align_heads;
  ic.seed = cfg.seed;
  json extra = json::object();
  if (task == AttackTask::kCaption) {
    ic.d_lm = lm->embed_dim();
    extra["lm_dir"] = fs::absolute(o.lm).generic_string();
  } else {
    const auto names = class_names_for(m);
    ic.num_classes = static_cast<int>(names.size());
    ic.label_input = o.label_input == "pooled-aligned" ? LabelInput::kPooledAligned : LabelInput::kProjected;
    if (o.label_input != "projected" && o.label_input != "pooled-aligned") {
      throw ValidationError("--label-input must be projected or pooled-aligned");
    }
    extra["class_names"] = names;
  }
  InversionModel model(ic);

  TrainOptions topts;
  topts.out_dir = out;
  topts.resume = o.resume;
  topts.extra = extra;
  topts.on_epoch = [](int epoch, double tl, double el) {
    std::cerr << "epoch " << epoch << " train_loss " << fixed(tl) << (std::isnan(el) ? "" : " eval_loss " + fixed(el))
              << "\n";
  };
  const LossReport report = train(model, lm.get(), data, cfg, topts);
  write_run_spec(sub, out, cfg.seed, json::object(), {{"train_config", cfg.to_json()}, {"model", to_json(ic)}});
  std::cout << "trained " << report.epoch_loss.size() - static_cast<std::size_t>(report.start_epoch)
            << " epochs, final loss "
            << (report.epoch_loss.empty() ? std::string("n/a") : fixed(report.epoch_loss.back())) << "\n";
  return kExitOk;
}

int cmd_attack(const CLI::App& sub, const AttackOptions& o) {
  const fs::path out = prepare_out(o.out);
  json meta;
  const InversionModel model = load_model(o.checkpoint, &meta);
  const FeatureStore store(o.features);
  // Refuse before decoding anything when the store does not match the model.
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& e = store.entries()[i];
    if (e.layer_name != model.config().layer_name) {
      throw ValidationError("feature layer '" + e.layer_name + "' does not match checkpoint layer '" +
                            model.config().layer_name + "'");
    }
  }
  const std::vector<FeatureRecord> records = load_records(store);
  for (const auto& r : records) check_compatible(model, r);

  std::ostringstream t;
  if (model.config().task == AttackTask::kLabel) {
    std::vector<int> labels;
    if (!o.manifest.empty()) {
      const DatasetManifest m = load_manifest(o.manifest, false);
      for (const auto& r : records) {
        const ManifestRecord* mr = m.find(r.image_id);
        labels.push_back(mr && mr->label ? *mr->label : -1);
      }
    }
    const auto preds = attack_labels(model, records, labels);
    t << "#featinv-predictions\ttask=label\n";
    for (std::size_t i = 0; i < records.size(); ++i) {
      t << records[i].image_id << "\t" << (records[i].defended ? 1 : 0) << "\t" << preds[i].predicted << "\t"
        << (preds[i].true_label ? std::to_string(*preds[i].true_label) : "-") << "\t";
      for (std::size_t c = 0; c < preds[i].logits.size(); ++c) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.9g", preds[i].logits[c]);
        t << (c ? "," : "") << buf;
      }
      t << "\n";
    }
  } else {
    const std::string lm_dir = !o.lm.empty() ? o.lm : meta.value("lm_dir", "");
    const auto lm = open_lm(lm_dir);
    DecodeConfig dc;
    dc.max_length = o.max_length;
    if (o.beam > 1) {
      dc.strategy = DecodeStrategy::kBeam;
      dc.beam_width = o.beam;
    }
    if (meta.contains("train_config")) dc.prompt = meta["train_config"].value("prompt", "");
    const auto caps = attack_captions(model, *lm, records, dc);
    t << "#featinv-predictions\ttask=caption\n";
    for (std::size_t i = 0; i < records.size(); ++i) {
      t << records[i].image_id << "\t" << (records[i].defended ? 1 : 0) << "\t" << caps[i].text << "\n";
    }
  }
  write_text(out / "predictions.tsv", t.str());
  write_run_spec(sub, out, o.seed);
  std::cout << "wrote " << records.size() << " predictions to " << (out / "predictions.tsv").string() << "\n";
  return kExitOk;
}

struct PredictionRow {
  std::string image_id;
  bool defended = false;
  std::string caption;
  int predicted = -1;
  std::vector<float> logits;
};

std::vector<PredictionRow> read_predictions(const fs::path& path, AttackTask& task) {
  std::ifstream f(path);
  if (!f) throw ValidationError("cannot open predictions " + path.string());
  std::string line;
  if (!std::getline(f, line) || !line.starts_with("#featinv-predictions\ttask=")) {
    throw FormatError(path.string() + ": missing predictions header");
  }
  task = parse_task(line.substr(line.find('=') + 1));
  std::vector<PredictionRow> rows;
  int lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, '\t')) cols.push_back(c);
    const std::size_t need = task == AttackTask::kLabel ? 5 : 2;
    if (cols.size() < need) throw FormatError(path.string() + ":" + std::to_string(lineno) + ": too few fields");
    PredictionRow r;
    r.image_id = cols[0];
    r.defended = cols[1] == "1";
    if (task == AttackTask::kLabel) {
      r.predicted = std::stoi(cols[2]);
      for (const auto& v : split_list(cols[4])) r.logits.push_back(std::stof(v));
    } else {
      r.caption = cols.size() > 2 ? cols[2] : "";
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

void write_histogram(const fs::path& out, const std::vector<std::int64_t>& hist, const std::string& title) {
  std::ostringstream t;
  t << "bin_lo\tbin_hi\tcount\n";
  for (std::size_t b = 0; b < hist.size(); ++b) {
    const double lo = -1.0 + CosineResult::kBinWidth * static_cast<double>(b);
    t << fixed(lo, 2) << "\t" << fixed(lo + CosineResult::kBinWidth, 2) << "\t" << hist[b] << "\n";
  }
  write_text(out / "cosine_histogram.tsv", t.str());
  write_png(out / "cosine_histogram.png", plots::histogram(hist, -1.0, 1.0, title, "cosine similarity"));
}

void write_label_report(const fs::path& out, const ClassificationReport& rep, const std::string& prefix) {
  write_text(out / (prefix + "classification.json"), rep.to_json().dump(2) + "\n");
  write_text(out / (prefix + "classification.txt"), rep.to_text());
  std::ostringstream t;
  t << "truth\\pred";
  for (int c = 0; c < rep.num_classes; ++c) t << "\t" << rep.class_names[static_cast<std::size_t>(c)];
  t << "\n";
  for (int r = 0; r < rep.num_classes; ++r) {
    t << rep.class_names[static_cast<std::size_t>(r)];
    for (int c = 0; c < rep.num_classes; ++c) t << "\t" << rep.confusion_at(r, c);
    t << "\n";
  }
  write_text(out / (prefix + "confusion.tsv"), t.str());
  write_png(out / (prefix + "confusion.png"),
            plots::confusion_matrix(rep.confusion, rep.num_classes, rep.class_names, "confusion matrix"));
}

std::string line_join(const std::vector<std::string>& cols) {
  std::string s;
  for (std::size_t i = 0; i < cols.size(); ++i) s += (i ? "\t" : "") + cols[i];
  return s;
}

int report_sweep(const fs::path& out, const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ValidationError("cannot open sweep table " + path);
  std::string line;
  if (!std::getline(f, line)) throw FormatError(path + ": empty sweep table");
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, '\t')) header.push_back(c);
  }
  if (header.size() < 2) throw FormatError(path + ": need a layer column and at least one metric");
  std::vector<std::string> layers;
  std::vector<std::vector<double>> values(header.size() - 1);
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, '\t')) cols.push_back(c);
    if (cols.size() != header.size()) throw FormatError(path + ": row '" + line + "' has the wrong field count");
    layers.push_back(cols[0]);
    for (std::size_t k = 1; k < cols.size(); ++k) values[k - 1].push_back(std::stod(cols[k]));
  }
  const std::vector<std::string> series(header.begin() + 1, header.end());
  write_png(out / "sweep.png", plots::grouped_bars(layers, series, values, "metrics by layer"));
  std::ostringstream t;
  t << line_join(header) << "\n";
  for (std::size_t r = 0; r < layers.size(); ++r) {
    t << layers[r];
    for (const auto& v : values) t << "\t" << fixed(v[r], 6);
    t << "\n";
  }
  write_text(out / "sweep.tsv", t.str());
  std::cout << "sweep over " << layers.size() << " layers plotted\n";
  return kExitOk;
}

int cmd_report(const CLI::App& sub, const ReportOptions& o) {
  const fs::path out = prepare_out(o.out);
  if (!o.sweep.empty()) {
    const int rc = report_sweep(out, o.sweep);
    write_run_spec(sub, out, o.seed);
    return rc;
  }
  AttackTask task{};
  const auto rows = read_predictions(o.predictions, task);
  const DatasetManifest m = load_manifest(o.manifest, false);
  if (task == AttackTask::kLabel) {
    std::vector<LabelPrediction> preds;
    for (const auto& r : rows) {
      const ManifestRecord* mr = m.find(r.image_id);
      if (!mr || !mr->label) throw ValidationError("no manifest label for '" + r.image_id + "'");
      preds.push_back(prediction_from_logits(r.logits, *mr->label));
    }
    const ClassificationReport rep = evaluate_classification(preds, class_names_for(m));
    write_label_report(out, rep, "");
    std::cout << "top1 " << fixed(rep.top1, 2) << " top5 " << fixed(rep.top5, 2) << " over " << rep.count
              << " items\n";
  } else {
    std::vector<std::string> cands;
    std::vector<std::vector<std::string>> refs;
    for (const auto& r : rows) {
      const ManifestRecord* mr = m.find(r.image_id);
      if (!mr || mr->captions.empty()) throw ValidationError("no manifest captions for '" + r.image_id + "'");
      cands.push_back(r.caption);
      refs.push_back(mr->captions);
    }
    MetricConfig mc;
    mc.cosine_threshold = o.threshold;
    mc.external = parse_external(o.external);
    mc.validate();
    const auto embedder = make_embedder(o.embedder, o.seed);
    const MetricReport rep = evaluate_captions(cands, refs, mc, embedder.get());
    write_text(out / "metrics.json", rep.to_json().dump(2) + "\n");
    write_text(out / "metrics.txt", rep.to_text());
    std::ostringstream t;
    t << "image_id\tbleu1\tbleu4\trouge_l\tcider\tcosine\n";
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto& s = rep.per_item[i];
      t << rows[i].image_id << "\t" << fixed(s.bleu.front(), 6) << "\t" << fixed(s.bleu.back(), 6) << "\t"
        << fixed(s.rouge_l, 6) << "\t" << fixed(s.cider, 6) << "\t" << (s.cosine ? fixed(*s.cosine, 6) : "-")
        << "\n";
    }
    write_text(out / "per_item.tsv", t.str());
    if (rep.cosine) write_histogram(out, rep.cosine->histogram, "caption similarity");
    std::cout << rep.to_text();
  }
  write_run_spec(sub, out, o.seed);
  return kExitOk;
}

NoiseSchedule schedule_from(const DefendOptions& o) {
  NoiseSchedule s;
  if (!o.schedule.empty()) {
    s = NoiseSchedule::load(o.schedule);
  } else {
    if (o.layer.empty() || o.sigma.empty()) throw ValidationError("give --schedule, or --layer with --sigma");
    s = NoiseSchedule::parse(o.layer + " = " + o.sigma + "\n");
    s.calibration_batch = o.calibration_batch;
  }
  return s;
}

int cmd_defend_eval(const CLI::App& sub, const DefendOptions& o) {
  const fs::path out = prepare_out(o.out);
  const std::string weights = resolve_weights(o.encoder, o.weights);
  const auto enc = open_encoder(o.encoder, weights);
  json meta;
  const InversionModel model = load_model(o.checkpoint, &meta);
  const std::string tap = model.config().layer_name;
  if (!enc->encoder().has_layer(tap)) throw ValidationError("encoder has no layer '" + tap + "' used by checkpoint");

  NoiseSchedule schedule = schedule_from(o);
  if (sub.count("--seed") > 0) schedule.seed = o.seed;
  for (const auto& l : schedule.layers()) {
    if (!enc->encoder().has_layer(l)) throw ValidationError("schedule layer '" + l + "' is not an encoder layer");
  }

  const DatasetManifest m = load_manifest(o.manifest, false);
  std::vector<Tensor> images;
  std::vector<std::string> ids;
  for (const auto& r : m.records) {
    images.push_back(load_input(*enc, m.resolve(r)));
    ids.push_back(r.image_id);
  }
  if (images.empty()) throw ValidationError("manifest has no images");
  schedule = calibrate(schedule, *enc, images);
  const DefendedEncoder defended(enc, schedule, {tap});

  const std::vector<std::string> layers{tap};
  std::vector<FeatureRecord> clean, noisy;
  double max_rel = 0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto captured = enc->capture(images[i], layers);
    clean.push_back(FeatureRecord::from_tensor(enc->spec().encoder_id, tap, ids[i], captured.at(tap)));
    const DefendedOutput d = defended.forward(images[i], ids[i]);
    auto leaked = defended.leaked_records(d, ids[i]);
    noisy.push_back(std::move(leaked.at(0)));
    Tensor plain_final;
    {
      NoGradGuard ng;
      plain_final = enc->encoder().forward(images[i], {});
    }
    const double denom = std::max(1e-12, static_cast<double>(plain_final.value().norm()));
    max_rel = std::max(max_rel, static_cast<double>((d.final_output.value() - plain_final.value()).norm()) / denom);
  }

  json report{{"schedule", schedule.to_text()}, {"layer", tap}, {"items", images.size()},
              {"final_output_max_relative_error", max_rel}};
  if (model.config().task == AttackTask::kLabel) {
    const auto rep = evaluate_label_defense(model, clean, noisy, m);
    report["clean"] = rep.clean.to_json();
    report["defended"] = rep.defended.to_json();
    write_label_report(out, rep.clean, "clean_");
    write_label_report(out, rep.defended, "defended_");
    std::cout << "top1 clean " << fixed(rep.clean.top1, 2) << " defended " << fixed(rep.defended.top1, 2) << "\n";
  } else {
    const std::string lm_dir = !o.lm.empty() ? o.lm : meta.value("lm_dir", "");
    const auto lm = open_lm(lm_dir);
    MetricConfig mc;
    mc.cosine_threshold = o.threshold;
    const auto embedder = make_embedder(o.embedder, o.seed);
    const auto rep = evaluate_caption_defense(model, *lm, clean, noisy, m, mc, embedder.get());
    report["clean"] = rep.clean.to_json();
    report["defended"] = rep.defended.to_json();
    std::ostringstream t;
    t << "image_id\tclean\tdefended\n";
    for (std::size_t i = 0; i < ids.size(); ++i) {
      t << ids[i] << "\t" << rep.clean_captions[i] << "\t" << rep.defended_captions[i] << "\n";
    }
    write_text(out / "captions.tsv", t.str());
    std::cout << "bleu1 clean " << fixed(rep.clean.bleu.front()) << " defended " << fixed(rep.defended.bleu.front())
              << "\n";
  }
  // Timing lives in its own file so the paired report stays replayable.
  const OverheadReport overhead = measure_overhead(defended, images, o.reps);
  write_text(out / "defense_report.json", report.dump(2) + "\n");
  write_text(out / "overhead.json", overhead.to_json().dump(2) + "\n");
  write_run_spec(sub, out, schedule.seed, {{"--weights", std::vector<std::string>{weights}}});
  std::cout << "overhead " << fixed(100.0 * overhead.relative_increase, 2) << "%\n";
  return kExitOk;
}

int cmd_heatmap(const CLI::App& sub, const HeatmapOptions& o) {
  const fs::path out = prepare_out(o.out);
  const std::string weights = resolve_weights(o.encoder, o.weights);
  const auto enc = open_encoder(o.encoder, weights);
  const std::vector<std::string> layers = split_list(o.layers);
  if (layers.empty()) throw ValidationError("--layers is empty");
  for (const auto& l : layers) {
    if (!enc->encoder().has_layer(l)) throw ValidationError("encoder has no layer '" + l + "'");
    if (enc->encoder().layer_shape(l).size() != 3) {
      throw ValidationError("layer '" + l + "' is a vector tap with no spatial map");
    }
  }
  const Image img = read_image(o.image);
  const Image base = preprocess_image(img, enc->spec().preprocess);
  const auto feats = enc->capture(to_input_tensor(img, enc->spec().preprocess), layers);
  for (const auto& l : layers) {
    const Matrix map = plots::channel_mean_map(feats.at(l));
    write_png(out / ("heatmap_" + l + ".png"), plots::heatmap_overlay(map, base, o.alpha));
    std::ostringstream t;
    for (Index y = 0; y < map.rows(); ++y) {
      for (Index x = 0; x < map.cols(); ++x) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.9g", map(y, x));
        t << (x ? "\t" : "") << buf;
      }
      t << "\n";
    }
    write_text(out / ("heatmap_" + l + ".tsv"), t.str());
  }
  write_run_spec(sub, out, o.seed, {{"--weights", std::vector<std::string>{weights}}});
  std::cout << "wrote " << layers.size() << " heatmaps to " << out.string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------- wiring

void add_common(CLI::App* sub, CommonOptions& c, bool out_required = true) {
  auto* opt = sub->add_option("--out", c.out, "Output directory");
  if (out_required) opt->required();
  sub->add_option("--seed", c.seed, "Run seed");
}

void add_encoder(CLI::App* sub, std::string& encoder, std::string& weights) {
  sub->add_option("--encoder", encoder, "Encoder name")->check(CLI::IsMember(standard_spec_names()));
  sub->add_option("--weights", weights,
                  "Weights file; defaults to $FEATINV_WEIGHTS_DIR/<encoder>.safetensors, else random-seeded");
}

int run(std::vector<std::string> args);

int dispatch(CLI::App& app, std::vector<std::string> args) {
  MakeToyOptions toy;
  ConvertOptions conv;
  SampleOptions samp;
  ExtractOptions ext;
  PretrainOptions pre;
  TrainOptionsCli tr;
  AttackOptions att;
  ReportOptions rep;
  DefendOptions def;
  HeatmapOptions heat;
  std::string replay_file, replay_out;

  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();
  app.set_version_flag("--version", std::string(version()));
  app.footer(std::string("Environment:\n  ") + kWeightsEnv +
             "  directory searched for <encoder>.safetensors when --weights is not given\n"
             "Exit codes: 0 success, 1 validation failure, 2 partial item failures");

  auto* s_toy = app.add_subcommand("make-toy", "Render the synthetic shapes corpus");
  add_common(s_toy, toy);
  s_toy->add_option("--size", toy.size, "Number of images");
  s_toy->add_option("--image-size", toy.image_size, "Image side in pixels");
  s_toy->add_option("--split", toy.split, "train or test");

  auto* s_conv = app.add_subcommand("convert", "Convert a public dataset layout into a manifest");
  add_common(s_conv, conv);
  s_conv->add_option("--format", conv.format, "coco, flickr8k, cifar10, tiny-imagenet or caption-tsv")
      ->required()
      ->check(CLI::IsMember({"coco", "flickr8k", "cifar10", "tiny-imagenet", "caption-tsv"}));
  s_conv->add_option("--input", conv.input, "Annotation file or dataset directory")->required();
  s_conv->add_option("--images", conv.images, "Image directory (coco, flickr8k, caption-tsv)");
  s_conv->add_option("--split", conv.split, "train or test");
  s_conv->add_option("--split-list", conv.split_list, "Flickr8k image list restricting the split");
  s_conv->add_flag("--with-label", conv.with_label, "caption-tsv rows carry a label column");

  auto* s_samp = app.add_subcommand("sample", "Draw a seeded (stratified) subset of a manifest");
  add_common(s_samp, samp);
  s_samp->add_option("--manifest", samp.manifest, "Input manifest")->required();
  s_samp->add_option("--target", samp.target, "Records to keep, e.g. 900 or 1000")->required();

  auto* s_ext = app.add_subcommand("extract", "Capture intermediate features for a manifest");
  add_common(s_ext, ext);
  add_encoder(s_ext, ext.encoder, ext.weights);
  s_ext->add_option("--manifest", ext.manifest, "Dataset manifest")->required();
  s_ext->add_option("--layer", ext.layer, "Tap point");
  s_ext->add_option("--dtype", ext.dtype, "f32 or f16")->check(CLI::IsMember({"f32", "f16"}));
  s_ext->add_option("--progress", ext.progress, "Report every N items (0 = quiet)");
  s_ext->add_option("--schedule", ext.schedule, "Noise schedule; store the defended views");
  s_ext->add_option("--sigma", ext.sigma, "Noise level or auto-std at --layer; store the defended views");
  s_ext->add_option("--calibration-batch", ext.calibration_batch, "Images used for auto-std");

  auto* s_pre = app.add_subcommand("pretrain-lm", "Train the small caption language model");
  add_common(s_pre, pre);
  s_pre->add_option("--manifest", pre.manifest, "Manifest with captions")->required();
  s_pre->add_option("--epochs", pre.epochs, "Epochs");
  s_pre->add_option("--lr", pre.lr, "Learning rate");
  s_pre->add_option("--batch", pre.batch, "Batch size");
  s_pre->add_option("--d-model", pre.d_model, "Model width");
  s_pre->add_option("--layers", pre.layers, "Decoder blocks");
  s_pre->add_option("--heads", pre.heads, "Attention heads");
  s_pre->add_option("--max-positions", pre.max_positions, "Position table size");
  s_pre->add_option("--min-count", pre.min_count, "Minimum word count for the vocabulary");

  auto* s_tr = app.add_subcommand("train", "Train an inversion model on captured features");
  add_common(s_tr, tr);
  s_tr->add_option("--task", tr.task, "caption or label")->check(CLI::IsMember({"caption", "label"}));
  s_tr->add_option("--features", tr.features, "Feature store")->required();
  s_tr->add_option("--manifest", tr.manifest, "Manifest with references or labels")->required();
  s_tr->add_option("--eval-features", tr.eval_features, "Held-out feature store");
  s_tr->add_option("--eval-manifest", tr.eval_manifest, "Manifest for the held-out store");
  s_tr->add_option("--config", tr.config, "Training config file (key = value)");
  s_tr->add_option("--lm", tr.lm, "Language model directory (caption task)");
  s_tr->add_option("--lr", tr.lr, "Learning rate");
  s_tr->add_option("--epochs", tr.epochs, "Epochs");
  s_tr->add_option("--train-batch", tr.train_batch, "Training batch size");
  s_tr->add_option("--optimizer", tr.optimizer, "adam or adamw");
  s_tr->add_option("--freeze", tr.freeze, "Comma-separated frozen components");
  s_tr->add_option("--prompt", tr.prompt, "Text prompt after the feature prefix");
  s_tr->add_flag("--resume", tr.resume, "Continue from <out>/last");
  s_tr->add_option("--d-prime", tr.d_prime, "Projection width");
  s_tr->add_option("--queries", tr.queries, "Query tokens");
  s_tr->add_option("--align-hidden", tr.align_hidden, "Alignment width");
  s_tr->add_option("--align-layers", tr.align_layers, "Alignment layers");
  s_tr->add_option("--align-heads", tr.align_heads, "Alignment heads");
  s_tr->add_option("--spatial-channels", tr.spatial_channels, "Spatial projector channels");
  s_tr->add_option("--label-input", tr.label_input, "projected or pooled-aligned");

  auto* s_att = app.add_subcommand("attack", "Recover captions or labels from features");
  add_common(s_att, att);
  s_att->add_option("--checkpoint", att.checkpoint, "Checkpoint directory")->required();
  s_att->add_option("--features", att.features, "Feature store")->required();
  s_att->add_option("--lm", att.lm, "Language model directory (default: recorded in checkpoint)");
  s_att->add_option("--manifest", att.manifest, "Manifest supplying true labels");
  s_att->add_option("--max-length", att.max_length, "Maximum caption tokens");
  s_att->add_option("--beam", att.beam, "Beam width (1 = greedy)");

  auto* s_rep = app.add_subcommand("report", "Score predictions and render plots");
  add_common(s_rep, rep);
  s_rep->add_option("--predictions", rep.predictions, "predictions.tsv from attack");
  s_rep->add_option("--manifest", rep.manifest, "Reference manifest");
  s_rep->add_option("--sweep", rep.sweep, "Per-layer table: layer<TAB>metric...");
  s_rep->add_option("--threshold", rep.threshold, "Cosine success threshold");
  s_rep->add_option("--embedder", rep.embedder, "none, hashing, one-hot or command:<cmd>");
  s_rep->add_option("--external", rep.external, "Extra scorer as name=command");

  auto* s_def = app.add_subcommand("defend-eval", "Paired clean/defended attack evaluation");
  add_common(s_def, def);
  add_encoder(s_def, def.encoder, def.weights);
  s_def->add_option("--schedule", def.schedule, "Noise schedule file");
  s_def->add_option("--layer", def.layer, "Defended layer (without --schedule)");
  s_def->add_option("--sigma", def.sigma, "Noise level or auto-std (without --schedule)");
  s_def->add_option("--calibration-batch", def.calibration_batch, "Images used for auto-std");
  s_def->add_option("--checkpoint", def.checkpoint, "Attack checkpoint")->required();
  s_def->add_option("--lm", def.lm, "Language model directory (caption task)");
  s_def->add_option("--manifest", def.manifest, "Evaluation manifest")->required();
  s_def->add_option("--threshold", def.threshold, "Cosine success threshold");
  s_def->add_option("--embedder", def.embedder, "none, hashing, one-hot or command:<cmd>");
  s_def->add_option("--reps", def.reps, "Timing repetitions (>= 100)");

  auto* s_heat = app.add_subcommand("heatmap", "Channel-mean activation overlays per layer");
  add_common(s_heat, heat);
  add_encoder(s_heat, heat.encoder, heat.weights);
  s_heat->add_option("--image", heat.image, "Input image")->required();
  s_heat->add_option("--layers", heat.layers, "Comma-separated spatial taps")->required();
  s_heat->add_option("--alpha", heat.alpha, "Overlay weight");

  auto* s_replay = app.add_subcommand("replay", "Rerun a command from its run.json");
  s_replay->add_option("run", replay_file, "run.json written by an earlier command")->required();
  s_replay->add_option("--out", replay_out, "Write to this directory instead of the recorded one");

  std::reverse(args.begin(), args.end());
  app.parse(args);

  if (*s_toy) return cmd_make_toy(*s_toy, toy);
  if (*s_conv) return cmd_convert(*s_conv, conv);
  if (*s_samp) return cmd_sample(*s_samp, samp);
  if (*s_ext) return cmd_extract(*s_ext, ext);
  if (*s_pre) return cmd_pretrain_lm(*s_pre, pre);
  if (*s_tr) return cmd_train(*s_tr, tr);
  if (*s_att) return cmd_attack(*s_att, att);
  if (*s_rep) {
    if (rep.sweep.empty() && (rep.predictions.empty() || rep.manifest.empty())) {
      throw ValidationError("report needs --predictions and --manifest, or --sweep");
    }
    return cmd_report(*s_rep, rep);
  }
  if (*s_def) return cmd_defend_eval(*s_def, def);
  if (*s_heat) return cmd_heatmap(*s_heat, heat);
  if (*s_replay) {
    std::ifstream f(replay_file);
    if (!f) throw ValidationError("cannot open " + replay_file);
    return run(replay_args(json::parse(f), replay_out));
  }
  return kExitValidation;
}

int run(std::vector<std::string> args) {
  CLI::App app{"featinv: feature inversion attacks and defenses on vision encoders", "featinv"};
  try {
    return dispatch(app, std::move(args));
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitValidation;
  } catch (const json::exception& e) {
    std::cerr << "error: malformed JSON: " << e.what() << "\n";
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
  }
  return kExitValidation;
}

}  // namespace

int main(int argc, char** argv) { return run(std::vector<std::string>(argv + 1, argv + argc)); }
