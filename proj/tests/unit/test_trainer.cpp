#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "featinv/error.hpp"
#include "featinv/rng.hpp"
#include "featinv/trainer.hpp"

using namespace featinv;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / ("featinv_trainer_" + name);
  fs::remove_all(d);
  return d;
}

InversionConfig caption_model_config(int d, int d_lm) {
  InversionConfig c;
  c.task = AttackTask::kCaption;
  c.input_shape = {d};
  c.d_prime = 16;
  c.num_queries = 2;
  c.alignment.hidden = 16;
  c.alignment.layers = 1;
  c.alignment.heads = 2;
  c.d_lm = d_lm;
  c.seed = 3;
  return c;
}

InversionConfig label_model_config(int d, int classes) {
  InversionConfig c;
  c.task = AttackTask::kLabel;
  c.input_shape = {d};
  c.d_prime = 32;
  c.num_classes = classes;
  c.seed = 11;
  return c;
}

// Two classes separated by a margin of at least 1 along a random direction.
TrainData separable(int n, int d, std::uint64_t seed) {
  Rng rng(seed);
  Matrix dir = rng.normal_matrix(1, d, 1.0f);
  dir /= dir.norm();
  TrainData data;
  for (int i = 0; i < n; ++i) {
    Matrix x = rng.normal_matrix(1, d, 1.0f);
    x -= (x * dir.transpose())(0, 0) * dir;  // remove the separating component
    const int label = i % 2;
    const float offset = static_cast<float>(0.5 + rng.uniform());
    x += (label ? offset : -offset) * dir;
    data.train.push_back({"s" + std::to_string(i), Tensor(x), {}, label});
  }
  return data;
}

// Perceptron over the raw features: converges iff the data is separable.
bool perceptron_separates(const TrainData& data) {
  const Index d = data.train[0].feature.cols();
  Matrix w = Matrix::Zero(1, d + 1);
  for (int epoch = 0; epoch < 1000; ++epoch) {
    int errors = 0;
    for (const auto& it : data.train) {
      Matrix x(1, d + 1);
      x << it.feature.value(), 1.0f;
      const float y = it.label ? 1.0f : -1.0f;
      if (y * (w * x.transpose())(0, 0) <= 0) {
        w += y * x;
        ++errors;
      }
    }
    if (errors == 0) return true;
  }
  return false;
}

std::vector<std::string> toy_captions() {
  std::vector<std::string> out;
  for (const char* c : {"red", "green", "blue", "yellow"})
    for (const char* s : {"circle", "square", "triangle", "star"})
      out.push_back(std::string("a ") + c + " " + s + " on a white background");
  return out;
}

struct CaptionSetup {
  std::unique_ptr<TransformerLM> lm;
  TrainData data;
};

CaptionSetup caption_setup(int n, int d) {
  auto caps = toy_captions();
  TransformerLMConfig lc;
  lc.d_model = 16;
  lc.layers = 1;
  lc.heads = 2;
  lc.max_positions = 24;
  CaptionSetup s;
  s.lm = std::make_unique<TransformerLM>(lc, Tokenizer::build(caps), 9);
  s.lm->freeze();
  Rng rng(21);
  for (int i = 0; i < n; ++i) {
    TrainItem it;
    it.image_id = "c" + std::to_string(i);
    it.feature = Tensor(rng.normal_matrix(1, d, 1.0f));
    it.references.push_back(make_reference(*s.lm->tokenizer(), caps[size_t(i) % caps.size()]));
    s.data.train.push_back(std::move(it));
  }
  return s;
}

}  // namespace

TEST_CASE("caption loss of a certain model is zero") {
  StubLM lm(3, 2, [](std::span<const int> h) {
    return h.size() == 1 ? std::vector<double>{0, 1, 0} : std::vector<double>{0, 0, 1};
  }, 2, 0);
  CaptionSequence ref;
  ref.token_ids = {1, 2};
  std::vector<CaptionLossItem> b{{Tensor(Matrix::Zero(1, 2)), &ref}};
  CHECK(caption_loss(lm, b).value()(0, 0) == doctest::Approx(0.0));
}

TEST_CASE("uniform LM over eight tokens, one reference of length three") {
  auto lm = StubLM::uniform(8, 4);
  CaptionSequence ref;
  ref.token_ids = {4, 5, 2};
  std::vector<CaptionLossItem> one{{Tensor(Matrix::Zero(2, 4)), &ref}};
  const double l1 = caption_loss(lm, one).value()(0, 0);
  CHECK(l1 == doctest::Approx(3 * std::log(8.0)).epsilon(1e-6));
  CHECK(l1 == doctest::Approx(6.2383).epsilon(1e-4));
  std::vector<CaptionLossItem> two{one[0], one[0]};
  CHECK(caption_loss(lm, two).value()(0, 0) == doctest::Approx(l1));
  CaptionSequence empty;
  std::vector<CaptionLossItem> bad{{Tensor(Matrix::Zero(2, 4)), &empty}};
  CHECK_THROWS_AS(caption_loss(lm, bad), ValidationError);
}

TEST_CASE("caption loss gradient reaches the prefix") {
  auto s = caption_setup(1, 4);
  Tensor e(Rng(2).normal_matrix(2, 16, 1.0f), true);
  std::vector<CaptionLossItem> b{{e, &s.data.train[0].references[0]}};
  caption_loss(*s.lm, b).backward();
  CHECK(e.has_grad());
  CHECK(e.grad().norm() > 0);
}

TEST_CASE("config defaults, text round trip and validation") {
  auto c = TrainConfig::defaults(AttackTask::kCaption);
  CHECK(c.learning_rate == 5e-5);
  CHECK(c.epochs == 6);
  CHECK(c.train_batch == 16);
  CHECK(c.eval_batch == 8);
  CHECK(c.optimizer == OptimizerKind::kAdamW);
  CHECK(c.frozen_components.contains("lm"));
  auto l = TrainConfig::defaults(AttackTask::kLabel);
  CHECK(l.learning_rate == 5e-4);
  CHECK(l.epochs == 5);
  CHECK(l.train_batch == 64);
  CHECK(l.eval_batch == 16);
  CHECK(l.optimizer == OptimizerKind::kAdam);

  c.learning_rate = 1.25e-3;
  c.prompt = "a photo of";
  c.frozen_components = {"lm", "queries"};
  auto back = TrainConfig::parse_text(c.to_text(), TrainConfig{});
  CHECK(back.to_json() == c.to_json());
  CHECK(TrainConfig::from_json(c.to_json()).to_json() == c.to_json());

  auto path = fs::temp_directory_path() / "featinv_train.cfg";
  std::ofstream(path) << "# label run\ntask = label\nlr = 0.01  # override\n";
  auto loaded = TrainConfig::load(path);
  CHECK(loaded.task == AttackTask::kLabel);
  CHECK(loaded.learning_rate == 0.01);
  CHECK(loaded.train_batch == 64);

  CHECK_THROWS_AS(TrainConfig::parse_text("bogus = 1", {}), ValidationError);
  CHECK_THROWS_AS(TrainConfig::parse_text("epochs = two", {}), ValidationError);
  CHECK_THROWS_AS(TrainConfig::parse_text("frozen_components = bridge", {}), ValidationError);
  CHECK_THROWS_AS(TrainConfig::parse_text("frozen_components = lm,wings", {}), ValidationError);
  CHECK_NOTHROW(TrainConfig::parse_text("task = label\nfrozen_components =", {}));
}

TEST_CASE("first Adam step moves each weight by the learning rate") {
  Tensor w(Matrix::Constant(1, 3, 1.0f), true);
  Optimizer opt({{"w", w}}, OptimizerKind::kAdam, 0.1, 0.9, 0.999, 1e-8, 0.0);
  w.grad_mut() = Matrix(1, 3);
  w.grad_mut() << 2.0f, -0.5f, 0.0f;
  opt.step();
  CHECK(w.value()(0, 0) == doctest::Approx(0.9));
  CHECK(w.value()(0, 1) == doctest::Approx(1.1));
  CHECK(w.value()(0, 2) == doctest::Approx(1.0));

  Tensor u(Matrix::Constant(1, 1, 2.0f), true);
  Optimizer adamw({{"u", u}}, OptimizerKind::kAdamW, 0.1, 0.9, 0.999, 1e-8, 0.5);
  u.grad_mut() = Matrix::Constant(1, 1, 1.0f);
  adamw.step();
  CHECK(u.value()(0, 0) == doctest::Approx(2.0 * (1 - 0.05) - 0.1));
}

TEST_CASE("gradient clipping rescales to the max norm") {
  Tensor a(Matrix::Zero(1, 2), true), b(Matrix::Zero(1, 1), true);
  a.grad_mut() = Matrix(1, 2);
  a.grad_mut() << 3.0f, 0.0f;
  b.grad_mut() = Matrix::Constant(1, 1, 4.0f);
  Optimizer opt({{"a", a}, {"b", b}}, OptimizerKind::kAdam, 0.1, 0.9, 0.999, 1e-8, 0.0);
  CHECK(opt.clip_grad_norm(1.0) == doctest::Approx(5.0));
  CHECK(a.grad()(0, 0) == doctest::Approx(0.6).epsilon(1e-5));
  CHECK(b.grad()(0, 0) == doctest::Approx(0.8).epsilon(1e-5));
  CHECK(opt.clip_grad_norm(1.0) == doctest::Approx(1.0).epsilon(1e-5));
}

TEST_CASE("separable labels reach 100% train top-1 within five epochs") {
  auto data = separable(2048, 8, 4);
  REQUIRE(perceptron_separates(data));
  auto mc = label_model_config(8, 2);
  mc.d_prime = 1024;
  InversionModel model(mc);
  auto cfg = TrainConfig::defaults(AttackTask::kLabel);
  auto report = train(model, nullptr, data, cfg);
  REQUIRE(report.train_top1.size() == 5);
  CHECK(report.train_top1.back() == 100.0);
  for (double l : report.epoch_loss) {
    CHECK(std::isfinite(l));
    CHECK(l >= 0);
  }
}

TEST_CASE("zero epochs leave parameters bit-identical") {
  auto data = separable(32, 8, 1);
  InversionModel model(label_model_config(8, 2));
  const auto before = hash_params(model.params());
  auto cfg = TrainConfig::defaults(AttackTask::kLabel);
  cfg.epochs = 0;
  auto r = train(model, nullptr, data, cfg);
  CHECK(r.epoch_loss.empty());
  CHECK(hash_params(model.params()) == before);
}

TEST_CASE("empty data, NaN features and mismatched LMs are rejected") {
  InversionModel model(label_model_config(8, 2));
  auto cfg = TrainConfig::defaults(AttackTask::kLabel);
  CHECK_THROWS_AS(train(model, nullptr, TrainData{}, cfg), ValidationError);
  auto data = separable(8, 8, 2);
  data.train[3].feature.value_mut()(0, 1) = std::nanf("");
  CHECK_THROWS_AS(train(model, nullptr, data, cfg), NumericError);
  auto bad_label = separable(8, 8, 2);
  bad_label.train[0].label = -1;
  CHECK_THROWS_AS(train(model, nullptr, bad_label, cfg), ValidationError);

  auto s = caption_setup(4, 6);
  InversionModel cap(caption_model_config(6, 12));
  CHECK_THROWS_AS(train(cap, s.lm.get(), s.data, TrainConfig::defaults(AttackTask::kCaption)), ShapeError);
  CHECK_THROWS_AS(train(cap, nullptr, s.data, TrainConfig::defaults(AttackTask::kCaption)), ValidationError);
  CHECK_THROWS_AS(train(model, nullptr, s.data, TrainConfig::defaults(AttackTask::kCaption)), ValidationError);
}

TEST_CASE("caption overfit, frozen LM and seeded determinism") {
  auto s = caption_setup(16, 6);
  const auto lm_hash = hash_params(s.lm->params());
  auto cfg = TrainConfig::defaults(AttackTask::kCaption);
  cfg.learning_rate = 3e-3;
  cfg.epochs = 30;
  cfg.train_batch = 4;
  cfg.seed = 8;
  InversionModel a(caption_model_config(6, 16)), b(caption_model_config(6, 16));
  const auto init_hash = hash_params(a.params());
  auto ra = train(a, s.lm.get(), s.data, cfg);
  auto rb = train(b, s.lm.get(), s.data, cfg);
  CHECK(hash_params(s.lm->params()) == lm_hash);
  for (auto& [n, t] : s.lm->params()) CHECK_FALSE(t.requires_grad());
  CHECK(hash_params(a.params()) != init_hash);
  CHECK(hash_params(a.params()) == hash_params(b.params()));
  CHECK(ra.epoch_loss == rb.epoch_loss);
  CHECK(ra.epoch_loss.back() < ra.epoch_loss.front());
  cfg.seed = 9;
  InversionModel c(caption_model_config(6, 16));
  train(c, s.lm.get(), s.data, cfg);
  CHECK(hash_params(c.params()) != hash_params(a.params()));
}

TEST_CASE("frozen components are not updated") {
  auto s = caption_setup(4, 6);
  auto cfg = TrainConfig::defaults(AttackTask::kCaption);
  cfg.epochs = 2;
  cfg.learning_rate = 1e-2;
  cfg.frozen_components = {"lm", "queries", "bridge"};
  InversionModel m(caption_model_config(6, 16));
  auto pick = [&](const std::string& prefix) {
    NamedParams out;
    for (auto& [n, t] : m.params())
      if (n.rfind(prefix, 0) == 0) out.emplace_back(n, t);
    return hash_params(out);
  };
  const auto q = pick("queries."), br = pick("bridge."), pr = pick("projection.");
  train(m, s.lm.get(), s.data, cfg);
  CHECK(pick("queries.") == q);
  CHECK(pick("bridge.") == br);
  CHECK(pick("projection.") != pr);
  for (auto& [n, t] : m.params()) CHECK(t.requires_grad());
}

TEST_CASE("checkpoints are written per epoch and resume reproduces a straight run") {
  auto data = separable(64, 8, 6);
  data.eval = separable(16, 8, 7).train;
  auto cfg = TrainConfig::defaults(AttackTask::kLabel);
  cfg.train_batch = 16;
  cfg.epochs = 4;

  InversionModel straight(label_model_config(8, 2));
  auto dir1 = temp_dir("straight");
  TrainOptions o1;
  o1.out_dir = dir1;
  int calls = 0;
  o1.on_epoch = [&](int, double, double) { ++calls; };
  auto r1 = train(straight, nullptr, data, cfg, o1);
  CHECK(calls == 4);
  CHECK(fs::exists(dir1 / "last" / "meta.json"));
  CHECK(fs::exists(dir1 / "best" / "model.safetensors"));
  CHECK(fs::exists(dir1 / "train_config.txt"));
  CHECK(fs::exists(dir1 / "loss_report.json"));
  CHECK(TrainConfig::load(dir1 / "train_config.txt").to_json() == cfg.to_json());
  nlohmann::json meta;
  auto reloaded = load_model(dir1 / "last", &meta);
  CHECK(meta["epoch"] == 4);
  CHECK(hash_params(reloaded.params()) == hash_params(straight.params()));
  nlohmann::json best_meta;
  load_model(dir1 / "best", &best_meta);
  CHECK(best_meta["epoch"] == r1.best_epoch);

  InversionModel resumed(label_model_config(8, 2));
  auto dir2 = temp_dir("resumed");
  TrainOptions o2;
  o2.out_dir = dir2;
  auto half = cfg;
  half.epochs = 2;
  train(resumed, nullptr, data, half, o2);
  InversionModel fresh(label_model_config(8, 2));
  o2.resume = true;
  auto r2 = train(fresh, nullptr, data, cfg, o2);
  CHECK(r2.start_epoch == 2);
  CHECK(r2.epoch_loss == r1.epoch_loss);
  CHECK(hash_params(fresh.params()) == hash_params(straight.params()));

  auto other = label_model_config(8, 3);
  InversionModel wrong(other);
  CHECK_THROWS_AS(train(wrong, nullptr, data, cfg, o2), ValidationError);
}

TEST_CASE("language model pretraining lowers the loss") {
  auto caps = toy_captions();
  TransformerLMConfig lc;
  lc.d_model = 16;
  lc.layers = 1;
  lc.heads = 2;
  lc.max_positions = 16;
  TransformerLM lm(lc, Tokenizer::build(caps), 1);
  LMPretrainConfig pc;
  pc.epochs = 15;
  pc.batch = 4;
  auto losses = pretrain_lm(lm, caps, pc);
  REQUIRE(losses.size() == 15);
  CHECK(losses.back() < 0.5 * losses.front());
}
