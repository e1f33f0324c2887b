// Copyright 2026 The featinv Authors
// SPDX-License-Identifier: Apache-2.0

#include "featinv/caption_head.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "featinv/error.hpp"
#include "featinv/safetensors.hpp"
#include "featinv/text.hpp"
#include "json.hpp"

namespace featinv {

Tokenizer::Tokenizer() : tokens_{"<pad>", "<bos>", "<eos>", "<unk>"} {
  for (int i = 0; i < size(); ++i) index_.emplace(tokens_[static_cast<std::size_t>(i)], i);
}

Tokenizer Tokenizer::build(std::span<const std::string> texts, int min_count) {
  std::map<std::string, int> counts;
  for (const auto& t : texts) {
    for (auto& w : tokenize_words(t)) ++counts[w];
  }
  std::vector<std::pair<std::string, int>> sorted(counts.begin(), counts.end());
  std::stable_sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  Tokenizer tok;
  for (const auto& [w, c] : sorted) {
    if (c < min_count || tok.index_.count(w)) continue;
    tok.index_.emplace(w, tok.size());
    tok.tokens_.push_back(w);
  }
  return tok;
}

Tokenizer Tokenizer::load(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw Error("cannot open vocabulary " + path.string());
  Tokenizer tok;
  tok.tokens_.clear();
  tok.index_.clear();
  std::string line;
  while (std::getline(f, line)) {
    if (tok.index_.count(line)) throw FormatError(path.string() + ": duplicate token '" + line + "'");
    tok.index_.emplace(line, tok.size());
    tok.tokens_.push_back(line);
  }
  if (tok.size() < 4 || tok.tokens_[0] != "<pad>" || tok.tokens_[1] != "<bos>" || tok.tokens_[2] != "<eos>" ||
      tok.tokens_[3] != "<unk>") {
    throw FormatError(path.string() + ": vocabulary must start with <pad> <bos> <eos> <unk>");
  }
  return tok;
}

void Tokenizer::save(const std::filesystem::path& path) const {
  std::ofstream f(path);
  for (const auto& t : tokens_) f << t << "\n";
  if (!f) throw Error("failed writing " + path.string());
}

const std::string& Tokenizer::token(int id) const {
  if (id < 0 || id >= size()) throw ValidationError("token id " + std::to_string(id) + " outside vocabulary");
  return tokens_[static_cast<std::size_t>(id)];
}

int Tokenizer::id(std::string_view word) const {
  auto it = index_.find(word);
  return it == index_.end() ? kUnk : it->second;
}

std::vector<int> Tokenizer::encode(std::string_view text) const {
  std::vector<int> out;
  for (const auto& w : tokenize_words(text)) out.push_back(id(w));
  return out;
}

std::string Tokenizer::decode(std::span<const int> ids) const {
  std::vector<std::string> words;
  for (int i : ids) {
    if (i == kPad || i == kBos || i == kEos) continue;
    words.push_back(token(i));
  }
  return join_words(words);
}

StubLM::StubLM(int vocab, int embed_dim, Distribution dist, int eos, int bos)
    : vocab_(vocab), dim_(embed_dim), eos_(eos), bos_(bos), dist_(std::move(dist)) {
  if (vocab < 2) throw ValidationError("stub LM needs at least two tokens");
}

StubLM StubLM::uniform(int vocab, int embed_dim) {
  return StubLM(vocab, embed_dim, [vocab](std::span<const int>) {
    return std::vector<double>(static_cast<std::size_t>(vocab), 1.0 / vocab);
  });
}

Tensor StubLM::embed(std::span<const int> ids) const {
  Matrix m = Matrix::Zero(static_cast<Index>(ids.size()), dim_);
  for (std::size_t i = 0; i < ids.size(); ++i) m(static_cast<Index>(i), ids[i] % dim_) = 1.0f;
  return Tensor(std::move(m));
}

Tensor StubLM::next_token_logits(const Tensor& prefix, std::span<const int> tokens) const {
  if (prefix.defined() && prefix.cols() != dim_) throw ShapeError("stub LM: prefix width mismatch");
  Matrix out(static_cast<Index>(tokens.size()), vocab_);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const auto p = dist_(tokens.first(t + 1));
    if (static_cast<int>(p.size()) != vocab_) throw ShapeError("stub LM distribution has the wrong size");
    for (int v = 0; v < vocab_; ++v) {
      out(static_cast<Index>(t), v) = p[static_cast<std::size_t>(v)] > 0
                                          ? static_cast<float>(std::log(p[static_cast<std::size_t>(v)]))
                                          : -std::numeric_limits<float>::infinity();
    }
  }
  return Tensor(std::move(out));
}

TransformerLM::TransformerLM(TransformerLMConfig cfg, Tokenizer tok, std::uint64_t seed)
    : cfg_(cfg), tok_(std::move(tok)), ln_f_(cfg.d_model, cfg.ln_eps) {
  if (cfg_.vocab == 0) cfg_.vocab = tok_.size();
  if (cfg_.vocab != tok_.size()) throw ValidationError("LM vocabulary size does not match its tokenizer");
  if (cfg_.d_model % cfg_.heads != 0) throw ValidationError("LM width not divisible by head count");
  Rng rng(seed);
  wte_ = Tensor(rng.normal_matrix(cfg_.vocab, cfg_.d_model, 0.02f), true);
  wpe_ = Tensor(rng.normal_matrix(cfg_.max_positions, cfg_.d_model, 0.01f), true);
  for (int i = 0; i < cfg_.layers; ++i) {
    Block b{nn::LayerNorm(cfg_.d_model, cfg_.ln_eps), nn::LayerNorm(cfg_.d_model, cfg_.ln_eps),
            nn::MultiHeadAttention(cfg_.d_model, cfg_.d_model, cfg_.heads, rng),
            nn::Linear(cfg_.d_model, 4 * cfg_.d_model, true, rng, nn::Init::kNormal002),
            nn::Linear(4 * cfg_.d_model, cfg_.d_model, true, rng, nn::Init::kNormal002)};
    blocks_.push_back(std::move(b));
  }
}

Tensor TransformerLM::embed(std::span<const int> ids) const {
  for (int i : ids) {
    if (i < 0 || i >= cfg_.vocab) throw ValidationError("token id " + std::to_string(i) + " outside vocabulary");
  }
  return ops::gather_rows(wte_, ids);
}

Tensor TransformerLM::next_token_logits(const Tensor& prefix, std::span<const int> tokens) const {
  if (prefix.defined() && prefix.cols() != cfg_.d_model) {
    throw ShapeError("LM prefix width " + std::to_string(prefix.cols()) + " does not match model width " +
                     std::to_string(cfg_.d_model));
  }
  const Index p = prefix.defined() ? prefix.rows() : 0;
  const Index n = p + static_cast<Index>(tokens.size());
  if (n > cfg_.max_positions) {
    throw ValidationError("sequence of " + std::to_string(n) + " positions exceeds LM context " +
                          std::to_string(cfg_.max_positions));
  }
  Tensor x = embed(tokens);
  if (p > 0) x = ops::concat_rows({prefix, x});
  x = ops::add(x, ops::slice_rows(wpe_, 0, n));
  const Matrix mask = nn::causal_mask(n);
  for (const auto& b : blocks_) {
    Tensor h = b.ln_1.forward(x);
    x = ops::add(x, b.attn.forward(h, h, &mask));
    x = ops::add(x, b.c_proj.forward(ops::gelu(b.c_fc.forward(b.ln_2.forward(x)))));
  }
  x = ln_f_.forward(ops::slice_rows(x, p, n - p));
  return ops::matmul_nt(x, wte_);
}

NamedParams TransformerLM::params() const {
  NamedParams p{{"wte.weight", wte_}, {"wpe.weight", wpe_}};
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const std::string pre = "h." + std::to_string(i) + ".";
    append_params(p, pre + "ln_1", blocks_[i].ln_1.params());
    append_params(p, pre + "attn", blocks_[i].attn.params());
    append_params(p, pre + "ln_2", blocks_[i].ln_2.params());
    append_params(p, pre + "mlp.c_fc", blocks_[i].c_fc.params());
    append_params(p, pre + "mlp.c_proj", blocks_[i].c_proj.params());
  }
  append_params(p, "ln_f", ln_f_.params());
  return p;
}

void TransformerLM::freeze() {
  for (auto& [n, t] : params()) t.node()->requires_grad = false;
}

void TransformerLM::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  nlohmann::json j{{"format", "featinv-lm"},        {"version", 1},           {"vocab", cfg_.vocab},
                   {"d_model", cfg_.d_model},       {"layers", cfg_.layers},  {"heads", cfg_.heads},
                   {"max_positions", cfg_.max_positions}, {"ln_eps", cfg_.ln_eps}};
  std::ofstream(dir / "config.json") << j.dump(2) << "\n";
  tok_.save(dir / "vocab.txt");
  write_safetensors(dir / "model.safetensors", to_tensor_map(params()));
}

std::unique_ptr<TransformerLM> TransformerLM::load(const std::filesystem::path& dir) {
  std::ifstream f(dir / "config.json");
  if (!f) throw Error("no language model at " + dir.string());
  const auto j = nlohmann::json::parse(f);
  if (j.value("format", "") != "featinv-lm" || j.value("version", 0) != 1) {
    throw FormatError(dir.string() + ": unsupported language model format");
  }
  TransformerLMConfig cfg;
  cfg.vocab = j.at("vocab");
  cfg.d_model = j.at("d_model");
  cfg.layers = j.at("layers");
  cfg.heads = j.at("heads");
  cfg.max_positions = j.at("max_positions");
  cfg.ln_eps = j.value("ln_eps", 1e-5f);
  auto lm = std::make_unique<TransformerLM>(cfg, Tokenizer::load(dir / "vocab.txt"), 0);
  load_params(lm->params(), read_safetensors(dir / "model.safetensors"), true);
  return lm;
}

double CaptionSequence::total_logprob() const {
  return std::accumulate(per_token_logprob.begin(), per_token_logprob.end(), 0.0);
}

CaptionSequence make_reference(const Tokenizer& tok, std::string_view text) {
  CaptionSequence c;
  c.role = Role::kGroundTruth;
  c.token_ids = tok.encode(text);
  c.token_ids.push_back(Tokenizer::kEos);
  c.text = tok.decode(c.token_ids);
  return c;
}

void DecodeConfig::validate() const {
  if (max_length < 1) throw ValidationError("max_length must be at least 1");
  if (beam_width < 1) throw ValidationError("beam_width must be at least 1");
}

std::vector<int> prompt_ids(const LanguageModel& lm, std::string_view prompt) {
  if (prompt.empty()) return {};
  const Tokenizer* tok = lm.tokenizer();
  if (!tok) throw ValidationError("a prompt needs a language model with a tokenizer");
  return tok->encode(prompt);
}

Tensor build_prefix(const LanguageModel& lm, const Tensor& e, std::span<const int> prompt) {
  if (!e.defined()) return prompt.empty() ? Tensor() : lm.embed(prompt);
  if (e.cols() != lm.embed_dim()) {
    throw ShapeError("embedding width " + std::to_string(e.cols()) + " does not match LM width " +
                     std::to_string(lm.embed_dim()));
  }
  if (prompt.empty()) return e;
  return ops::concat_rows({e, lm.embed(prompt)});
}

namespace {

double floored(double lp, std::optional<double> floor) { return floor ? std::max(lp, *floor) : lp; }

// Log-softmax of the last logits row, in double precision.
std::vector<double> last_row_logprobs(const Tensor& logits) {
  const Index last = logits.rows() - 1;
  const auto row = logits.value().row(last);
  double mx = -std::numeric_limits<double>::infinity();
  for (Index v = 0; v < row.size(); ++v) mx = std::max(mx, static_cast<double>(row(v)));
  double z = 0;
  for (Index v = 0; v < row.size(); ++v) z += std::exp(row(v) - mx);
  std::vector<double> out(static_cast<std::size_t>(row.size()));
  for (Index v = 0; v < row.size(); ++v) out[static_cast<std::size_t>(v)] = row(v) - mx - std::log(z);
  return out;
}

struct Beam {
  std::vector<int> tokens;  // BOS first
  std::vector<double> logprobs;
  double score = 0;
  bool finished = false;
};

}  // namespace

CaptionSequence generate_caption(const LanguageModel& lm, const Tensor& e, const DecodeConfig& cfg) {
  cfg.validate();
  NoGradGuard ng;
  const int eos = cfg.eos_id.value_or(lm.eos_id());
  const auto pids = prompt_ids(lm, cfg.prompt);
  const Tensor prefix = build_prefix(lm, e, pids);
  const int width = cfg.strategy == DecodeStrategy::kGreedy ? 1 : cfg.beam_width;

  std::vector<Beam> beams{Beam{{lm.bos_id()}, {}, 0.0, false}};
  for (int step = 0; step < cfg.max_length; ++step) {
    std::vector<Beam> next;
    bool any_alive = false;
    for (const auto& b : beams) {
      if (b.finished) {
        next.push_back(b);
        continue;
      }
      any_alive = true;
      const auto lp = last_row_logprobs(lm.next_token_logits(prefix, b.tokens));
      std::vector<int> order(lp.size());
      std::iota(order.begin(), order.end(), 0);
      // Stable: equal scores keep the lower token id first.
      std::stable_sort(order.begin(), order.end(), [&](int a, int c) { return lp[std::size_t(a)] > lp[std::size_t(c)]; });
      for (int r = 0; r < width && r < static_cast<int>(order.size()); ++r) {
        Beam nb = b;
        const int tok = order[static_cast<std::size_t>(r)];
        const double l = floored(lp[static_cast<std::size_t>(tok)], cfg.logprob_floor);
        nb.tokens.push_back(tok);
        nb.logprobs.push_back(l);
        nb.score += l;
        nb.finished = tok == eos;
        next.push_back(std::move(nb));
      }
    }
    if (!any_alive) break;
    std::stable_sort(next.begin(), next.end(), [](const Beam& a, const Beam& b) { return a.score > b.score; });
    if (static_cast<int>(next.size()) > width) next.resize(static_cast<std::size_t>(width));
    beams = std::move(next);
    if (std::all_of(beams.begin(), beams.end(), [](const Beam& b) { return b.finished; })) break;
  }
  const Beam& best = beams.front();
  CaptionSequence out;
  out.role = Role::kGenerated;
  out.token_ids.assign(best.tokens.begin() + 1, best.tokens.end());
  out.per_token_logprob = best.logprobs;
  if (const Tokenizer* tok = lm.tokenizer()) out.text = tok->decode(out.token_ids);
  return out;
}

double caption_log_prob(const LanguageModel& lm, const Tensor& e, const CaptionSequence& reference,
                        std::string_view prompt, std::optional<double> floor) {
  if (reference.token_ids.empty()) throw ValidationError("caption_log_prob: empty reference");
  for (int id : reference.token_ids) {
    if (id < 0 || id >= lm.vocab_size()) throw ValidationError("reference token " + std::to_string(id) + " outside vocabulary");
  }
  NoGradGuard ng;
  const auto pids = prompt_ids(lm, prompt);
  const Tensor prefix = build_prefix(lm, e, pids);
  std::vector<int> inputs{lm.bos_id()};
  inputs.insert(inputs.end(), reference.token_ids.begin(), reference.token_ids.end() - 1);
  const Tensor logits = lm.next_token_logits(prefix, inputs);
  double total = 0;
  for (Index t = 0; t < logits.rows(); ++t) {
    const auto row = logits.value().row(t);
    const double mx = row.maxCoeff();
    double z = 0;
    for (Index v = 0; v < row.size(); ++v) z += std::exp(row(v) - mx);
    const double lp = row(reference.token_ids[static_cast<std::size_t>(t)]) - mx - std::log(z);
    total += floored(lp, floor);
  }
  return total;
}

}  // namespace featinv
