// Copyright 2026 The featinv Authors
// SPDX-License-Identifier: Apache-2.0

#include "featinv/metrics.hpp"

#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "featinv/error.hpp"
#include "featinv/rng.hpp"
#include "featinv/text.hpp"

namespace featinv {

namespace fs = std::filesystem;

Words metric_tokens(std::string_view text) { return tokenize_words(text); }

namespace {

using Counts = std::map<Words, std::size_t>;

Counts ngram_counts(const Words& w, int n) {
  Counts c;
  const auto k = static_cast<std::size_t>(n);
  for (std::size_t i = 0; i + k <= w.size(); ++i) ++c[Words(w.begin() + i, w.begin() + i + k)];
  return c;
}

// Clipped matches and candidate n-gram total at order n.
std::pair<double, double> clipped(const Words& cand, std::span<const Words> refs, int n) {
  const Counts cc = ngram_counts(cand, n);
  Counts max_ref;
  for (const auto& r : refs) {
    for (const auto& [g, c] : ngram_counts(r, n)) max_ref[g] = std::max(max_ref[g], c);
  }
  double m = 0, total = 0;
  for (const auto& [g, c] : cc) {
    total += static_cast<double>(c);
    auto it = max_ref.find(g);
    if (it != max_ref.end()) m += static_cast<double>(std::min(c, it->second));
  }
  return {m, total};
}

std::size_t closest_ref_length(std::size_t c, std::span<const Words> refs) {
  std::size_t best = refs[0].size();
  for (const auto& r : refs) {
    const auto d = [c](std::size_t x) { return x > c ? x - c : c - x; };
    if (d(r.size()) < d(best) || (d(r.size()) == d(best) && r.size() < best)) best = r.size();
  }
  return best;
}

double combine(std::span<const double> matches, std::span<const double> totals, double c, double r) {
  double log_sum = 0;
  for (std::size_t k = 0; k < matches.size(); ++k) {
    const double m = matches[k] > 0 ? matches[k] : kBleuEpsilon;
    const double t = totals[k] > 0 ? totals[k] : 1.0;
    log_sum += std::log(m / t);
  }
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  return bp * std::exp(log_sum / static_cast<double>(matches.size()));
}

void check_item(const Words& cand, std::span<const Words> refs, const char* what) {
  if (cand.empty()) throw ValidationError(std::string(what) + ": empty candidate");
  if (refs.empty()) throw ValidationError(std::string(what) + ": no references");
}

}  // namespace

double bleu_n(const Words& candidate, std::span<const Words> references, int n) {
  check_item(candidate, references, "bleu");
  if (n < 1) throw ValidationError("bleu order must be >= 1");
  std::vector<double> m, t;
  for (int k = 1; k <= n; ++k) {
    auto [mk, tk] = clipped(candidate, references, k);
    m.push_back(mk);
    t.push_back(tk);
  }
  return combine(m, t, static_cast<double>(candidate.size()),
                 static_cast<double>(closest_ref_length(candidate.size(), references)));
}

std::vector<double> corpus_bleu(std::span<const Words> candidates, std::span<const std::vector<Words>> references,
                                int max_order) {
  if (candidates.empty() || candidates.size() != references.size()) {
    throw ValidationError("bleu: candidates and references must be non-empty and aligned");
  }
  if (max_order < 1) throw ValidationError("bleu order must be >= 1");
  std::vector<double> m(static_cast<std::size_t>(max_order)), t(m.size());
  double c = 0, r = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    check_item(candidates[i], references[i], "bleu");
    for (int k = 1; k <= max_order; ++k) {
      auto [mk, tk] = clipped(candidates[i], references[i], k);
      m[static_cast<std::size_t>(k - 1)] += mk;
      t[static_cast<std::size_t>(k - 1)] += tk;
    }
    c += static_cast<double>(candidates[i].size());
    r += static_cast<double>(closest_ref_length(candidates[i].size(), references[i]));
  }
  std::vector<double> out;
  for (int k = 1; k <= max_order; ++k) {
    out.push_back(combine(std::span(m).first(static_cast<std::size_t>(k)), std::span(t).first(static_cast<std::size_t>(k)), c, r));
  }
  return out;
}

std::size_t lcs_length(const Words& a, const Words& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l(const Words& candidate, std::span<const Words> references, double beta) {
  check_item(candidate, references, "rouge-l");
  double best = 0;
  for (const auto& r : references) {
    if (r.empty()) continue;
    const double l = static_cast<double>(lcs_length(candidate, r));
    if (l == 0) continue;
    const double p = l / static_cast<double>(candidate.size());
    const double rc = l / static_cast<double>(r.size());
    const double b2 = beta * beta;
    best = std::max(best, (1 + b2) * p * rc / (rc + b2 * p));
  }
  return best;
}

double corpus_rouge_l(std::span<const Words> candidates, std::span<const std::vector<Words>> references, double beta) {
  if (candidates.empty() || candidates.size() != references.size()) {
    throw ValidationError("rouge-l: candidates and references must be non-empty and aligned");
  }
  double s = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) s += rouge_l(candidates[i], references[i], beta);
  return s / static_cast<double>(candidates.size());
}

// ------------------------------------------------------------------ CIDEr

CiderScorer::CiderScorer(std::span<const std::vector<Words>> references, int max_order)
    : n_(max_order), refs_(references.begin(), references.end()) {
  if (refs_.empty()) throw ValidationError("cider: empty reference corpus");
  if (n_ < 1) throw ValidationError("cider order must be >= 1");
  for (const auto& item : refs_) {
    if (item.empty()) throw ValidationError("cider: item without references");
    std::set<Words> seen;
    for (const auto& r : item) {
      for (int k = 1; k <= n_; ++k) {
        for (const auto& [g, c] : ngram_counts(r, k)) seen.insert(g);
      }
    }
    for (const auto& g : seen) ++df_[g];
  }
  for (const auto& item : refs_) {
    auto& vs = ref_vecs_.emplace_back();
    for (const auto& r : item) vs.push_back(tfidf(r));
  }
}

double CiderScorer::idf(const Words& ngram) const {
  auto it = df_.find(ngram);
  const double df = it == df_.end() ? 1.0 : static_cast<double>(it->second);
  return std::log(static_cast<double>(refs_.size()) / df);
}

std::vector<CiderScorer::Vec> CiderScorer::tfidf(const Words& w) const {
  std::vector<Vec> out;
  for (int k = 1; k <= n_; ++k) {
    const Counts c = ngram_counts(w, k);
    double total = 0;
    for (const auto& [g, n] : c) total += static_cast<double>(n);
    Vec v;
    for (const auto& [g, n] : c) v[g] = static_cast<double>(n) / total * idf(g);
    out.push_back(std::move(v));
  }
  return out;
}

namespace {

double vec_cosine(const std::map<Words, double>& a, const std::map<Words, double>& b) {
  double dot = 0, na = 0, nb = 0;
  for (const auto& [g, x] : a) {
    na += x * x;
    auto it = b.find(g);
    if (it != b.end()) dot += x * it->second;
  }
  for (const auto& [g, y] : b) nb += y * y;
  if (na == 0 || nb == 0) return 0.0;
  return dot / std::sqrt(na * nb);
}

}  // namespace

double CiderScorer::score(std::size_t item, const Words& candidate) const {
  if (item >= refs_.size()) throw ValidationError("cider: item index out of range");
  const auto cv = tfidf(candidate);
  double total = 0;
  for (int k = 0; k < n_; ++k) {
    double s = 0;
    for (const auto& rv : ref_vecs_[item]) s += vec_cosine(cv[static_cast<std::size_t>(k)], rv[static_cast<std::size_t>(k)]);
    total += s / static_cast<double>(ref_vecs_[item].size());
  }
  return 10.0 * total / static_cast<double>(n_);
}

double CiderScorer::corpus(std::span<const Words> candidates) const {
  if (candidates.size() != refs_.size()) throw ValidationError("cider: candidate count does not match the corpus");
  double s = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) s += score(i, candidates[i]);
  return s / static_cast<double>(candidates.size());
}

double cider(std::span<const Words> candidates, std::span<const std::vector<Words>> references, int max_order) {
  return CiderScorer(references, max_order).corpus(candidates);
}

// -------------------------------------------------------------- embedders

std::vector<std::vector<float>> HashingEmbedder::embed(std::span<const std::string> texts) {
  std::vector<std::vector<float>> out;
  for (const auto& t : texts) {
    std::vector<float> v(static_cast<std::size_t>(dim_), 0.0f);
    const Words w = metric_tokens(t);
    auto add = [&](const std::string& key, float weight) {
      const std::uint64_t h = splitmix64(hash_string(key) ^ seed_);
      v[static_cast<std::size_t>(h % static_cast<std::uint64_t>(dim_))] += (h >> 63) ? -weight : weight;
    };
    for (std::size_t i = 0; i < w.size(); ++i) {
      add(w[i], 1.0f);
      if (i + 1 < w.size()) add(w[i] + " " + w[i + 1], 0.5f);
    }
    out.push_back(std::move(v));
  }
  return out;
}

std::vector<std::vector<float>> OneHotEmbedder::embed(std::span<const std::string> texts) {
  std::vector<std::vector<float>> out;
  for (const auto& t : texts) {
    std::vector<float> v(static_cast<std::size_t>(capacity_), 0.0f);
    for (const auto& w : metric_tokens(t)) {
      auto [it, inserted] = vocab_.emplace(w, static_cast<int>(vocab_.size()));
      if (it->second >= capacity_) throw ValidationError("one-hot embedder vocabulary is full");
      v[static_cast<std::size_t>(it->second)] += 1.0f;
    }
    out.push_back(std::move(v));
  }
  return out;
}

namespace {

fs::path scratch_dir() {
  static std::atomic<int> counter{0};
  auto d = fs::temp_directory_path() /
           ("featinv_" + std::to_string(::getpid()) + "_" + std::to_string(counter.fetch_add(1)));
  fs::create_directories(d);
  return d;
}

std::string shell_quote(const std::string& s) {
  std::string out = "'";
  for (char c : s) out += c == '\'' ? std::string("'\\''") : std::string(1, c);
  return out + "'";
}

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  std::replace(s.begin(), s.end(), '\t', ' ');
  return s;
}

std::vector<std::string> run_and_read(const std::string& command, const fs::path& out) {
  const int rc = std::system(command.c_str());
  if (rc != 0) throw Error("external command failed (status " + std::to_string(rc) + "): " + command);
  std::ifstream f(out);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(f, line)) lines.push_back(line);
  return lines;
}

}  // namespace

std::vector<std::vector<float>> CommandEmbedder::embed(std::span<const std::string> texts) {
  const auto dir = scratch_dir();
  {
    std::ofstream in(dir / "texts.txt");
    for (const auto& t : texts) in << one_line(t) << "\n";
  }
  const auto lines = run_and_read(command_ + " < " + shell_quote((dir / "texts.txt").string()) + " > " +
                                      shell_quote((dir / "vectors.txt").string()),
                                  dir / "vectors.txt");
  fs::remove_all(dir);
  if (lines.size() != texts.size()) {
    throw FormatError("embedder returned " + std::to_string(lines.size()) + " vectors for " +
                      std::to_string(texts.size()) + " texts");
  }
  std::vector<std::vector<float>> out;
  for (const auto& l : lines) {
    std::istringstream s(l);
    std::vector<float> v;
    float x;
    while (s >> x) v.push_back(x);
    if (!out.empty() && v.size() != out.front().size()) throw FormatError("embedder returned ragged vectors");
    out.push_back(std::move(v));
  }
  return out;
}

double cosine_similarity(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw ShapeError("cosine: vector widths differ");
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  if (na == 0 || nb == 0) return 0.0;
  return std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
}

std::vector<std::int64_t> similarity_histogram(std::span<const double> sims) {
  const int bins = static_cast<int>(std::lround(2.0 / CosineResult::kBinWidth));
  std::vector<std::int64_t> h(static_cast<std::size_t>(bins), 0);
  for (double s : sims) {
    int b = static_cast<int>(std::floor((std::clamp(s, -1.0, 1.0) + 1.0) / CosineResult::kBinWidth + 1e-9));
    ++h[static_cast<std::size_t>(std::clamp(b, 0, bins - 1))];
  }
  return h;
}

CosineResult cosine_success_rate(std::span<const std::string> candidates,
                                 std::span<const std::vector<std::string>> references, TextEmbedder& embedder,
                                 double threshold) {
  if (candidates.empty() || candidates.size() != references.size()) {
    throw ValidationError("cosine: candidates and references must be non-empty and aligned");
  }
  std::vector<std::string> all(candidates.begin(), candidates.end());
  std::vector<std::size_t> offset;
  for (const auto& refs : references) {
    if (refs.empty()) throw ValidationError("cosine: item without references");
    offset.push_back(all.size());
    all.insert(all.end(), refs.begin(), refs.end());
  }
  const auto vecs = embedder.embed(all);
  if (vecs.size() != all.size()) throw FormatError("embedder returned the wrong number of vectors");
  CosineResult r;
  r.threshold = threshold;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    double best = -1.0;
    for (std::size_t k = 0; k < references[i].size(); ++k) best = std::max(best, cosine_similarity(vecs[i], vecs[offset[i] + k]));
    r.similarities.push_back(best);
    hits += best > threshold;
  }
  r.rate = 100.0 * static_cast<double>(hits) / static_cast<double>(candidates.size());
  r.histogram = similarity_histogram(r.similarities);
  return r;
}

std::vector<double> run_external_scorer(const ExternalScorer& scorer, std::span<const std::string> candidates,
                                        std::span<const std::vector<std::string>> references) {
  if (candidates.size() != references.size()) throw ValidationError("external scorer: inputs are not aligned");
  const auto dir = scratch_dir();
  {
    std::ofstream c(dir / "candidates.txt"), r(dir / "references.txt");
    for (std::size_t i = 0; i < candidates.size(); ++i) {
      c << one_line(candidates[i]) << "\n";
      for (std::size_t k = 0; k < references[i].size(); ++k) r << (k ? "\t" : "") << one_line(references[i][k]);
      r << "\n";
    }
  }
  const auto lines = run_and_read(scorer.command + " " + shell_quote((dir / "candidates.txt").string()) + " " +
                                      shell_quote((dir / "references.txt").string()) + " > " +
                                      shell_quote((dir / "scores.txt").string()),
                                  dir / "scores.txt");
  fs::remove_all(dir);
  if (lines.size() != candidates.size()) {
    throw FormatError("scorer '" + scorer.name + "' returned " + std::to_string(lines.size()) + " scores for " +
                      std::to_string(candidates.size()) + " items");
  }
  std::vector<double> out;
  for (const auto& l : lines) {
    try {
      out.push_back(std::stod(l));
    } catch (const std::exception&) {
      throw FormatError("scorer '" + scorer.name + "' printed a non-numeric line: " + l);
    }
  }
  return out;
}

// ----------------------------------------------------------------- report

void MetricConfig::validate() const {
  if (!(cosine_threshold > 0 && cosine_threshold < 1)) throw ValidationError("cosine threshold must be in (0, 1)");
  if (max_order < 1 || cider_order < 1) throw ValidationError("n-gram orders must be >= 1");
  if (!(rouge_beta > 0)) throw ValidationError("rouge beta must be positive");
}

MetricReport evaluate_captions(std::span<const std::string> candidates,
                               std::span<const std::vector<std::string>> references, const MetricConfig& cfg,
                               TextEmbedder* embedder) {
  cfg.validate();
  if (candidates.empty() || candidates.size() != references.size()) {
    throw ValidationError("need one reference set per candidate");
  }
  std::vector<Words> cw;
  std::vector<std::vector<Words>> rw;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    cw.push_back(metric_tokens(candidates[i]));
    // An empty generation scores zero rather than aborting the report.
    if (cw.back().empty()) cw.back().push_back("");
    auto& refs = rw.emplace_back();
    for (const auto& r : references[i]) {
      if (auto t = metric_tokens(r); !t.empty()) refs.push_back(std::move(t));
    }
    if (refs.empty()) throw ValidationError("item " + std::to_string(i) + " has no non-empty reference");
  }
  MetricReport rep;
  rep.bleu = corpus_bleu(cw, rw, cfg.max_order);
  rep.rouge_l = corpus_rouge_l(cw, rw, cfg.rouge_beta);
  const CiderScorer cs(rw, cfg.cider_order);
  for (std::size_t i = 0; i < cw.size(); ++i) {
    ItemScores s;
    for (int k = 1; k <= cfg.max_order; ++k) s.bleu.push_back(bleu_n(cw[i], rw[i], k));
    s.rouge_l = rouge_l(cw[i], rw[i], cfg.rouge_beta);
    s.cider = cs.score(i, cw[i]);
    rep.cider += s.cider;
    rep.per_item.push_back(std::move(s));
  }
  rep.cider /= static_cast<double>(cw.size());
  if (embedder) {
    rep.cosine = cosine_success_rate(candidates, references, *embedder, cfg.cosine_threshold);
    for (std::size_t i = 0; i < cw.size(); ++i) rep.per_item[i].cosine = rep.cosine->similarities[i];
  } else {
    rep.cosine_unavailable = "no embedder configured";
  }
  for (const auto& ext : cfg.external) {
    const auto scores = run_external_scorer(ext, candidates, references);
    double sum = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      rep.per_item[i].external[ext.name] = scores[i];
      sum += scores[i];
    }
    rep.external[ext.name] = sum / static_cast<double>(scores.size());
  }
  return rep;
}

nlohmann::json MetricReport::to_json() const {
  nlohmann::json j;
  for (std::size_t k = 0; k < bleu.size(); ++k) j["bleu" + std::to_string(k + 1)] = bleu[k];
  j["rouge_l"] = rouge_l;
  j["cider"] = cider;
  if (cosine) {
    j["cosine_success_rate"] = cosine->rate;
    j["cosine_threshold"] = cosine->threshold;
    j["cosine_histogram"] = cosine->histogram;
  } else {
    j["cosine_success_rate"] = nullptr;
    j["cosine_unavailable"] = cosine_unavailable;
  }
  for (const auto& [k, v] : external) j["external"][k] = v;
  nlohmann::json items = nlohmann::json::array();
  for (const auto& s : per_item) {
    nlohmann::json it{{"bleu", s.bleu}, {"rouge_l", s.rouge_l}, {"cider", s.cider}};
    if (s.cosine) it["cosine"] = *s.cosine;
    for (const auto& [k, v] : s.external) it["external"][k] = v;
    items.push_back(std::move(it));
  }
  j["per_item"] = std::move(items);
  return j;
}

std::string MetricReport::to_text() const {
  std::ostringstream o;
  o.setf(std::ios::fixed);
  o.precision(4);
  for (std::size_t k = 0; k < bleu.size(); ++k) o << "BLEU-" << k + 1 << "\t" << bleu[k] << "\n";
  o << "ROUGE-L\t" << rouge_l << "\nCIDEr\t" << cider << "\n";
  if (cosine) {
    o.precision(2);
    o << "cosine>" << cosine->threshold << "\t" << cosine->rate << "%\n";
  } else {
    o << "cosine\tunavailable (" << cosine_unavailable << ")\n";
  }
  o.precision(4);
  for (const auto& [k, v] : external) o << k << "\t" << v << "\n";
  return o.str();
}

}  // namespace featinv
