// Copyright 2026 The featinv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace featinv {

using Words = std::vector<std::string>;

/// Metric tokenization: lowercase, ASCII punctuation removed, whitespace split.
Words metric_tokens(std::string_view text);

inline constexpr double kBleuEpsilon = 1e-9;

/// Sentence BLEU-n: clipped n-gram precisions (clip = max count over
/// references), zero matches replaced by epsilon, brevity penalty against the
/// closest reference length (shorter wins ties), uniform geometric mean.
double bleu_n(const Words& candidate, std::span<const Words> references, int n);

/// Corpus BLEU-1..max_order: counts and lengths are summed over items before
/// the geometric mean. Element k-1 is BLEU-k.
std::vector<double> corpus_bleu(std::span<const Words> candidates, std::span<const std::vector<Words>> references,
                                int max_order = 4);

std::size_t lcs_length(const Words& a, const Words& b);

/// LCS F-measure with recall weight beta, maximized over references.
double rouge_l(const Words& candidate, std::span<const Words> references, double beta = 1.2);

/// Mean sentence ROUGE-L.
double corpus_rouge_l(std::span<const Words> candidates, std::span<const std::vector<Words>> references,
                      double beta = 1.2);

/// TF-IDF n-gram cosine consensus. Document frequencies come from the
/// reference sets (one document per item); idf = log(|D| / df).
class CiderScorer {
 public:
  explicit CiderScorer(std::span<const std::vector<Words>> references, int max_order = 4);

  /// Per-item score, x10: mean over n of the mean cosine against item i's
  /// references.
  double score(std::size_t item, const Words& candidate) const;
  double corpus(std::span<const Words> candidates) const;
  double idf(const Words& ngram) const;
  std::size_t documents() const { return refs_.size(); }

 private:
  using Vec = std::map<Words, double>;
  std::vector<Vec> tfidf(const Words& w) const;

  int n_;
  std::vector<std::vector<Words>> refs_;
  std::map<Words, std::size_t> df_;
  std::vector<std::vector<std::vector<Vec>>> ref_vecs_;  // item, reference, order
};

double cider(std::span<const Words> candidates, std::span<const std::vector<Words>> references, int max_order = 4);

class TextEmbedder {
 public:
  virtual ~TextEmbedder() = default;
  virtual std::string name() const = 0;
  virtual std::vector<std::vector<float>> embed(std::span<const std::string> texts) = 0;
};

/// Signed feature hashing of word unigrams and bigrams. Deterministic.
class HashingEmbedder final : public TextEmbedder {
 public:
  explicit HashingEmbedder(int dim = 256, std::uint64_t seed = 0) : dim_(dim), seed_(seed) {}
  std::string name() const override { return "hashing-" + std::to_string(dim_); }
  std::vector<std::vector<float>> embed(std::span<const std::string> texts) override;

 private:
  int dim_;
  std::uint64_t seed_;
};

/// Bag of words over a vocabulary grown on first sight; texts without shared
/// words are orthogonal.
class OneHotEmbedder final : public TextEmbedder {
 public:
  explicit OneHotEmbedder(int capacity = 8192) : capacity_(capacity) {}
  std::string name() const override { return "one-hot"; }
  std::vector<std::vector<float>> embed(std::span<const std::string> texts) override;

 private:
  int capacity_;
  std::map<std::string, int> vocab_;
};

/// Runs `command` with one text per line on stdin; expects one line of
/// whitespace-separated floats per text on stdout.
class CommandEmbedder final : public TextEmbedder {
 public:
  explicit CommandEmbedder(std::string command) : command_(std::move(command)) {}
  std::string name() const override { return "command:" + command_; }
  std::vector<std::vector<float>> embed(std::span<const std::string> texts) override;

 private:
  std::string command_;
};

double cosine_similarity(std::span<const float> a, std::span<const float> b);

struct CosineResult {
  double threshold = 0.7;
  double rate = 0;  // percent
  /// Best similarity over each item's references.
  std::vector<double> similarities;
  /// 40 bins of width 0.05 over [-1, 1]; 1.0 falls in the last bin.
  std::vector<std::int64_t> histogram;

  static constexpr double kBinWidth = 0.05;
};

std::vector<std::int64_t> similarity_histogram(std::span<const double> sims);

/// Rate = 100 * |{i : sim_i > threshold}| / count.
CosineResult cosine_success_rate(std::span<const std::string> candidates,
                                 std::span<const std::vector<std::string>> references, TextEmbedder& embedder,
                                 double threshold = 0.7);

/// Subprocess scorer: invoked as `command <candidates> <references>`, where
/// the candidates file has one caption per line and the references file has
/// one line per item with references separated by tabs. Prints one score
/// per line.
struct ExternalScorer {
  std::string name;
  std::string command;
};

std::vector<double> run_external_scorer(const ExternalScorer& scorer, std::span<const std::string> candidates,
                                        std::span<const std::vector<std::string>> references);

struct MetricConfig {
  double cosine_threshold = 0.7;
  int max_order = 4;
  double rouge_beta = 1.2;
  int cider_order = 4;
  std::vector<ExternalScorer> external;

  void validate() const;
};

struct ItemScores {
  std::vector<double> bleu;  // sentence BLEU-1..max_order
  double rouge_l = 0;
  double cider = 0;
  std::optional<double> cosine;
  std::map<std::string, double> external;
};

struct MetricReport {
  std::vector<double> bleu;  // corpus BLEU-1..max_order
  double rouge_l = 0;
  double cider = 0;
  std::optional<CosineResult> cosine;
  /// Why the cosine metric is missing, when it is.
  std::string cosine_unavailable;
  std::map<std::string, double> external;
  std::vector<ItemScores> per_item;

  nlohmann::json to_json() const;
  std::string to_text() const;
};

/// Scores raw caption strings; `embedder` may be null, which omits the
/// cosine metric with an explicit marker.
MetricReport evaluate_captions(std::span<const std::string> candidates,
                               std::span<const std::vector<std::string>> references, const MetricConfig& cfg = {},
                               TextEmbedder* embedder = nullptr);

}  // namespace featinv
