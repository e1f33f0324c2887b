#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "featinv/error.hpp"
#include "featinv/metrics.hpp"
#include "featinv/text.hpp"
#include "../support/metric_oracles.hpp"
#include "../support/random_captions.hpp"

using namespace featinv;

namespace {
Words w(const char* s) { return metric_tokens(s); }
}  // namespace

TEST_CASE("bleu: identity, disjoint and brevity examples") {
  std::vector<Words> ref{w("the cat sat on the mat")};
  for (int n = 1; n <= 4; ++n) CHECK(bleu_n(ref[0], ref, n) == doctest::Approx(1.0));
  std::vector<Words> other{w("xx yy zz qq")};
  CHECK(bleu_n(w("aa bb cc dd"), other, 4) < 1e-8);
  std::vector<Words> down{w("the cat sat down")};
  CHECK(bleu_n(w("the cat sat"), down, 1) == doctest::Approx(std::exp(1.0 - 4.0 / 3.0)).epsilon(1e-12));
  // Order above the candidate length is smoothed, not an error.
  CHECK(bleu_n(w("cat"), down, 4) >= 0.0);
  CHECK_THROWS_AS(bleu_n(Words{}, down, 1), ValidationError);
}

TEST_CASE("bleu clips against the per-reference maximum") {
  std::vector<Words> refs{w("the cat"), w("the the dog")};
  // "the" x3 clipped to 2 (second reference), 3 candidate unigrams.
  const double p1 = 2.0 / 3.0;
  CHECK(bleu_n(w("the the the"), refs, 1) == doctest::Approx(p1));
}

TEST_CASE("rouge-l: identity and hand example") {
  std::vector<Words> same{w("a b c d")};
  CHECK(rouge_l(same[0], same) == doctest::Approx(1.0));
  std::vector<Words> ref{w("a x c")};
  CHECK(lcs_length(w("a b c"), ref[0]) == 2);
  CHECK(rouge_l(w("a b c"), ref) == doctest::Approx(2.0 / 3.0));
  std::vector<Words> two{w("q r s"), w("a b x")};
  CHECK(rouge_l(w("a b c"), two) == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("cider: hand TF-IDF corpus") {
  // Unigram "a" occurs in both documents (idf 0); everything else has idf ln 2.
  std::vector<std::vector<Words>> refs{{w("a b")}, {w("a c")}};
  CiderScorer cs(refs, 2);
  CHECK(cs.idf(w("a")) == doctest::Approx(0.0));
  CHECK(cs.idf(w("b")) == doctest::Approx(std::log(2.0)));
  CHECK(cs.score(0, w("a b")) == doctest::Approx(10.0));
  CHECK(cs.score(1, w("a b")) == doctest::Approx(0.0));
  std::vector<Words> cands{w("a b"), w("a b")};
  CHECK(cs.corpus(cands) == doctest::Approx(5.0));
  // Order 4 on two-word captions: orders 3 and 4 contribute zero vectors.
  CHECK(CiderScorer(refs, 4).score(0, w("a b")) == doctest::Approx(5.0));
  std::vector<std::vector<Words>> none;
  CHECK_THROWS_AS(CiderScorer(none, 4), ValidationError);
}

TEST_CASE("cider identity reaches the corpus maximum") {
  std::vector<std::vector<Words>> refs{{w("one red ball rolls")}, {w("two blue cats nap")}, {w("three green dogs run")}};
  std::vector<Words> cands{refs[0][0], refs[1][0], refs[2][0]};
  CHECK(cider(cands, refs) == doctest::Approx(10.0));
}

TEST_CASE("metrics agree with the brute-force oracles") {
  Rng rng(2024);
  std::vector<Words> cands;
  std::vector<std::vector<Words>> refs;
  for (int i = 0; i < 50; ++i) {
    auto c = oracle::random_words(rng, 1, 10);
    std::vector<Words> r;
    const int nr = 1 + int(rng.below(5));
    for (int k = 0; k < nr; ++k) r.push_back(oracle::random_words(rng, 1, 12));
    for (int n = 1; n <= 4; ++n) CHECK(bleu_n(c, r, n) == doctest::Approx(oracle::bleu(c, r, n)).epsilon(1e-6));
    CHECK(rouge_l(c, r) == doctest::Approx(oracle::rouge(c, r)).epsilon(1e-6));
    cands.push_back(c);
    refs.push_back(r);
  }
  oracle::BleuCounts acc;
  for (size_t i = 0; i < cands.size(); ++i) oracle::accumulate(acc, cands[i], refs[i], 4);
  const auto cb = corpus_bleu(cands, refs, 4);
  for (int n = 1; n <= 4; ++n) CHECK(cb[size_t(n - 1)] == doctest::Approx(oracle::bleu_from(acc, n)).epsilon(1e-6));
  CHECK(cider(cands, refs) == doctest::Approx(oracle::cider(cands, refs)).epsilon(1e-6));
}

TEST_CASE("metric ranges under fuzzing") {
  Rng rng(7);
  for (int t = 0; t < 1000; ++t) {
    auto c = oracle::random_words(rng, 1, 8);
    std::vector<Words> r{oracle::random_words(rng, 1, 8), oracle::random_words(rng, 1, 8)};
    for (int n = 1; n <= 4; ++n) {
      const double b = bleu_n(c, r, n);
      CHECK(b >= 0.0);
      CHECK(b <= 1.0 + 1e-12);
    }
    const double rl = rouge_l(c, r);
    CHECK(rl >= 0.0);
    CHECK(rl <= 1.0 + 1e-12);
    std::vector<std::vector<Words>> corpus{r};
    std::vector<Words> cs{c};
    CHECK(cider(cs, corpus) >= 0.0);
  }
}

TEST_CASE("cosine success rate") {
  std::vector<std::string> cands{"a red circle", "a blue square", "zz"};
  std::vector<std::vector<std::string>> same{{"a red circle"}, {"a blue square"}, {"zz"}};
  HashingEmbedder h;
  auto r = cosine_success_rate(cands, same, h);
  CHECK(r.rate == 100.0);
  CHECK(r.histogram.size() == 40);
  CHECK(r.histogram.back() == 3);

  OneHotEmbedder oh;
  std::vector<std::string> left{"alpha beta", "gamma"};
  std::vector<std::vector<std::string>> right{{"delta"}, {"epsilon zeta"}};
  CHECK(cosine_success_rate(left, right, oh).rate == 0.0);

  Rng rng(5);
  std::vector<std::string> c2;
  std::vector<std::vector<std::string>> r2;
  for (int i = 0; i < 200; ++i) {
    c2.push_back(join_words(oracle::random_words(rng, 2, 8)));
    r2.push_back({join_words(oracle::random_words(rng, 2, 8))});
  }
  double prev = 101;
  std::int64_t total = 0;
  for (double th = 0.05; th < 1.0; th += 0.05) {
    auto res = cosine_success_rate(c2, r2, h, th);
    CHECK(res.rate <= prev);
    CHECK(res.rate >= 0.0);
    prev = res.rate;
    total = 0;
    for (auto v : res.histogram) total += v;
  }
  CHECK(total == 200);
  CHECK(similarity_histogram(std::vector<double>{-1.0, 0.0, 0.049, 0.05, 1.0}) ==
        [] {
          std::vector<std::int64_t> h(40, 0);
          h[0] = 1;
          h[20] = 2;
          h[21] = 1;
          h[39] = 1;
          return h;
        }());
}

TEST_CASE("command embedder and external scorer contracts") {
  CommandEmbedder ce("awk '{print NF, length($0)}'");
  std::vector<std::string> texts{"a b c", "hello"};
  auto v = ce.embed(texts);
  REQUIRE(v.size() == 2);
  CHECK(v[0] == std::vector<float>{3, 5});
  CHECK(v[1] == std::vector<float>{1, 5});

  auto script = std::filesystem::temp_directory_path() / "featinv_scorer.sh";
  std::ofstream(script) << "#!/bin/sh\n# candidate word count times reference count\n"
                        << "awk -F'\\t' 'NR==FNR {n[FNR]=NF; next} {c=split($0,a,\" \"); print c*n[FNR]}' \"$2\" \"$1\"\n";
  ExternalScorer sc{"wordcount", "sh " + script.string()};
  std::vector<std::string> cands{"one two", "three"};
  std::vector<std::vector<std::string>> refs{{"x", "y y"}, {"z"}};
  CHECK(run_external_scorer(sc, cands, refs) == std::vector<double>{4, 1});
  MetricConfig cfg;
  cfg.external.push_back(sc);
  auto rep = evaluate_captions(cands, refs, cfg);
  CHECK(rep.external.at("wordcount") == doctest::Approx(2.5));
  CHECK_THROWS_AS(run_external_scorer({"bad", "false"}, cands, refs), Error);
}

TEST_CASE("report: identity, missing embedder marker and purity") {
  std::vector<std::string> cands{"A red circle on a white background.", "a blue star"};
  std::vector<std::vector<std::string>> refs{{"a red circle on a white background"}, {"a blue star", "blue star"}};
  HashingEmbedder h;
  auto rep = evaluate_captions(cands, refs, {}, &h);
  for (double b : rep.bleu) CHECK(b == doctest::Approx(1.0));
  CHECK(rep.rouge_l == doctest::Approx(1.0));
  CHECK(rep.cosine->rate == 100.0);
  auto j = rep.to_json();
  CHECK(j["bleu4"] == doctest::Approx(1.0));
  auto rep2 = evaluate_captions(cands, refs);
  CHECK(rep2.to_json()["cosine_success_rate"].is_null());
  CHECK(rep2.to_text().find("unavailable") != std::string::npos);
  CHECK(evaluate_captions(cands, refs).to_json() == rep2.to_json());
  MetricConfig bad;
  bad.cosine_threshold = 1.0;
  CHECK_THROWS_AS(evaluate_captions(cands, refs, bad), ValidationError);
}
