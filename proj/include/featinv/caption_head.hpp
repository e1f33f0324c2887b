// Copyright 2026 The featinv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "featinv/nn.hpp"
#include "featinv/tensor.hpp"

namespace featinv {

/// Word-level vocabulary over normalized caption words.
class Tokenizer {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;

  Tokenizer();
  /// Vocabulary sorted by descending frequency, then lexicographically.
  static Tokenizer build(std::span<const std::string> texts, int min_count = 1);
  static Tokenizer load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  int size() const { return static_cast<int>(tokens_.size()); }
  const std::string& token(int id) const;
  int id(std::string_view word) const;

  /// Word ids without BOS/EOS; unknown words map to kUnk.
  std::vector<int> encode(std::string_view text) const;
  /// Joins words, skipping special tokens.
  std::string decode(std::span<const int> ids) const;

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, int, std::less<>> index_;
};

/// Decoder-only language model seen through bridged prefix embeddings.
class LanguageModel {
 public:
  virtual ~LanguageModel() = default;

  virtual int vocab_size() const = 0;
  virtual int embed_dim() const = 0;
  virtual int bos_id() const { return Tokenizer::kBos; }
  virtual int eos_id() const { return Tokenizer::kEos; }

  /// Token embeddings [n, d].
  virtual Tensor embed(std::span<const int> ids) const = 0;
  /// `prefix` is [P, d] (E, then prompt embeddings) or undefined; `tokens`
  /// start with BOS. Row t of the [T, V] result scores the token following
  /// tokens[0..t].
  virtual Tensor next_token_logits(const Tensor& prefix, std::span<const int> tokens) const = 0;

  virtual NamedParams params() const = 0;
  virtual const Tokenizer* tokenizer() const { return nullptr; }
};

/// Deterministic LM for tests: next-token probabilities are a function of
/// the token history only; the prefix is checked for width and ignored.
class StubLM final : public LanguageModel {
 public:
  using Distribution = std::function<std::vector<double>(std::span<const int> history)>;

  StubLM(int vocab, int embed_dim, Distribution dist, int eos = Tokenizer::kEos, int bos = Tokenizer::kBos);

  static StubLM uniform(int vocab, int embed_dim);

  int vocab_size() const override { return vocab_; }
  int embed_dim() const override { return dim_; }
  int bos_id() const override { return bos_; }
  int eos_id() const override { return eos_; }
  Tensor embed(std::span<const int> ids) const override;
  Tensor next_token_logits(const Tensor& prefix, std::span<const int> tokens) const override;
  NamedParams params() const override { return {}; }

 private:
  int vocab_, dim_, eos_, bos_;
  Distribution dist_;
};

struct TransformerLMConfig {
  int vocab = 0;
  int d_model = 64;
  int layers = 2;
  int heads = 4;
  int max_positions = 96;
  float ln_eps = 1e-5f;
};

/// GPT-2-style pre-LN decoder with tied input/output embeddings.
class TransformerLM final : public LanguageModel {
 public:
  TransformerLM(TransformerLMConfig cfg, Tokenizer tok, std::uint64_t seed);

  const TransformerLMConfig& config() const { return cfg_; }
  int vocab_size() const override { return cfg_.vocab; }
  int embed_dim() const override { return cfg_.d_model; }
  Tensor embed(std::span<const int> ids) const override;
  Tensor next_token_logits(const Tensor& prefix, std::span<const int> tokens) const override;
  NamedParams params() const override;
  const Tokenizer* tokenizer() const override { return &tok_; }

  /// Marks every parameter as non-trainable.
  void freeze();

  /// Directory with config.json, model.safetensors and vocab.txt.
  void save(const std::filesystem::path& dir) const;
  static std::unique_ptr<TransformerLM> load(const std::filesystem::path& dir);

 private:
  struct Block {
    nn::LayerNorm ln_1, ln_2;
    nn::MultiHeadAttention attn;
    nn::Linear c_fc, c_proj;
  };
  TransformerLMConfig cfg_;
  Tokenizer tok_;
  Tensor wte_, wpe_;
  std::vector<Block> blocks_;
  nn::LayerNorm ln_f_;
};

enum class Role { kGroundTruth, kGenerated };

struct CaptionSequence {
  std::vector<int> token_ids;
  std::string text;
  std::vector<double> per_token_logprob;
  Role role = Role::kGenerated;

  double total_logprob() const;
};

/// Reference caption: tokenized words followed by EOS.
CaptionSequence make_reference(const Tokenizer& tok, std::string_view text);

enum class DecodeStrategy { kGreedy, kBeam };

struct DecodeConfig {
  DecodeStrategy strategy = DecodeStrategy::kGreedy;
  int beam_width = 1;
  int max_length = 32;
  /// Unset means "use the model's EOS id".
  std::optional<int> eos_id;
  std::string prompt;
  /// Per-token log-probability floor; unset keeps -infinity.
  std::optional<double> logprob_floor = -30.0;

  void validate() const;
};

/// The [P, d] prefix fed to the LM: E followed by the prompt's embeddings.
Tensor build_prefix(const LanguageModel& lm, const Tensor& e, std::span<const int> prompt_ids);
std::vector<int> prompt_ids(const LanguageModel& lm, std::string_view prompt);

CaptionSequence generate_caption(const LanguageModel& lm, const Tensor& e, const DecodeConfig& cfg = {});

/// Sum over reference tokens of log P(c_t | c_<t, E, prompt).
double caption_log_prob(const LanguageModel& lm, const Tensor& e, const CaptionSequence& reference,
                        std::string_view prompt = {}, std::optional<double> floor = -30.0);

}  // namespace featinv
