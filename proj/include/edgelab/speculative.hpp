#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <variant>

#include "edgelab/kv_cache.hpp"
#include "edgelab/model.hpp"

namespace edgelab {

// Two-layer map over [previous top hidden ++ embedding of last token]:
// h' = W2 * silu(W1 * x). Decodes through the target's final norm and LM head.
struct FeatureReuseHead {
  Matrix w1;  // d_model x 2*d_model
  Matrix w2;  // d_model x d_model

  static FeatureReuseHead zeros(std::size_t d_model);
  static FeatureReuseHead random(std::size_t d_model, std::uint64_t seed, double stddev = 0.02);

  std::vector<float> step(std::span<const float> hidden, std::span<const float> token_embed) const;
};

struct IndependentDraft {
  std::shared_ptr<const TinyLM> model;
};

struct DraftConfig {
  std::variant<IndependentDraft, FeatureReuseHead> kind;
  std::size_t k = 4;

  void validate(const TinyLM& target) const;
};

struct SpecStats {
  std::size_t rounds = 0;
  std::size_t proposed = 0;
  std::size_t accepted = 0;
  std::size_t emitted = 0;
};

struct RoundTrace {
  std::size_t round = 0;
  std::size_t proposed = 0;
  std::size_t accepted = 0;
  std::size_t emitted = 0;
};

// Mutable drafting state for one decode loop.
class Drafter {
 public:
  Drafter(const TinyLM& target, const DraftConfig& config);

  // Greedy proposal of `k` tokens continuing `context`. `last_hidden` is the
  // target's top hidden state for the position preceding context.back()
  // (feature-reuse drafting only; zeros when absent).
  Tokens propose(const Tokens& context, std::size_t k,
                 std::optional<std::span<const float>> last_hidden = std::nullopt);

  // Informs the drafter that only the first `n` context tokens are still valid.
  void rollback(std::size_t n);

 private:
  const TinyLM& target_;
  const DraftConfig& config_;
  std::optional<KvCache> draft_cache_;
};

struct VerifyResult {
  std::size_t accepted_len = 0;
  Token next_token = 0;
};

// Stateless verification: one target forward over context ++ draft.
VerifyResult verify(const TinyLM& target, const Tokens& context, const Tokens& draft,
                    std::size_t* forward_counter = nullptr);

// Accept rule on a block of target logits: row i is the target prediction for
// draft position i; row draft.size() is the bonus prediction.
VerifyResult accept_prefix(const Matrix& logits, std::size_t first_row, const Tokens& draft);

struct SpecResult {
  Tokens tokens;  // prompt ++ generated
  SpecStats stats;
  std::size_t target_forwards = 0;
  std::vector<RoundTrace> trace;
};

SpecResult decode_speculative(const TinyLM& target, const DraftConfig& draft,
                              const Tokens& prompt, std::size_t max_new);

double block_efficiency(const SpecStats& stats);

}  // namespace edgelab
