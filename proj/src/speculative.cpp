#include "edgelab/speculative.hpp"

#include <cmath>

namespace edgelab {

FeatureReuseHead FeatureReuseHead::zeros(std::size_t d_model) {
  return {Matrix(d_model, 2 * d_model), Matrix(d_model, d_model)};
}

FeatureReuseHead FeatureReuseHead::random(std::size_t d_model, std::uint64_t seed,
                                          double stddev) {
  FeatureReuseHead h = zeros(d_model);
  Rng r1(derive_seed(seed, "feature_head.w1"));
  Rng r2(derive_seed(seed, "feature_head.w2"));
  h.w1.data = normal_vector(r1, h.w1.size(), stddev);
  h.w2.data = normal_vector(r2, h.w2.size(), stddev);
  return h;
}

std::vector<float> FeatureReuseHead::step(std::span<const float> hidden,
                                          std::span<const float> token_embed) const {
  std::vector<float> in(hidden.begin(), hidden.end());
  in.insert(in.end(), token_embed.begin(), token_embed.end());
  std::vector<float> mid(w1.rows), out(w2.rows);
  matvec(w1, in, mid);
  for (auto& m : mid) m = m / (1.0f + std::exp(-m));
  matvec(w2, mid, out);
  return out;
}

void DraftConfig::validate(const TinyLM& target) const {
  if (k < 1) throw ConfigError("draft length k must be >= 1");
  const std::size_t d = target.config().d_model;
  if (const auto* ind = std::get_if<IndependentDraft>(&kind)) {
    if (!ind->model) throw ConfigError("independent draft requires a model");
    if (ind->model->config().vocab_size != target.config().vocab_size) {
      throw ConfigError("draft and target vocabularies differ");
    }
  } else {
    const auto& h = std::get<FeatureReuseHead>(kind);
    if (h.w1.rows != d || h.w1.cols != 2 * d || h.w2.rows != d || h.w2.cols != d) {
      throw ShapeError("feature-reuse head dims must match target d_model");
    }
  }
}

Drafter::Drafter(const TinyLM& target, const DraftConfig& config)
    : target_(target), config_(config) {
  config_.validate(target_);
  if (const auto* ind = std::get_if<IndependentDraft>(&config_.kind)) {
    draft_cache_.emplace(KvCache::for_model(ind->model->config(), 0));
  }
}

Tokens Drafter::propose(const Tokens& context, std::size_t k,
                        std::optional<std::span<const float>> last_hidden) {
  if (context.empty()) throw ContractError("cannot draft from an empty context");
  Tokens out;
  if (k == 0) return out;
  out.reserve(k);

  if (const auto* ind = std::get_if<IndependentDraft>(&config_.kind)) {
    const TinyLM& dm = *ind->model;
    KvCache& cache = *draft_cache_;
    auto fed = static_cast<std::size_t>(cache.next_position());
    if (fed >= context.size()) {
      cache.truncate_from(static_cast<std::int64_t>(context.size()) - 1);
      fed = context.size() - 1;
    }
    const Tokens pending(context.begin() + static_cast<std::ptrdiff_t>(fed), context.end());
    ForwardOutput fo = forward(dm, pending, &cache);
    for (std::size_t i = 0; i < k; ++i) {
      const auto t = static_cast<Token>(argmax(fo.logits.row(fo.logits.rows - 1)));
      out.push_back(t);
      if (i + 1 < k) fo = forward(dm, Tokens{t}, &cache);
    }
    return out;
  }

  const auto& head = std::get<FeatureReuseHead>(config_.kind);
  const std::size_t d = target_.config().d_model;
  std::vector<float> h(d, 0.0f);
  if (last_hidden) {
    if (last_hidden->size() != d) throw ShapeError("hidden state width mismatch");
    h.assign(last_hidden->begin(), last_hidden->end());
  }
  const Matrix& embed = target_.weight(target_.token_embed_slot()).dense;
  Token last = context.back();
  for (std::size_t i = 0; i < k; ++i) {
    h = head.step(h, embed.row(static_cast<std::size_t>(last)));
    const auto logits = lm_head(target_, h);
    last = static_cast<Token>(argmax(logits));
    out.push_back(last);
  }
  return out;
}

void Drafter::rollback(std::size_t n) {
  if (draft_cache_) draft_cache_->truncate_from(static_cast<std::int64_t>(n));
}

VerifyResult accept_prefix(const Matrix& logits, std::size_t first_row, const Tokens& draft) {
  if (first_row + draft.size() >= logits.rows) {
    throw ShapeError("verification logits do not cover the draft");
  }
  for (std::size_t i = 0; i <= draft.size(); ++i) {
    const auto pred = static_cast<Token>(argmax(logits.row(first_row + i)));
    if (i == draft.size() || pred != draft[i]) return {i, pred};
  }
  return {draft.size(), 0};  // unreachable
}

VerifyResult verify(const TinyLM& target, const Tokens& context, const Tokens& draft,
                    std::size_t* forward_counter) {
  if (draft.empty()) throw ContractError("verify requires a nonempty draft");
  if (context.empty()) throw ContractError("verify requires a nonempty context");
  Tokens all = context;
  all.insert(all.end(), draft.begin(), draft.end());
  ForwardOptions opts;
  opts.forward_counter = forward_counter;
  const ForwardOutput fo = forward(target, all, nullptr, opts);
  return accept_prefix(fo.logits, context.size() - 1, draft);
}

SpecResult decode_speculative(const TinyLM& target, const DraftConfig& draft,
                              const Tokens& prompt, std::size_t max_new) {
  if (prompt.empty()) throw ContractError("speculative decoding requires a prompt");
  if (max_new < 1) throw ContractError("max_new must be >= 1");
  draft.validate(target);

  SpecResult res;
  res.tokens = prompt;
  Drafter drafter(target, draft);
  KvCache cache = KvCache::for_model(target.config(), 0);
  ForwardOptions opts;
  opts.forward_counter = &res.target_forwards;

  std::size_t fed = 0;  // context tokens whose K/V are in the target cache
  std::optional<std::vector<float>> last_hidden;
  std::size_t generated = 0;
  while (generated < max_new) {
    const std::size_t remaining = max_new - generated;
    const std::size_t kk = std::min(draft.k, remaining - 1);
    const std::size_t ctx_len = res.tokens.size();

    Tokens proposal;
    if (kk > 0) {
      proposal = last_hidden
                     ? drafter.propose(res.tokens, kk, std::span<const float>(*last_hidden))
                     : drafter.propose(res.tokens, kk);
    }

    Tokens feed(res.tokens.begin() + static_cast<std::ptrdiff_t>(fed), res.tokens.end());
    feed.insert(feed.end(), proposal.begin(), proposal.end());
    const ForwardOutput fo = forward(target, feed, &cache, opts);
    const std::size_t base = ctx_len - fed - 1;
    const VerifyResult v = accept_prefix(fo.logits, base, proposal);

    res.tokens.insert(res.tokens.end(), proposal.begin(),
                      proposal.begin() + static_cast<std::ptrdiff_t>(v.accepted_len));
    res.tokens.push_back(v.next_token);
    fed = ctx_len + v.accepted_len;
    cache.truncate_from(static_cast<std::int64_t>(fed));
    drafter.rollback(fed);
    const auto hrow = fo.final_hidden.row(base + v.accepted_len);
    last_hidden.emplace(hrow.begin(), hrow.end());

    RoundTrace rt{res.stats.rounds, kk, v.accepted_len, v.accepted_len + 1};
    res.trace.push_back(rt);
    res.stats.rounds += 1;
    res.stats.proposed += kk;
    res.stats.accepted += v.accepted_len;
    res.stats.emitted += v.accepted_len + 1;
    generated += v.accepted_len + 1;
  }
  return res;
}

double block_efficiency(const SpecStats& stats) {
  if (stats.rounds == 0) throw RangeError("block efficiency undefined for zero rounds");
  return static_cast<double>(stats.emitted) / static_cast<double>(stats.rounds);
}

}  // namespace edgelab
