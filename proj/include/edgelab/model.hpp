#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "edgelab/common.hpp"
#include "edgelab/quant_tensor.hpp"

namespace edgelab {

class KvCache;

struct ModelConfig {
  std::size_t vocab_size = 256;
  std::size_t d_model = 64;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t n_kv_heads = 2;
  std::size_t head_dim = 16;
  std::size_t ffn_mult = 4;
  double rope_theta = 10000.0;
  bool tie_embeddings = true;
  std::size_t max_seq = 4096;

  std::size_t ffn_dim() const { return d_model * ffn_mult; }
  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// A parameter slot. `dense` always holds the values forward uses; when the
// slot is quantized it is the dequantization of `quant`.
struct Weight {
  Matrix dense;
  std::optional<QuantTensor> quant;
};

struct LayerSlots {
  std::size_t attn_norm, attn_q, attn_k, attn_v, attn_o;
  std::size_t mlp_norm, mlp_gate, mlp_up, mlp_down;
};

// Low-rank additive delta on one slot: W_eff = W + scale * B * A.
struct LowRankDelta {
  const Matrix* a = nullptr;  // r x in
  const Matrix* b = nullptr;  // out x r
  float scale = 1.0f;
};
using DeltaMap = std::map<std::string, LowRankDelta>;

class TinyLM {
 public:
  TinyLM(ModelConfig config, std::vector<std::string> names, std::vector<Weight> weights);

  const ModelConfig& config() const { return config_; }
  const std::vector<std::string>& slot_names() const { return names_; }
  std::size_t slot_index(const std::string& name) const;
  bool has_slot(const std::string& name) const;
  const Weight& weight(std::size_t i) const { return weights_[i]; }
  const Weight& weight(const std::string& name) const { return weights_[slot_index(name)]; }
  const std::vector<Weight>& weights() const { return weights_; }

  const LayerSlots& layer(std::size_t l) const { return layers_[l]; }
  std::size_t token_embed_slot() const { return embed_; }
  std::size_t final_norm_slot() const { return final_norm_; }
  std::optional<std::size_t> lm_head_slot() const { return lm_head_; }

  // Matrix-shaped slots (everything except norm scales): the quantizable set.
  std::vector<std::string> matrix_slots() const;

  // Output projection [vocab x d_model]; the embedding table when tied.
  const Matrix& output_projection() const;

  // Copy with one slot replaced. Shapes must match.
  TinyLM with_weight(const std::string& name, Weight w) const;

  // SHA-256 over config, slot names, dense values and quantized encodings.
  std::string hash() const;

 private:
  ModelConfig config_;
  std::vector<std::string> names_;
  std::vector<Weight> weights_;
  std::map<std::string, std::size_t> index_;
  std::vector<LayerSlots> layers_;
  std::size_t embed_ = 0;
  std::size_t final_norm_ = 0;
  std::optional<std::size_t> lm_head_;
};

// Canonical slot names for a config, in storage order.
std::vector<std::string> slot_names_for(const ModelConfig& config);
// Expected [rows, cols] of a slot.
std::pair<std::size_t, std::size_t> slot_shape(const ModelConfig& config,
                                               const std::string& name);

TinyLM init_model(const ModelConfig& config, std::uint64_t seed);

struct ForwardOptions {
  bool capture_attn = false;
  bool per_head = false;  // additionally keep per-head rows
  const DeltaMap* deltas = nullptr;
  // Explicit absolute positions for the new tokens; default continues the cache.
  const std::vector<std::int64_t>* positions = nullptr;
  // Forward-pass counter, incremented once per call.
  std::size_t* forward_counter = nullptr;
};

struct ForwardOutput {
  Matrix logits;        // [new x vocab]
  Matrix final_hidden;  // [new x d_model], top-layer residual before the final norm
  // attn_rows[layer][query] = head-averaged probabilities over kept keys (+ self)
  std::optional<std::vector<std::vector<std::vector<float>>>> attn_rows;
  // attn_heads[layer][query][head] when per_head was requested
  std::optional<std::vector<std::vector<std::vector<std::vector<float>>>>> attn_heads;
};

// Runs the new tokens through the model. With a cache, K/V (post-RoPE) are
// appended at absolute positions; without one a scratch cache is used.
ForwardOutput forward(const TinyLM& model, const Tokens& tokens, KvCache* cache,
                      const ForwardOptions& opts = {});

Tokens greedy_decode(const TinyLM& model, const Tokens& prompt, std::size_t max_new,
                     std::size_t* forward_counter = nullptr,
                     const DeltaMap* deltas = nullptr);

// Final RMS norm + output projection over one hidden vector.
std::vector<float> lm_head(const TinyLM& model, std::span<const float> hidden);

void rms_norm(std::span<const float> x, std::span<const float> scale,
              std::span<float> out);

std::vector<float> apply_rope(std::span<const float> vec, std::int64_t position,
                              double theta);
void apply_rope_inplace(std::span<float> vec, std::int64_t position, double theta);

struct PatchGrid {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t dim = 0;
  std::vector<float> data;  // [rows x cols x dim]

  PatchGrid() = default;
  PatchGrid(std::size_t r, std::size_t c, std::size_t d)
      : rows(r), cols(c), dim(d), data(r * c * d, 0.0f) {}
  std::size_t sequence_length() const { return rows * cols; }
  friend bool operator==(const PatchGrid&, const PatchGrid&) = default;
};

// Space-to-depth: each r x r block becomes one patch of dim r*r*dim, blocks
// concatenated in row-major order within the block.
PatchGrid pixel_shuffle(const PatchGrid& grid, std::size_t r = 2);
PatchGrid pixel_unshuffle(const PatchGrid& grid, std::size_t r = 2);

// Model manifest (see docs/formats.md).
void save_model(const TinyLM& model, const std::string& path);
TinyLM load_model(const std::string& path);

}  // namespace edgelab
