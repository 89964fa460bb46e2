#pragma once

#include <cstdint>
#include <deque>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "edgelab/common.hpp"

namespace edgelab {

struct ModelConfig;

// Per-layer key/value store with attention-score bookkeeping for eviction.
// Keys are stored post-RoPE at absolute positions; positions are never
// re-indexed after eviction.
class KvCache {
 public:
  struct Layer {
    std::vector<float> keys;    // [kept x n_kv_heads x head_dim]
    std::vector<float> values;  // same shape as keys
    std::vector<std::int64_t> positions;
    std::vector<double> accumulated;  // attention mass received, per entry
    // Last `window_capacity` head-averaged attention rows; row i covers the
    // entries that existed when it was recorded (a prefix of the current ones).
    std::deque<std::vector<double>> recent_rows;
  };

  KvCache(std::size_t n_layers, std::size_t n_kv_heads, std::size_t head_dim,
          std::size_t window_capacity = 16);
  static KvCache for_model(const ModelConfig& config, std::size_t window_capacity = 16);

  std::size_t n_layers() const { return layers_.size(); }
  std::size_t n_kv_heads() const { return n_kv_heads_; }
  std::size_t head_dim() const { return head_dim_; }
  std::size_t entry_width() const { return n_kv_heads_ * head_dim_; }
  std::size_t window_capacity() const { return window_capacity_; }

  const Layer& layer(std::size_t l) const { return layers_.at(l); }
  std::size_t kept(std::size_t l) const { return layers_.at(l).positions.size(); }
  std::size_t total_kept() const;
  bool empty() const { return total_kept() == 0; }

  // Largest cached position in a layer, or -1 when empty.
  std::int64_t max_position(std::size_t l) const;
  // Position the next appended token takes by default.
  std::int64_t next_position() const;

  std::span<const float> key(std::size_t l, std::size_t i) const;
  std::span<const float> value(std::size_t l, std::size_t i) const;

  // Appends one entry. `attn_row`, when given, must cover the kept entries plus
  // the new one; it is added into the accumulators and pushed onto the ring.
  void append(std::size_t l, std::span<const float> k, std::span<const float> v,
              std::int64_t position,
              std::optional<std::span<const float>> attn_row = std::nullopt);

  // Keeps only the given (strictly increasing) indices in layer l.
  void retain(std::size_t l, const std::vector<std::size_t>& kept_indices);

  // Drops every entry at position >= `position` in all layers (speculative
  // rollback). Recent rows recorded after the cut are discarded.
  void truncate_from(std::int64_t position);

 private:
  std::size_t n_kv_heads_;
  std::size_t head_dim_;
  std::size_t window_capacity_;
  std::vector<Layer> layers_;
};

// Spec-named entry point for appends.
void cache_append(KvCache& cache, std::size_t layer, std::span<const float> k,
                  std::span<const float> v, std::int64_t position,
                  std::optional<std::span<const float>> attn_row = std::nullopt);

namespace policy {
struct AttentionSink {
  std::size_t sinks = 4;
  std::size_t window = 4;
};
struct HeavyHitter {
  std::size_t recent = 1;
};
struct ObsWindow {
  std::size_t obs = 16;
  std::size_t pool_kernel = 5;
};
struct Hybrid {
  double lambda_sink = 0.1;
  double lambda_recent = 0.1;
  double lambda_acc = 0.4;
  double lambda_win = 0.4;
  std::size_t obs = 16;
  std::size_t pool_kernel = 5;
  std::size_t sinks = 4;
};
struct Random {
  std::uint64_t seed = 0;
};
}  // namespace policy

using EvictionPolicy = std::variant<policy::AttentionSink, policy::HeavyHitter,
                                    policy::ObsWindow, policy::Hybrid, policy::Random>;

std::string policy_name(const EvictionPolicy& p);
void validate_policy(const EvictionPolicy& p);
// Entries a policy always keeps; the smallest admissible budget.
std::size_t mandatory_floor(const EvictionPolicy& p);

struct LayerEviction {
  std::vector<std::size_t> kept_indices;  // into pre-eviction order
  std::size_t evicted_count = 0;
  std::size_t budget = 0;
  double eviction_ratio = 0.0;
};

struct EvictionReport {
  std::vector<LayerEviction> layers;
};

EvictionReport evict(KvCache& cache, const EvictionPolicy& p, std::size_t budget);

// Aggregated evicted / (evicted + kept). Throws RangeError for an empty cache.
double eviction_ratio(const EvictionReport& report);

std::uint64_t cache_bytes(const KvCache& cache, std::size_t bytes_per_element);

// Per-entry scores used by the pure policies, exposed for oracles and replay.
std::vector<double> heavy_hitter_scores(const KvCache& cache, std::size_t layer);
std::vector<double> obs_window_scores(const KvCache& cache, std::size_t layer,
                                      std::size_t obs, std::size_t pool_kernel);

struct HybridComponents {
  std::vector<double> sink;
  std::vector<double> recency;
  std::vector<double> accumulated;
  std::vector<double> window;
};

// Min-max normalizes each component (constant -> 0) then weights and sums.
std::vector<double> score_hybrid(const HybridComponents& c, const policy::Hybrid& w);

// Keeps `mandatory` plus the best-scoring others up to `budget`; ties go to
// the more recent entry. Returns sorted kept indices.
std::vector<std::size_t> select_kept(const std::vector<double>& scores,
                                     const std::vector<bool>& mandatory,
                                     std::size_t budget);

// Attention traces as JSON lines: {"layer","step","position","row"}.
struct TraceRecord {
  std::size_t layer = 0;
  std::size_t step = 0;
  std::int64_t position = 0;
  std::vector<float> row;
};

void write_trace(std::ostream& out, const std::vector<TraceRecord>& records);
std::vector<TraceRecord> read_trace(std::istream& in);

// Rebuilds a score-only cache (zero K/V) from a trace for offline policy replay.
KvCache replay_trace(const std::vector<TraceRecord>& records, std::size_t n_layers,
                     std::size_t window_capacity = 16);

}  // namespace edgelab
