#include "edgelab/kv_cache.hpp"

#include <algorithm>
#include <istream>
#include <numeric>
#include <ostream>

#include "edgelab/json_io.hpp"
#include "edgelab/model.hpp"

namespace edgelab {

KvCache::KvCache(std::size_t n_layers, std::size_t n_kv_heads, std::size_t head_dim,
                 std::size_t window_capacity)
    : n_kv_heads_(n_kv_heads),
      head_dim_(head_dim),
      window_capacity_(window_capacity),
      layers_(n_layers) {}

KvCache KvCache::for_model(const ModelConfig& config, std::size_t window_capacity) {
  return KvCache(config.n_layers, config.n_kv_heads, config.head_dim, window_capacity);
}

std::size_t KvCache::total_kept() const {
  std::size_t n = 0;
  for (const auto& l : layers_) n += l.positions.size();
  return n;
}

std::int64_t KvCache::max_position(std::size_t l) const {
  const auto& p = layers_.at(l).positions;
  return p.empty() ? -1 : p.back();
}

std::int64_t KvCache::next_position() const {
  std::int64_t mx = -1;
  for (std::size_t l = 0; l < layers_.size(); ++l) mx = std::max(mx, max_position(l));
  return mx + 1;
}

std::span<const float> KvCache::key(std::size_t l, std::size_t i) const {
  const std::size_t w = entry_width();
  return {layers_[l].keys.data() + i * w, w};
}

std::span<const float> KvCache::value(std::size_t l, std::size_t i) const {
  const std::size_t w = entry_width();
  return {layers_[l].values.data() + i * w, w};
}

void KvCache::append(std::size_t l, std::span<const float> k, std::span<const float> v,
                     std::int64_t position, std::optional<std::span<const float>> attn_row) {
  Layer& layer = layers_.at(l);
  if (k.size() != entry_width() || v.size() != entry_width()) {
    throw ShapeError("KV entry width mismatch");
  }
  if (position <= max_position(l)) {
    throw RangeError("cache position " + std::to_string(position) +
                     " does not exceed current maximum " + std::to_string(max_position(l)));
  }
  if (attn_row && attn_row->size() != layer.positions.size() + 1) {
    throw ShapeError("attention row length " + std::to_string(attn_row->size()) +
                     " != kept + 1 (" + std::to_string(layer.positions.size() + 1) + ")");
  }
  layer.keys.insert(layer.keys.end(), k.begin(), k.end());
  layer.values.insert(layer.values.end(), v.begin(), v.end());
  layer.positions.push_back(position);
  layer.accumulated.push_back(0.0);
  if (attn_row) {
    std::vector<double> row(attn_row->begin(), attn_row->end());
    for (std::size_t j = 0; j < row.size(); ++j) layer.accumulated[j] += row[j];
    if (window_capacity_ > 0) {
      layer.recent_rows.push_back(std::move(row));
      while (layer.recent_rows.size() > window_capacity_) layer.recent_rows.pop_front();
    }
  }
}

void cache_append(KvCache& cache, std::size_t layer, std::span<const float> k,
                  std::span<const float> v, std::int64_t position,
                  std::optional<std::span<const float>> attn_row) {
  cache.append(layer, k, v, position, attn_row);
}

void KvCache::retain(std::size_t l, const std::vector<std::size_t>& kept_indices) {
  Layer& layer = layers_.at(l);
  const std::size_t n = layer.positions.size();
  const std::size_t w = entry_width();
  std::vector<std::uint8_t> keep(n, 0);
  for (std::size_t k = 0; k < kept_indices.size(); ++k) {
    const std::size_t idx = kept_indices[k];
    if (idx >= n || (k > 0 && idx <= kept_indices[k - 1])) {
      throw RangeError("kept indices must be strictly increasing and in range");
    }
    keep[idx] = 1;
  }
  Layer next;
  next.keys.reserve(kept_indices.size() * w);
  next.values.reserve(kept_indices.size() * w);
  for (std::size_t idx : kept_indices) {
    next.keys.insert(next.keys.end(), layer.keys.begin() + idx * w,
                     layer.keys.begin() + (idx + 1) * w);
    next.values.insert(next.values.end(), layer.values.begin() + idx * w,
                       layer.values.begin() + (idx + 1) * w);
    next.positions.push_back(layer.positions[idx]);
    next.accumulated.push_back(layer.accumulated[idx]);
  }
  for (const auto& row : layer.recent_rows) {
    std::vector<double> compact;
    for (std::size_t j = 0; j < row.size(); ++j) {
      if (keep[j]) compact.push_back(row[j]);
    }
    next.recent_rows.push_back(std::move(compact));
  }
  layer = std::move(next);
}

void KvCache::truncate_from(std::int64_t position) {
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& pos = layers_[l].positions;
    const auto cut = static_cast<std::size_t>(
        std::lower_bound(pos.begin(), pos.end(), position) - pos.begin());
    if (cut == pos.size()) continue;
    Layer& layer = layers_[l];
    layer.keys.resize(cut * entry_width());
    layer.values.resize(cut * entry_width());
    layer.positions.resize(cut);
    layer.accumulated.resize(cut);
    while (!layer.recent_rows.empty() && layer.recent_rows.back().size() > cut) {
      layer.recent_rows.pop_back();
    }
  }
}

std::string policy_name(const EvictionPolicy& p) {
  struct V {
    std::string operator()(const policy::AttentionSink&) const { return "attention_sink"; }
    std::string operator()(const policy::HeavyHitter&) const { return "heavy_hitter"; }
    std::string operator()(const policy::ObsWindow&) const { return "obs_window"; }
    std::string operator()(const policy::Hybrid&) const { return "hybrid"; }
    std::string operator()(const policy::Random&) const { return "random"; }
  };
  return std::visit(V{}, p);
}

void validate_policy(const EvictionPolicy& p) {
  struct V {
    void operator()(const policy::AttentionSink& s) const {
      if (s.window < 1) throw ConfigError("attention sink window must be >= 1");
    }
    void operator()(const policy::HeavyHitter& h) const {
      if (h.recent < 1) throw ConfigError("heavy hitter recent count must be >= 1");
    }
    void operator()(const policy::ObsWindow& o) const {
      if (o.obs < 1) throw ConfigError("observation window must be >= 1");
      if (o.pool_kernel % 2 == 0) throw ConfigError("pool kernel must be odd");
    }
    void operator()(const policy::Hybrid& h) const {
      const double lam[] = {h.lambda_sink, h.lambda_recent, h.lambda_acc, h.lambda_win};
      for (double l : lam) {
        if (l < 0.0) throw ConfigError("hybrid weights must be nonnegative");
      }
      if (lam[0] + lam[1] + lam[2] + lam[3] <= 0.0) {
        throw ConfigError("hybrid weights must not all be zero");
      }
      if (h.obs < 1) throw ConfigError("observation window must be >= 1");
      if (h.pool_kernel % 2 == 0) throw ConfigError("pool kernel must be odd");
    }
    void operator()(const policy::Random&) const {}
  };
  std::visit(V{}, p);
}

std::size_t mandatory_floor(const EvictionPolicy& p) {
  struct V {
    std::size_t operator()(const policy::AttentionSink& s) const { return s.sinks + s.window; }
    std::size_t operator()(const policy::HeavyHitter& h) const { return h.recent; }
    std::size_t operator()(const policy::ObsWindow& o) const { return o.obs; }
    std::size_t operator()(const policy::Hybrid& h) const { return h.obs; }
    std::size_t operator()(const policy::Random&) const { return 1; }
  };
  return std::visit(V{}, p);
}

std::vector<double> heavy_hitter_scores(const KvCache& cache, std::size_t layer) {
  return cache.layer(layer).accumulated;
}

std::vector<double> obs_window_scores(const KvCache& cache, std::size_t layer,
                                      std::size_t obs, std::size_t pool_kernel) {
  const auto& L = cache.layer(layer);
  const std::size_t n = L.positions.size();
  std::vector<double> raw(n, 0.0);
  const std::size_t rows = std::min(obs, L.recent_rows.size());
  for (std::size_t r = L.recent_rows.size() - rows; r < L.recent_rows.size(); ++r) {
    const auto& row = L.recent_rows[r];
    for (std::size_t j = 0; j < row.size() && j < n; ++j) raw[j] += row[j];
  }
  if (rows > 0) {
    for (auto& v : raw) v /= static_cast<double>(rows);
  }
  // Mean pooling, window clipped at the edges.
  const std::size_t half = pool_kernel / 2;
  std::vector<double> pooled(n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    const std::size_t lo = j >= half ? j - half : 0;
    const std::size_t hi = std::min(n - 1, j + half);
    double s = 0.0;
    for (std::size_t t = lo; t <= hi; ++t) s += raw[t];
    pooled[j] = s / static_cast<double>(hi - lo + 1);
  }
  return pooled;
}

std::vector<double> score_hybrid(const HybridComponents& c, const policy::Hybrid& w) {
  const std::size_t n = c.sink.size();
  if (c.recency.size() != n || c.accumulated.size() != n || c.window.size() != n) {
    throw ShapeError("hybrid score components differ in length");
  }
  validate_policy(w);
  auto normalized = [](const std::vector<double>& v) {
    std::vector<double> out(v.size(), 0.0);
    if (v.empty()) return out;
    const auto [mn, mx] = std::minmax_element(v.begin(), v.end());
    const double range = *mx - *mn;
    if (range <= 0.0) return out;
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - *mn) / range;
    return out;
  };
  const auto s = normalized(c.sink);
  const auto r = normalized(c.recency);
  const auto a = normalized(c.accumulated);
  const auto win = normalized(c.window);
  std::vector<double> score(n);
  for (std::size_t i = 0; i < n; ++i) {
    score[i] = w.lambda_sink * s[i] + w.lambda_recent * r[i] + w.lambda_acc * a[i] +
               w.lambda_win * win[i];
  }
  return score;
}

std::vector<std::size_t> select_kept(const std::vector<double>& scores,
                                     const std::vector<bool>& mandatory,
                                     std::size_t budget) {
  const std::size_t n = scores.size();
  std::vector<std::size_t> kept;
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < n; ++i) (mandatory[i] ? kept : candidates).push_back(i);
  if (kept.size() > budget) throw ConfigError("mandatory set exceeds the budget");
  std::stable_sort(candidates.begin(), candidates.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a > b;  // more recent first
  });
  const std::size_t extra = std::min(budget - kept.size(), candidates.size());
  kept.insert(kept.end(), candidates.begin(), candidates.begin() + extra);
  std::sort(kept.begin(), kept.end());
  return kept;
}

namespace {

std::vector<bool> recent_mask(std::size_t n, std::size_t recent) {
  std::vector<bool> m(n, false);
  for (std::size_t i = n - std::min(n, recent); i < n; ++i) m[i] = true;
  return m;
}

std::vector<double> recency_scores(std::size_t n) {
  std::vector<double> r(n);
  std::iota(r.begin(), r.end(), 0.0);
  return r;
}

}  // namespace

EvictionReport evict(KvCache& cache, const EvictionPolicy& p, std::size_t budget) {
  validate_policy(p);
  if (budget < 1 || budget < mandatory_floor(p)) {
    throw ConfigError("budget " + std::to_string(budget) + " is below the " +
                      policy_name(p) + " mandatory floor " +
                      std::to_string(mandatory_floor(p)));
  }
  if (const auto* o = std::get_if<policy::ObsWindow>(&p); o && o->obs > cache.window_capacity()) {
    throw ConfigError("observation window exceeds the cache's recorded-row capacity");
  }
  if (const auto* h = std::get_if<policy::Hybrid>(&p); h && h->obs > cache.window_capacity()) {
    throw ConfigError("observation window exceeds the cache's recorded-row capacity");
  }

  EvictionReport report;
  for (std::size_t l = 0; l < cache.n_layers(); ++l) {
    const std::size_t n = cache.kept(l);
    LayerEviction le;
    le.budget = budget;
    if (n <= budget) {
      le.kept_indices.resize(n);
      std::iota(le.kept_indices.begin(), le.kept_indices.end(), 0);
      report.layers.push_back(std::move(le));
      continue;
    }

    std::vector<double> scores;
    std::vector<bool> mandatory;
    struct Plan {
      std::vector<double>& scores;
      std::vector<bool>& mandatory;
      const KvCache& cache;
      std::size_t l;
      std::size_t n;
      void operator()(const policy::AttentionSink& s) {
        mandatory = recent_mask(n, s.window);
        for (std::size_t i = 0; i < std::min(n, s.sinks); ++i) mandatory[i] = true;
        scores = recency_scores(n);
      }
      void operator()(const policy::HeavyHitter& h) {
        mandatory = recent_mask(n, h.recent);
        scores = heavy_hitter_scores(cache, l);
      }
      void operator()(const policy::ObsWindow& o) {
        mandatory = recent_mask(n, o.obs);
        scores = obs_window_scores(cache, l, o.obs, o.pool_kernel);
      }
      void operator()(const policy::Hybrid& h) {
        mandatory = recent_mask(n, h.obs);
        HybridComponents c;
        c.sink.assign(n, 0.0);
        for (std::size_t i = 0; i < std::min(n, h.sinks); ++i) c.sink[i] = 1.0;
        c.recency = recency_scores(n);
        c.accumulated = heavy_hitter_scores(cache, l);
        c.window = obs_window_scores(cache, l, h.obs, h.pool_kernel);
        scores = score_hybrid(c, h);
      }
      void operator()(const policy::Random& r) {
        mandatory = recent_mask(n, 1);
        Rng rng(derive_seed(derive_seed(r.seed, l), cache.layer(l).positions.back()));
        std::uniform_real_distribution<double> u(0.0, 1.0);
        scores.resize(n);
        for (auto& s : scores) s = u(rng);
      }
    };
    std::visit(Plan{scores, mandatory, cache, l, n}, p);

    le.kept_indices = select_kept(scores, mandatory, budget);
    le.evicted_count = n - le.kept_indices.size();
    le.eviction_ratio = static_cast<double>(le.evicted_count) / static_cast<double>(n);
    cache.retain(l, le.kept_indices);
    report.layers.push_back(std::move(le));
  }
  return report;
}

double eviction_ratio(const EvictionReport& report) {
  std::size_t evicted = 0, total = 0;
  for (const auto& l : report.layers) {
    evicted += l.evicted_count;
    total += l.evicted_count + l.kept_indices.size();
  }
  if (total == 0) throw RangeError("eviction ratio of an empty cache is undefined");
  return static_cast<double>(evicted) / static_cast<double>(total);
}

std::uint64_t cache_bytes(const KvCache& cache, std::size_t bytes_per_element) {
  std::uint64_t total = 0;
  for (std::size_t l = 0; l < cache.n_layers(); ++l) {
    total += static_cast<std::uint64_t>(cache.kept(l)) * cache.n_kv_heads() *
             cache.head_dim() * 2 * bytes_per_element;
  }
  return total;
}

void write_trace(std::ostream& out, const std::vector<TraceRecord>& records) {
  for (const auto& r : records) {
    out << Json{{"layer", r.layer}, {"step", r.step}, {"position", r.position}, {"row", r.row}}
               .dump()
        << '\n';
  }
}

std::vector<TraceRecord> read_trace(std::istream& in) {
  std::vector<TraceRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const Json j = Json::parse(line);
      out.push_back({j.at("layer").get<std::size_t>(), j.at("step").get<std::size_t>(),
                     j.at("position").get<std::int64_t>(),
                     j.at("row").get<std::vector<float>>()});
    } catch (const Json::exception& e) {
      throw FormatError("trace line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

KvCache replay_trace(const std::vector<TraceRecord>& records, std::size_t n_layers,
                     std::size_t window_capacity) {
  KvCache cache(n_layers, 1, 1, window_capacity);
  const float zero[1] = {0.0f};
  for (const auto& r : records) {
    if (r.layer >= n_layers) throw FormatError("trace layer out of range");
    cache.append(r.layer, zero, zero, r.position, std::span<const float>(r.row));
  }
  return cache;
}

}  // namespace edgelab
