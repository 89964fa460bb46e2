#include "edgelab/model.hpp"

#include <algorithm>
#include <cmath>

#include "edgelab/kv_cache.hpp"

namespace edgelab {

void ModelConfig::validate() const {
  if (vocab_size == 0 || d_model == 0 || n_layers == 0 || n_heads == 0 ||
      n_kv_heads == 0 || head_dim == 0 || ffn_mult == 0 || max_seq == 0) {
    throw ConfigError("model config dimensions must be positive");
  }
  if (n_heads % n_kv_heads != 0) {
    throw ConfigError("n_heads (" + std::to_string(n_heads) +
                      ") must be a multiple of n_kv_heads (" +
                      std::to_string(n_kv_heads) + ")");
  }
  if (d_model != n_heads * head_dim) {
    throw ConfigError("d_model must equal n_heads * head_dim");
  }
  if (head_dim % 2 != 0) throw ConfigError("head_dim must be even for RoPE");
  if (!(rope_theta > 0.0)) throw ConfigError("rope_theta must be positive");
}

std::vector<std::string> slot_names_for(const ModelConfig& config) {
  std::vector<std::string> names{"token_embed"};
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    for (const char* s : {"attn_norm", "attn_q", "attn_k", "attn_v", "attn_o", "mlp_norm",
                          "mlp_gate", "mlp_up", "mlp_down"}) {
      names.push_back(p + s);
    }
  }
  names.emplace_back("final_norm");
  if (!config.tie_embeddings) names.emplace_back("lm_head");
  return names;
}

std::pair<std::size_t, std::size_t> slot_shape(const ModelConfig& c,
                                               const std::string& name) {
  const std::size_t d = c.d_model;
  if (name == "token_embed" || name == "lm_head") return {c.vocab_size, d};
  if (name == "final_norm") return {1, d};
  const auto dot = name.rfind('.');
  const std::string kind = dot == std::string::npos ? name : name.substr(dot + 1);
  if (kind == "attn_norm" || kind == "mlp_norm") return {1, d};
  if (kind == "attn_q") return {c.n_heads * c.head_dim, d};
  if (kind == "attn_k" || kind == "attn_v") return {c.n_kv_heads * c.head_dim, d};
  if (kind == "attn_o") return {d, c.n_heads * c.head_dim};
  if (kind == "mlp_gate" || kind == "mlp_up") return {c.ffn_dim(), d};
  if (kind == "mlp_down") return {d, c.ffn_dim()};
  throw ConfigError("unknown parameter slot '" + name + "'");
}

TinyLM::TinyLM(ModelConfig config, std::vector<std::string> names,
               std::vector<Weight> weights)
    : config_(std::move(config)), names_(std::move(names)), weights_(std::move(weights)) {
  config_.validate();
  if (names_ != slot_names_for(config_)) {
    throw ConfigError("parameter slots do not match the model config");
  }
  if (names_.size() != weights_.size()) throw ConfigError("slot/weight count mismatch");
  for (std::size_t i = 0; i < names_.size(); ++i) {
    const auto [r, c] = slot_shape(config_, names_[i]);
    const Weight& w = weights_[i];
    if (w.dense.rows != r || w.dense.cols != c || w.dense.size() != r * c) {
      throw ShapeError("slot '" + names_[i] + "' has wrong shape");
    }
    if (w.quant && (w.quant->rows() != r || w.quant->cols() != c)) {
      throw ShapeError("quantized slot '" + names_[i] + "' has wrong shape");
    }
    index_[names_[i]] = i;
  }
  embed_ = index_.at("token_embed");
  final_norm_ = index_.at("final_norm");
  if (!config_.tie_embeddings) lm_head_ = index_.at("lm_head");
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    layers_.push_back({index_.at(p + "attn_norm"), index_.at(p + "attn_q"),
                       index_.at(p + "attn_k"), index_.at(p + "attn_v"),
                       index_.at(p + "attn_o"), index_.at(p + "mlp_norm"),
                       index_.at(p + "mlp_gate"), index_.at(p + "mlp_up"),
                       index_.at(p + "mlp_down")});
  }
}

std::size_t TinyLM::slot_index(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter slot '" + name + "'");
  return it->second;
}

bool TinyLM::has_slot(const std::string& name) const { return index_.count(name) != 0; }

std::vector<std::string> TinyLM::matrix_slots() const {
  std::vector<std::string> out;
  for (const auto& n : names_) {
    if (n.find("norm") == std::string::npos) out.push_back(n);
  }
  return out;
}

const Matrix& TinyLM::output_projection() const {
  return lm_head_ ? weights_[*lm_head_].dense : weights_[embed_].dense;
}

TinyLM TinyLM::with_weight(const std::string& name, Weight w) const {
  auto weights = weights_;
  weights[slot_index(name)] = std::move(w);
  return TinyLM(config_, names_, std::move(weights));
}

std::string TinyLM::hash() const {
  Sha256 h;
  const std::uint64_t dims[] = {config_.vocab_size, config_.d_model,  config_.n_layers,
                                config_.n_heads,    config_.n_kv_heads, config_.head_dim,
                                config_.ffn_mult,   config_.max_seq,
                                static_cast<std::uint64_t>(config_.tie_embeddings)};
  h.update(dims, sizeof(dims));
  h.update(&config_.rope_theta, sizeof(double));
  for (std::size_t i = 0; i < names_.size(); ++i) {
    h.update_string(names_[i]);
    h.update_span(std::span<const float>(weights_[i].dense.data));
    if (weights_[i].quant) weights_[i].quant->hash_into(h);
  }
  return h.hex_digest();
}

TinyLM init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  auto names = slot_names_for(config);
  std::vector<Weight> weights;
  weights.reserve(names.size());
  for (const auto& name : names) {
    const auto [r, c] = slot_shape(config, name);
    Weight w{Matrix(r, c), std::nullopt};
    if (name.find("norm") != std::string::npos) {
      std::fill(w.dense.data.begin(), w.dense.data.end(), 1.0f);
    } else {
      Rng rng(derive_seed(seed, name));
      w.dense.data = normal_vector(rng, r * c, 0.02);
    }
    weights.push_back(std::move(w));
  }
  return TinyLM(config, std::move(names), std::move(weights));
}

void rms_norm(std::span<const float> x, std::span<const float> scale,
              std::span<float> out) {
  double ss = 0.0;
  for (float v : x) ss += static_cast<double>(v) * v;
  const double inv = 1.0 / std::sqrt(ss / static_cast<double>(x.size()) + 1e-6);
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = static_cast<float>(x[i] * inv) * scale[i];
  }
}

void apply_rope_inplace(std::span<float> vec, std::int64_t position, double theta) {
  if (vec.size() % 2 != 0) throw ShapeError("RoPE requires an even-length vector");
  const double d = static_cast<double>(vec.size());
  for (std::size_t i = 0; i < vec.size() / 2; ++i) {
    const double angle =
        static_cast<double>(position) * std::pow(theta, -2.0 * static_cast<double>(i) / d);
    const double cs = std::cos(angle);
    const double sn = std::sin(angle);
    const double x0 = vec[2 * i];
    const double x1 = vec[2 * i + 1];
    vec[2 * i] = static_cast<float>(x0 * cs - x1 * sn);
    vec[2 * i + 1] = static_cast<float>(x0 * sn + x1 * cs);
  }
}

std::vector<float> apply_rope(std::span<const float> vec, std::int64_t position,
                              double theta) {
  std::vector<float> out(vec.begin(), vec.end());
  apply_rope_inplace(out, position, theta);
  return out;
}

namespace {

// y = W x (+ scale * B (A x) when a delta targets the slot).
void project(const Matrix& w, const LowRankDelta* delta, std::span<const float> x,
             std::span<float> y) {
  matvec(w, x, y);
  if (!delta) return;
  const Matrix& a = *delta->a;
  const Matrix& b = *delta->b;
  std::vector<float> ax(a.rows);
  matvec(a, x, ax);
  for (std::size_t r = 0; r < b.rows; ++r) {
    double acc = 0.0;
    for (std::size_t k = 0; k < b.cols; ++k) acc += static_cast<double>(b.at(r, k) * ax[k]);
    y[r] = static_cast<float>(static_cast<double>(y[r]) + delta->scale * acc);
  }
}

float silu(float x) { return x / (1.0f + std::exp(-x)); }

}  // namespace

std::vector<float> lm_head(const TinyLM& model, std::span<const float> hidden) {
  const auto& cfg = model.config();
  std::vector<float> normed(cfg.d_model);
  rms_norm(hidden, model.weight(model.final_norm_slot()).dense.data, normed);
  std::vector<float> logits(cfg.vocab_size);
  matvec(model.output_projection(), normed, logits);
  return logits;
}

ForwardOutput forward(const TinyLM& model, const Tokens& tokens, KvCache* cache,
                      const ForwardOptions& opts) {
  const ModelConfig& cfg = model.config();
  const std::size_t n = tokens.size();
  for (Token t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab_size) {
      throw RangeError("token id " + std::to_string(t) + " out of range");
    }
  }
  if (opts.forward_counter) ++*opts.forward_counter;

  KvCache scratch = KvCache::for_model(cfg);
  KvCache& kv = cache ? *cache : scratch;
  if (kv.n_layers() != cfg.n_layers || kv.n_kv_heads() != cfg.n_kv_heads ||
      kv.head_dim() != cfg.head_dim) {
    throw ShapeError("KV cache geometry does not match the model");
  }

  std::vector<std::int64_t> positions(n);
  if (opts.positions) {
    if (opts.positions->size() != n) throw ShapeError("positions length mismatch");
    positions = *opts.positions;
  } else {
    const std::int64_t start = kv.next_position();
    for (std::size_t i = 0; i < n; ++i) positions[i] = start + static_cast<std::int64_t>(i);
  }
  for (auto p : positions) {
    if (p < 0 || static_cast<std::size_t>(p) >= cfg.max_seq) {
      throw RangeError("position " + std::to_string(p) + " exceeds max_seq");
    }
  }

  // Resolve low-rank deltas to slot indices once.
  std::vector<const LowRankDelta*> deltas(model.weights().size(), nullptr);
  if (opts.deltas) {
    for (const auto& [name, d] : *opts.deltas) deltas[model.slot_index(name)] = &d;
  }

  const std::size_t d = cfg.d_model;
  const std::size_t hd = cfg.head_dim;
  const std::size_t nh = cfg.n_heads;
  const std::size_t nkv = cfg.n_kv_heads;
  const std::size_t group = nh / nkv;
  const std::size_t ffn = cfg.ffn_dim();
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));

  ForwardOutput out;
  if (opts.capture_attn) {
    out.attn_rows.emplace(cfg.n_layers, std::vector<std::vector<float>>(n));
    if (opts.per_head) {
      out.attn_heads.emplace(cfg.n_layers, std::vector<std::vector<std::vector<float>>>(n));
    }
  }

  Matrix x(n, d);
  const Matrix& embed = model.weight(model.token_embed_slot()).dense;
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(embed.row(static_cast<std::size_t>(tokens[i])).begin(), d, x.row(i).begin());
  }

  std::vector<float> h(d), q(nh * hd), k(nkv * hd), v(nkv * hd), att(nh * hd), o(d);
  std::vector<float> gate(ffn), up(ffn), act(ffn), down(d);
  std::vector<double> probs, avg, acc(hd);

  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const LayerSlots& s = model.layer(l);
    const auto& attn_norm = model.weight(s.attn_norm).dense.data;
    const auto& mlp_norm = model.weight(s.mlp_norm).dense.data;
    for (std::size_t i = 0; i < n; ++i) {
      rms_norm(x.row(i), attn_norm, h);
      project(model.weight(s.attn_q).dense, deltas[s.attn_q], h, q);
      project(model.weight(s.attn_k).dense, deltas[s.attn_k], h, k);
      project(model.weight(s.attn_v).dense, deltas[s.attn_v], h, v);
      for (std::size_t hh = 0; hh < nh; ++hh) {
        apply_rope_inplace(std::span<float>(q).subspan(hh * hd, hd), positions[i],
                           cfg.rope_theta);
      }
      for (std::size_t kh = 0; kh < nkv; ++kh) {
        apply_rope_inplace(std::span<float>(k).subspan(kh * hd, hd), positions[i],
                           cfg.rope_theta);
      }

      const std::size_t kept = kv.kept(l);
      const std::size_t len = kept + 1;
      probs.assign(len, 0.0);
      avg.assign(len, 0.0);
      std::vector<std::vector<float>> per_head;
      for (std::size_t hh = 0; hh < nh; ++hh) {
        const std::size_t kh = hh / group;
        const float* qh = q.data() + hh * hd;
        double mx = -1e300;
        for (std::size_t j = 0; j < len; ++j) {
          const float* kj = j < kept ? kv.key(l, j).data() + kh * hd : k.data() + kh * hd;
          double dot = 0.0;
          for (std::size_t t = 0; t < hd; ++t) dot += static_cast<double>(qh[t] * kj[t]);
          probs[j] = dot * inv_sqrt;
          mx = std::max(mx, probs[j]);
        }
        double sum = 0.0;
        for (auto& p : probs) {
          p = std::exp(p - mx);
          sum += p;
        }
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t j = 0; j < len; ++j) {
          probs[j] /= sum;
          avg[j] += probs[j];
          const float* vj = j < kept ? kv.value(l, j).data() + kh * hd : v.data() + kh * hd;
          for (std::size_t t = 0; t < hd; ++t) acc[t] += probs[j] * vj[t];
        }
        for (std::size_t t = 0; t < hd; ++t) att[hh * hd + t] = static_cast<float>(acc[t]);
        if (opts.capture_attn && opts.per_head) {
          per_head.emplace_back(probs.begin(), probs.end());
        }
      }

      if (opts.capture_attn) {
        double total = 0.0;
        for (double a : avg) total += a;
        std::vector<float> row(len);
        for (std::size_t j = 0; j < len; ++j) row[j] = static_cast<float>(avg[j] / total);
        kv.append(l, k, v, positions[i], std::span<const float>(row));
        (*out.attn_rows)[l][i] = std::move(row);
        if (opts.per_head) (*out.attn_heads)[l][i] = std::move(per_head);
      } else {
        kv.append(l, k, v, positions[i]);
      }

      project(model.weight(s.attn_o).dense, deltas[s.attn_o], att, o);
      auto xi = x.row(i);
      for (std::size_t t = 0; t < d; ++t) xi[t] += o[t];

      rms_norm(xi, mlp_norm, h);
      project(model.weight(s.mlp_gate).dense, deltas[s.mlp_gate], h, gate);
      project(model.weight(s.mlp_up).dense, deltas[s.mlp_up], h, up);
      for (std::size_t t = 0; t < ffn; ++t) act[t] = silu(gate[t]) * up[t];
      project(model.weight(s.mlp_down).dense, deltas[s.mlp_down], act, down);
      for (std::size_t t = 0; t < d; ++t) xi[t] += down[t];
    }
  }

  out.final_hidden = x;
  out.logits = Matrix(n, cfg.vocab_size);
  const Matrix& head_w = model.output_projection();
  const std::size_t head_slot =
      model.lm_head_slot() ? *model.lm_head_slot() : model.token_embed_slot();
  const auto& fnorm = model.weight(model.final_norm_slot()).dense.data;
  for (std::size_t i = 0; i < n; ++i) {
    rms_norm(x.row(i), fnorm, h);
    project(head_w, deltas[head_slot], h, out.logits.row(i));
  }
  return out;
}

Tokens greedy_decode(const TinyLM& model, const Tokens& prompt, std::size_t max_new,
                     std::size_t* forward_counter, const DeltaMap* deltas) {
  if (prompt.empty()) throw ContractError("greedy_decode requires a nonempty prompt");
  Tokens out = prompt;
  if (max_new == 0) return out;
  KvCache cache = KvCache::for_model(model.config());
  ForwardOptions opts;
  opts.forward_counter = forward_counter;
  opts.deltas = deltas;
  ForwardOutput fo = forward(model, prompt, &cache, opts);
  for (std::size_t step = 0; step < max_new; ++step) {
    const auto next = static_cast<Token>(argmax(fo.logits.row(fo.logits.rows - 1)));
    out.push_back(next);
    if (step + 1 == max_new) break;
    fo = forward(model, Tokens{next}, &cache, opts);
  }
  return out;
}

PatchGrid pixel_shuffle(const PatchGrid& g, std::size_t r) {
  if (r == 0) throw ShapeError("pixel_shuffle factor must be positive");
  if (g.rows % r != 0 || g.cols % r != 0) {
    throw ShapeError("pixel_shuffle: grid " + std::to_string(g.rows) + "x" +
                     std::to_string(g.cols) + " not divisible by " + std::to_string(r));
  }
  if (g.data.size() != g.rows * g.cols * g.dim) throw ShapeError("patch grid data size");
  PatchGrid out(g.rows / r, g.cols / r, g.dim * r * r);
  for (std::size_t bi = 0; bi < out.rows; ++bi) {
    for (std::size_t bj = 0; bj < out.cols; ++bj) {
      float* dst = out.data.data() + (bi * out.cols + bj) * out.dim;
      for (std::size_t a = 0; a < r; ++a) {
        for (std::size_t b = 0; b < r; ++b) {
          const float* src = g.data.data() + ((bi * r + a) * g.cols + (bj * r + b)) * g.dim;
          std::copy_n(src, g.dim, dst + (a * r + b) * g.dim);
        }
      }
    }
  }
  return out;
}

PatchGrid pixel_unshuffle(const PatchGrid& g, std::size_t r) {
  if (r == 0 || g.dim % (r * r) != 0) {
    throw ShapeError("pixel_unshuffle: patch dim not divisible by r*r");
  }
  PatchGrid out(g.rows * r, g.cols * r, g.dim / (r * r));
  for (std::size_t bi = 0; bi < g.rows; ++bi) {
    for (std::size_t bj = 0; bj < g.cols; ++bj) {
      const float* src = g.data.data() + (bi * g.cols + bj) * g.dim;
      for (std::size_t a = 0; a < r; ++a) {
        for (std::size_t b = 0; b < r; ++b) {
          float* dst = out.data.data() + ((bi * r + a) * out.cols + (bj * r + b)) * out.dim;
          std::copy_n(src + (a * r + b) * out.dim, out.dim, dst);
        }
      }
    }
  }
  return out;
}

}  // namespace edgelab
