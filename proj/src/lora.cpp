#include "edgelab/lora.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "edgelab/json_io.hpp"
#include "edgelab/kv_cache.hpp"

namespace edgelab {

Matrix LoraAdapter::delta(const std::string& slot) const {
  const LoraPair& p = targets.at(slot);
  Matrix d(p.b.rows, p.a.cols);
  const double s = alpha / static_cast<double>(rank);
  for (std::size_t o = 0; o < p.b.rows; ++o) {
    for (std::size_t i = 0; i < p.a.cols; ++i) {
      double acc = 0.0;
      for (std::size_t k = 0; k < rank; ++k) {
        acc += static_cast<double>(p.b.at(o, k)) * p.a.at(k, i);
      }
      d.at(o, i) = static_cast<float>(s * acc);
    }
  }
  return d;
}

DeltaMap LoraAdapter::delta_map() const {
  DeltaMap m;
  for (const auto& [slot, p] : targets) m[slot] = {&p.a, &p.b, scale()};
  return m;
}

LoraAdapter create_adapter(const TinyLM& model, const std::vector<std::string>& target_slots,
                           std::size_t rank, double alpha, std::uint64_t seed,
                           std::string name) {
  if (rank == 0) throw ConfigError("LoRA rank must be positive");
  if (!(alpha > 0.0)) throw ConfigError("LoRA alpha must be positive");
  if (target_slots.empty()) throw ConfigError("LoRA adapter needs at least one target slot");
  const auto matrix = model.matrix_slots();
  LoraAdapter ad;
  ad.name = std::move(name);
  ad.rank = rank;
  ad.alpha = alpha;
  for (const auto& slot : target_slots) {
    if (std::find(matrix.begin(), matrix.end(), slot) == matrix.end()) {
      throw ConfigError("unknown or non-matrix target slot '" + slot + "'");
    }
    const auto [out, in] = slot_shape(model.config(), slot);
    if (rank > std::min(out, in)) {
      throw ConfigError("LoRA rank " + std::to_string(rank) + " exceeds slot '" + slot +
                        "' dimension " + std::to_string(std::min(out, in)));
    }
    LoraPair p{Matrix(rank, in), Matrix(out, rank)};
    Rng rng(derive_seed(seed, "lora." + slot));
    p.a.data = normal_vector(rng, rank * in, 0.02);
    ad.targets[slot] = std::move(p);
  }
  return ad;
}

Matrix merge(const Matrix& base_weight, const LoraAdapter& adapter, const std::string& slot) {
  const LoraPair& p = adapter.targets.at(slot);
  if (p.b.rows != base_weight.rows || p.a.cols != base_weight.cols) {
    throw ShapeError("adapter shape does not match slot '" + slot + "'");
  }
  Matrix out = base_weight;
  const Matrix d = adapter.delta(slot);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += d.data[i];
  return out;
}

TinyLM merge_model(const TinyLM& base, const LoraAdapter& adapter) {
  std::vector<Weight> w = base.weights();
  for (const auto& [slot, _] : adapter.targets) {
    const std::size_t i = base.slot_index(slot);
    w[i] = Weight{merge(base.weight(i).dense, adapter, slot), std::nullopt};
  }
  return TinyLM(base.config(), base.slot_names(), std::move(w));
}

AdapterRegistry::AdapterRegistry(std::shared_ptr<const TinyLM> base)
    : base_(std::move(base)), base_hash_(base_->hash()) {}

bool AdapterRegistry::base_intact() const { return base_->hash() == base_hash_; }

void AdapterRegistry::register_adapter(LoraAdapter adapter) {
  for (const auto& [slot, p] : adapter.targets) {
    const auto [out, in] = slot_shape(base_->config(), slot);
    if (!base_->has_slot(slot) || p.a.cols != in || p.b.rows != out ||
        p.a.rows != adapter.rank || p.b.cols != adapter.rank) {
      throw ShapeError("adapter '" + adapter.name + "' does not fit slot '" + slot + "'");
    }
  }
  const std::string name = adapter.name;
  adapters_[name] = std::make_shared<const LoraAdapter>(std::move(adapter));
}

void AdapterRegistry::activate(const std::optional<std::string>& name) {
  if (name && !adapters_.count(*name)) {
    throw ConfigError("no adapter named '" + *name + "' is registered");
  }
  active_ = name;
}

const LoraAdapter& AdapterRegistry::adapter(const std::string& name) const {
  const auto it = adapters_.find(name);
  if (it == adapters_.end()) throw ConfigError("no adapter named '" + name + "'");
  return *it->second;
}

std::vector<std::string> AdapterRegistry::adapter_names() const {
  std::vector<std::string> out;
  for (const auto& [n, _] : adapters_) out.push_back(n);
  return out;
}

ForwardOutput AdapterRegistry::apply_forward(const Tokens& tokens, KvCache* cache,
                                             ForwardOptions opts) const {
  // Snapshot so a concurrent activate() cannot swap the adapter mid-forward.
  std::shared_ptr<const LoraAdapter> snap;
  if (active_) snap = adapters_.at(*active_);
  if (!snap) return forward(*base_, tokens, cache, opts);
  const DeltaMap deltas = snap->delta_map();
  opts.deltas = &deltas;
  return forward(*base_, tokens, cache, opts);
}

ForwardOutput apply_forward(const AdapterRegistry& registry, const Tokens& tokens,
                            KvCache* cache) {
  return registry.apply_forward(tokens, cache);
}

namespace {

constexpr std::array<char, 8> kLoraMagic = {'E', 'D', 'G', 'E', 'L', 'O', 'R', 'A'};

Json put(std::vector<std::uint8_t>& blob, const Matrix& m) {
  const std::size_t off = blob.size();
  blob.resize(off + m.size() * sizeof(float));
  if (!m.empty()) std::memcpy(blob.data() + off, m.data.data(), m.size() * sizeof(float));
  return Json{{"shape", {m.rows, m.cols}}, {"offset", off}, {"nbytes", m.size() * sizeof(float)}};
}

Matrix get(const std::vector<std::uint8_t>& blob, const Json& j) {
  Matrix m(j.at("shape")[0].get<std::size_t>(), j.at("shape")[1].get<std::size_t>());
  const auto off = j.at("offset").get<std::size_t>();
  const auto nbytes = j.at("nbytes").get<std::size_t>();
  if (nbytes != m.size() * sizeof(float) || off + nbytes > blob.size()) {
    throw FormatError("adapter matrix reference out of bounds");
  }
  if (nbytes) std::memcpy(m.data.data(), blob.data() + off, nbytes);
  return m;
}

std::string file_sha256(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return sha256_hex(bytes);
}

}  // namespace

void save_adapter(const LoraAdapter& adapter, const std::string& path) {
  std::vector<std::uint8_t> blob;
  Json targets = Json::array();
  for (const auto& [slot, p] : adapter.targets) {
    targets.push_back({{"slot", slot}, {"a", put(blob, p.a)}, {"b", put(blob, p.b)}});
  }
  const std::string text = Json{{"format", "edgelab-lora"},
                                {"version", 1},
                                {"name", adapter.name},
                                {"rank", adapter.rank},
                                {"alpha", adapter.alpha},
                                {"targets", targets}}
                               .dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open '" + path + "' for writing");
  out.write(kLoraMagic.data(), kLoraMagic.size());
  const std::uint32_t version = 1, reserved = 0;
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&version), 4);
  out.write(reinterpret_cast<const char*>(&reserved), 4);
  out.write(reinterpret_cast<const char*>(&len), 8);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  out.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
}

LoraAdapter load_adapter(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (magic != kLoraMagic) throw FormatError("'" + path + "' is not an edgelab adapter");
  std::uint32_t version = 0, reserved = 0;
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&version), 4);
  in.read(reinterpret_cast<char*>(&reserved), 4);
  in.read(reinterpret_cast<char*>(&len), 8);
  if (version != 1) throw FormatError("unsupported adapter version");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  std::vector<std::uint8_t> blob((std::istreambuf_iterator<char>(in)),
                                 std::istreambuf_iterator<char>());
  const Json h = Json::parse(text);
  LoraAdapter ad;
  ad.name = h.at("name").get<std::string>();
  ad.rank = h.at("rank").get<std::size_t>();
  ad.alpha = h.at("alpha").get<double>();
  for (const Json& t : h.at("targets")) {
    ad.targets[t.at("slot").get<std::string>()] = {get(blob, t.at("a")), get(blob, t.at("b"))};
  }
  return ad;
}

std::string write_registry_manifest(const AdapterRegistry& registry, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  Json adapters = Json::array();
  for (const auto& name : registry.adapter_names()) {
    const std::string file = name + ".lora";
    const std::string path = (fs::path(dir) / file).string();
    save_adapter(registry.adapter(name), path);
    adapters.push_back({{"name", name}, {"file", file}, {"sha256", file_sha256(path)}});
  }
  const std::string manifest = (fs::path(dir) / "manifest.json").string();
  std::ofstream out(manifest);
  out << Json{{"format", "edgelab-registry"},
              {"version", 1},
              {"base_hash", registry.base_hash()},
              {"adapters", adapters}}
             .dump(2)
      << '\n';
  return manifest;
}

bool verify_registry_manifest(const std::string& manifest_path, const TinyLM& base) {
  namespace fs = std::filesystem;
  std::ifstream in(manifest_path);
  if (!in) throw FormatError("cannot open '" + manifest_path + "'");
  const Json m = Json::parse(in);
  if (m.at("base_hash").get<std::string>() != base.hash()) return false;
  const fs::path dir = fs::path(manifest_path).parent_path();
  for (const Json& a : m.at("adapters")) {
    const auto path = (dir / a.at("file").get<std::string>()).string();
    if (!fs::exists(path) || file_sha256(path) != a.at("sha256").get<std::string>()) return false;
  }
  return true;
}

QalftProblem make_qalft_problem(const QuantTensor& base,
                                const std::vector<std::vector<float>>& xs,
                                const std::vector<std::vector<float>>& ys, double scale) {
  if (xs.empty() || xs.size() != ys.size()) {
    throw ContractError("QALFT needs a nonempty, paired dataset");
  }
  QalftProblem p;
  p.out = base.rows();
  p.in = base.cols();
  p.scale = scale;
  const Matrix w = dequantize(base);
  p.w.assign(w.data.begin(), w.data.end());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (xs[i].size() != p.in || ys[i].size() != p.out) {
      throw ShapeError("QALFT sample has the wrong width");
    }
    p.x.emplace_back(xs[i].begin(), xs[i].end());
    p.y.emplace_back(ys[i].begin(), ys[i].end());
  }
  return p;
}

namespace {

// M = W + s * B * A  (out x in)
std::vector<double> effective(const QalftProblem& p, const std::vector<double>& a,
                              const std::vector<double>& b, std::size_t r) {
  std::vector<double> m = p.w;
  for (std::size_t o = 0; o < p.out; ++o) {
    for (std::size_t k = 0; k < r; ++k) {
      const double bk = p.scale * b[o * r + k];
      if (bk == 0.0) continue;
      for (std::size_t i = 0; i < p.in; ++i) m[o * p.in + i] += bk * a[k * p.in + i];
    }
  }
  return m;
}

}  // namespace

double QalftProblem::loss(const std::vector<double>& a, const std::vector<double>& b,
                          std::size_t rank) const {
  const auto m = effective(*this, a, b, rank);
  double total = 0.0;
  for (std::size_t n = 0; n < x.size(); ++n) {
    for (std::size_t o = 0; o < out; ++o) {
      double e = -y[n][o];
      for (std::size_t i = 0; i < in; ++i) e += m[o * in + i] * x[n][i];
      total += e * e;
    }
  }
  return total / static_cast<double>(x.size() * out);
}

void QalftProblem::gradients(const std::vector<double>& a, const std::vector<double>& b,
                             std::size_t r, std::vector<double>& grad_a,
                             std::vector<double>& grad_b) const {
  const auto m = effective(*this, a, b, r);
  // G = 2/(N*out) * sum_n e_n x_n^T
  std::vector<double> g(out * in, 0.0);
  const double c = 2.0 / static_cast<double>(x.size() * out);
  std::vector<double> e(out);
  for (std::size_t n = 0; n < x.size(); ++n) {
    for (std::size_t o = 0; o < out; ++o) {
      double v = -y[n][o];
      for (std::size_t i = 0; i < in; ++i) v += m[o * in + i] * x[n][i];
      e[o] = c * v;
    }
    for (std::size_t o = 0; o < out; ++o) {
      for (std::size_t i = 0; i < in; ++i) g[o * in + i] += e[o] * x[n][i];
    }
  }
  grad_a.assign(r * in, 0.0);  // s * B^T G
  grad_b.assign(out * r, 0.0);  // s * G A^T
  for (std::size_t o = 0; o < out; ++o) {
    for (std::size_t k = 0; k < r; ++k) {
      double gb = 0.0;
      const double bok = b[o * r + k];
      for (std::size_t i = 0; i < in; ++i) {
        gb += g[o * in + i] * a[k * in + i];
        grad_a[k * in + i] += scale * bok * g[o * in + i];
      }
      grad_b[o * r + k] = scale * gb;
    }
  }
}

double qalft_gradient_check(const QalftProblem& p, std::size_t r, std::uint64_t seed,
                            double eps) {
  Rng rng(derive_seed(seed, "qalft.gradcheck"));
  std::normal_distribution<double> n01(0.0, 1.0);
  std::vector<double> a(r * p.in), b(p.out * r);
  for (auto& v : a) v = n01(rng);
  for (auto& v : b) v = n01(rng);
  std::vector<double> ga, gb;
  p.gradients(a, b, r, ga, gb);

  double worst = 0.0;
  auto probe = [&](std::vector<double>& params, const std::vector<double>& grad) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      const double keep = params[i];
      params[i] = keep + eps;
      const double up = p.loss(a, b, r);
      params[i] = keep - eps;
      const double down = p.loss(a, b, r);
      params[i] = keep;
      const double fd = (up - down) / (2.0 * eps);
      const double rel = std::abs(grad[i] - fd) / std::max(std::abs(grad[i]) + std::abs(fd), 1e-8);
      worst = std::max(worst, rel);
    }
  };
  probe(a, ga);
  probe(b, gb);
  return worst;
}

QalftResult qalft_fit(const QuantTensor& base, const std::vector<std::vector<float>>& xs,
                      const std::vector<std::vector<float>>& ys, const QalftOptions& opts) {
  if (!base.frozen()) {
    throw ContractError("QALFT requires a frozen quantized base");
  }
  if (opts.rank == 0 || opts.rank > std::min(base.rows(), base.cols())) {
    throw ConfigError("QALFT rank out of range");
  }
  const std::size_t r = opts.rank;
  const QalftProblem p =
      make_qalft_problem(base, xs, ys, opts.alpha / static_cast<double>(r));

  Rng rng(derive_seed(opts.seed, "lora.linear"));
  const auto a0 = normal_vector(rng, r * p.in, 0.02);
  std::vector<double> a(a0.begin(), a0.end());
  std::vector<double> b(p.out * r, 0.0);

  QalftResult res;
  double loss = p.loss(a, b, r);
  res.loss_trace.push_back(loss);
  double lr = opts.learning_rate;
  std::vector<double> ga, gb, ta, tb;
  for (std::size_t step = 0; step < opts.steps; ++step) {
    if (loss <= opts.tolerance) break;
    p.gradients(a, b, r, ga, gb);
    double gnorm2 = 0.0;
    for (double v : ga) gnorm2 += v * v;
    for (double v : gb) gnorm2 += v * v;
    if (gnorm2 == 0.0) break;

    double next = loss;
    double t = opts.line_search ? lr * 2.0 : lr;
    for (int tries = 0; tries < 60; ++tries) {
      ta = a;
      tb = b;
      for (std::size_t i = 0; i < ta.size(); ++i) ta[i] -= t * ga[i];
      for (std::size_t i = 0; i < tb.size(); ++i) tb[i] -= t * gb[i];
      next = p.loss(ta, tb, r);
      if (!opts.line_search || next <= loss - 1e-4 * t * gnorm2) break;
      t *= 0.5;
    }
    if (opts.line_search && next > loss) break;  // no descent step found
    a.swap(ta);
    b.swap(tb);
    lr = t;
    loss = next;
    res.loss_trace.push_back(loss);
  }

  LoraPair pair{Matrix(r, p.in), Matrix(p.out, r)};
  for (std::size_t i = 0; i < a.size(); ++i) pair.a.data[i] = static_cast<float>(a[i]);
  for (std::size_t i = 0; i < b.size(); ++i) pair.b.data[i] = static_cast<float>(b[i]);
  res.adapter.name = "qalft";
  res.adapter.rank = r;
  res.adapter.alpha = opts.alpha;
  res.adapter.targets["linear"] = std::move(pair);

  const auto& stored = res.adapter.targets.at("linear");
  res.final_loss = p.loss(std::vector<double>(stored.a.data.begin(), stored.a.data.end()),
                          std::vector<double>(stored.b.data.begin(), stored.b.data.end()), r);
  return res;
}

}  // namespace edgelab
