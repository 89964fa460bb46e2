#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "edgelab/model.hpp"
#include "edgelab/quant_tensor.hpp"

namespace edgelab {

struct LoraPair {
  Matrix a;  // r x in
  Matrix b;  // out x r
};

struct LoraAdapter {
  std::string name;
  std::size_t rank = 0;
  double alpha = 1.0;
  std::map<std::string, LoraPair> targets;

  float scale() const { return static_cast<float>(alpha / static_cast<double>(rank)); }
  // Effective (alpha/r) * B * A for one target.
  Matrix delta(const std::string& slot) const;
  DeltaMap delta_map() const;
};

// A ~ Normal(0, 0.02) seeded per slot, B = 0.
LoraAdapter create_adapter(const TinyLM& model, const std::vector<std::string>& target_slots,
                           std::size_t rank, double alpha, std::uint64_t seed,
                           std::string name = "adapter");

Matrix merge(const Matrix& base_weight, const LoraAdapter& adapter, const std::string& slot);
TinyLM merge_model(const TinyLM& base, const LoraAdapter& adapter);

// One frozen base plus N named adapters; at most one active at a time.
class AdapterRegistry {
 public:
  explicit AdapterRegistry(std::shared_ptr<const TinyLM> base);

  const TinyLM& base() const { return *base_; }
  const std::string& base_hash() const { return base_hash_; }
  // Recomputes the base hash and compares it with the one taken at construction.
  bool base_intact() const;

  void register_adapter(LoraAdapter adapter);
  void activate(const std::optional<std::string>& name);
  const std::optional<std::string>& active() const { return active_; }
  const LoraAdapter& adapter(const std::string& name) const;
  std::vector<std::string> adapter_names() const;

  ForwardOutput apply_forward(const Tokens& tokens, KvCache* cache,
                              ForwardOptions opts = {}) const;

 private:
  std::shared_ptr<const TinyLM> base_;
  std::string base_hash_;
  std::map<std::string, std::shared_ptr<const LoraAdapter>> adapters_;
  std::optional<std::string> active_;
};

ForwardOutput apply_forward(const AdapterRegistry& registry, const Tokens& tokens,
                            KvCache* cache);

// Adapter files and the registry manifest (docs/formats.md).
void save_adapter(const LoraAdapter& adapter, const std::string& path);
LoraAdapter load_adapter(const std::string& path);
// Writes one adapter file per registered adapter plus manifest.json into dir.
std::string write_registry_manifest(const AdapterRegistry& registry, const std::string& dir);
// True when the manifest's base hash matches `base` and every adapter file
// hashes to its recorded digest.
bool verify_registry_manifest(const std::string& manifest_path, const TinyLM& base);

// Single frozen quantized linear map y = (deq(W_q) + (alpha/r) B A) x, fitted by
// full-batch gradient descent on mean squared error.
struct QalftProblem {
  std::size_t out = 0, in = 0;
  std::vector<double> w;  // out x in, dequantized base
  std::vector<std::vector<double>> x;
  std::vector<std::vector<double>> y;
  double scale = 1.0;

  // L = 1/(N*out) * sum_i ||(W + s B A) x_i - y_i||^2
  double loss(const std::vector<double>& a, const std::vector<double>& b,
              std::size_t rank) const;
  void gradients(const std::vector<double>& a, const std::vector<double>& b, std::size_t rank,
                 std::vector<double>& grad_a, std::vector<double>& grad_b) const;
};

struct QalftOptions {
  std::size_t rank = 1;
  double alpha = 1.0;
  std::size_t steps = 2000;
  double learning_rate = 1.0;  // initial step; backtracking line search adapts it
  bool line_search = true;
  std::uint64_t seed = 0;
  double tolerance = 0.0;  // stop early when loss <= tolerance
};

struct QalftResult {
  LoraAdapter adapter;  // single target named "linear"
  std::vector<double> loss_trace;  // initial loss, then one entry per step taken
  double final_loss = 0.0;
};

QalftResult qalft_fit(const QuantTensor& base, const std::vector<std::vector<float>>& xs,
                      const std::vector<std::vector<float>>& ys, const QalftOptions& opts);

QalftProblem make_qalft_problem(const QuantTensor& base,
                                const std::vector<std::vector<float>>& xs,
                                const std::vector<std::vector<float>>& ys, double scale);

// Largest elementwise |g - fd| / max(|g| + |fd|, 1e-8) between the analytic
// gradients and central differences, at random A and B.
double qalft_gradient_check(const QalftProblem& problem, std::size_t rank, std::uint64_t seed,
                            double eps = 1e-4);

}  // namespace edgelab
