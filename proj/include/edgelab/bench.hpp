#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "edgelab/json_io.hpp"
#include "edgelab/kv_cache.hpp"
#include "edgelab/model.hpp"
#include "edgelab/quant_tensor.hpp"

namespace edgelab {

inline constexpr const char* kArtifactVersion = "edgelab-report/1";

// ---- corpus -----------------------------------------------------------------

// Reserved ids of the synthetic corpora. Filler text lives in [32, 224), the
// needle's key and value tokens in the "band" [224, 256).
inline constexpr Token kNeedleMark = 1;
inline constexpr Token kQueryMark = 2;
inline constexpr Token kCopySep = 3;
inline constexpr Token kFillerLo = 32;
inline constexpr Token kBandLo = 224;
inline constexpr Token kBandHi = 256;

struct NeedleSample {
  Tokens prompt;
  std::size_t answer_begin = 0;  // span of value tokens inside the prompt
  std::size_t answer_len = 0;
  std::size_t needle_pos = 0;
  Tokens answer() const;
};

// `context_len` filler tokens; the fact [MARK k1 k2 v1..v4] is inserted before
// filler index `needle_pos`; the query [QMARK k1 k2] closes the prompt.
NeedleSample gen_needle(std::size_t context_len, std::size_t needle_pos, std::uint64_t seed);

struct CopySample {
  Tokens prompt;  // s ++ [SEP] ++ s[0 .. len/2)
  Tokens answer;  // s[len/2 .. len)
};
CopySample gen_copy(std::size_t len, std::uint64_t seed);

struct DialogueSample {
  std::string text;
  std::string summary;  // entity mentions in order of first appearance
  Tokens prompt;        // bytes of text (newline-terminated) ++ "Summary:"
};
DialogueSample gen_dialogue(std::size_t turns, const std::vector<std::string>& lexicon,
                            std::uint64_t seed);
std::vector<std::string> default_dialogue_lexicon();

// Turns one attention head per layer into a retrieval head: every query
// attends strongly to keys of band tokens, so the needle stands out to
// score-based eviction. Only the embedding and the q/k rows of the lowest
// rotary frequency pair are rewritten.
TinyLM plant_retrieval_head(const TinyLM& model, double strength = 1.4);

struct TaskSpec;
// Needle position of a trial: the configured one, else drawn from the trial seed.
std::size_t needle_position(const TaskSpec& task, std::uint64_t trial_seed);

// ---- configuration ----------------------------------------------------------

struct TaskSpec {
  enum class Kind { Needle, Copy, Dialogue } kind = Kind::Needle;
  std::size_t context_len = 2048;
  std::optional<std::size_t> needle_pos;  // drawn per trial when absent
  std::size_t len = 32;
  std::size_t turns = 6;
  std::vector<std::string> lexicon;
};

struct EvictMethod {
  std::vector<EvictionPolicy> policies;
  std::vector<double> ratios{0.25, 0.5};
  std::size_t decode_len = 4;
  std::size_t window_capacity = 16;
  bool plant_retrieval_head = true;
};

struct SpecMethod {
  // "self" (draft == target), "perturbed", "independent", "feature_reuse"
  std::vector<std::string> drafts{"self", "perturbed", "feature_reuse"};
  std::vector<std::size_t> ks{1, 4, 8};
  std::size_t max_new = 32;
  double perturb_stddev = 0.002;
  std::optional<ModelConfig> draft_model;
};

struct QuantPlanSpec {
  std::string name;
  QuantSpec quant;
  std::optional<SparsitySpec> sparsity;
};

struct QuantMethod {
  std::vector<QuantPlanSpec> plans;
  std::optional<double> budget;
  std::size_t calib_sequences = 4;
  std::size_t calib_len = 32;
};

struct LoraMethod {
  std::size_t adapters = 3;
  std::size_t rank = 4;
  double alpha = 8.0;
  std::size_t swaps = 100;
  std::vector<std::string> targets{"layers.0.attn_q", "layers.0.attn_v"};
  QuantSpec base_quant;
  std::size_t qalft_out = 16;
  std::size_t qalft_in = 32;
  std::size_t qalft_samples = 64;
  std::size_t qalft_steps = 4000;
  std::size_t grad_checks = 20;
};

using MethodSpec = std::variant<EvictMethod, SpecMethod, QuantMethod, LoraMethod>;

struct ExperimentConfig {
  ModelConfig model;
  std::uint64_t seed = 0;
  std::size_t trials = 1;
  std::size_t threads = 0;  // 0 = hardware concurrency
  TaskSpec task;
  MethodSpec method;
  std::optional<std::string> out_dir;
  Json raw;  // the validated input, echoed into reports
};

// The published JSON schema for experiment configs.
const Json& experiment_schema();
// Errors as "<json pointer>: <message>"; empty when valid. Supports the subset
// of JSON Schema the published schema uses.
std::vector<std::string> validate_against_schema(const Json& instance, const Json& schema);
ExperimentConfig parse_experiment(const Json& j);
ExperimentConfig load_experiment(const std::string& path);
std::string method_kind(const ExperimentConfig& config);

// ---- reports ----------------------------------------------------------------

struct TrialRecord {
  std::size_t trial = 0;
  std::uint64_t seed = 0;
  std::string group;  // aggregation key, e.g. "heavy_hitter@0.50"
  Json metrics;       // flat object of numbers, aggregated per group
  Json info;          // non-aggregated detail
};

struct RunReport {
  std::string kind;
  Json config;
  std::uint64_t seed = 0;
  std::vector<TrialRecord> trials;
  Json aggregates;  // {group: {metric: {count, mean, min, max}}}
  Json metric_variants;
  Json extra;  // pipeline-specific summary (oracle checks, plan tables)
  std::string version = kArtifactVersion;

  Json to_json() const;
  static RunReport from_json(const Json& j);
};

Json recompute_aggregates(const std::vector<TrialRecord>& trials);
Json to_json(const TrialRecord& t);
TrialRecord trial_from_json(const Json& j);

// Writes trials.jsonl, report.json and (optionally) summary.csv into dir.
void write_report(const RunReport& report, const std::string& dir, bool csv);
// Versioned, column-stable CSV: one row per (group, metric).
std::string report_csv(const RunReport& report);

// ---- pipelines --------------------------------------------------------------

RunReport run_evict_bench(const ExperimentConfig& config);
RunReport run_spec_bench(const ExperimentConfig& config);
RunReport run_quant_bench(const ExperimentConfig& config);
RunReport run_lora_demo(const ExperimentConfig& config);
RunReport run_experiment(const ExperimentConfig& config);

// Attention trace of the first trial's prefill (evict experiments).
std::vector<TraceRecord> capture_trace(const ExperimentConfig& config);
// Per-round speculation records of the first trial, every (draft, k) pair:
// {"draft","k","round","proposed","accepted","emitted"}.
std::vector<Json> capture_round_trace(const ExperimentConfig& config);

// Runs body(i) for i in [0, n) on up to `threads` workers (0 = hardware).
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& body);

}  // namespace edgelab
