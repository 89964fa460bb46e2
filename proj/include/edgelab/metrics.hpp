#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "edgelab/common.hpp"

namespace edgelab {

// Whitespace split with ASCII lowercase folding; no stemming, no stopwords.
std::vector<std::string> tokenize(const std::string& text);

struct RougeScore {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

// Clipped n-gram overlap; empty n-gram sets give all zeros.
RougeScore rouge_n(const std::vector<std::string>& reference,
                   const std::vector<std::string>& hypothesis, std::size_t n);
RougeScore rouge_l(const std::vector<std::string>& reference,
                   const std::vector<std::string>& hypothesis);
std::size_t lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b);

// Declared in every report that carries ROUGE numbers.
inline constexpr const char* kRougeVariant =
    "rouge-f1, clipped counts, whitespace tokens, lowercase, no stemming";

struct RunRecord {
  std::vector<Tokens> prompts;
  std::vector<Tokens> outputs;
  std::uint64_t target_forwards = 0;
  std::uint64_t wall_ns = 0;
  std::uint64_t cache_bytes = 0;
};

struct SpeedReport {
  std::uint64_t baseline_target_forwards = 0;
  std::uint64_t method_target_forwards = 0;
  std::uint64_t wall_ns_baseline = 0;
  std::uint64_t wall_ns_method = 0;
  std::uint64_t baseline_cache_bytes = 0;
  std::uint64_t method_cache_bytes = 0;
  double speedup_forwards = 0.0;
  double speedup_wall = 0.0;
  double memory_reduction = 0.0;  // 1 - method_bytes / baseline_bytes
  bool outputs_match = false;
};

SpeedReport summarize_runs(const RunRecord& baseline, const RunRecord& method);

}  // namespace edgelab
