#include "edgelab/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <map>
#include <sstream>

namespace edgelab {

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string w;
  while (in >> w) {
    for (auto& c : w) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    out.push_back(std::move(w));
  }
  return out;
}

namespace {

RougeScore score(double overlap, double hyp_total, double ref_total) {
  RougeScore s;
  s.precision = hyp_total > 0 ? overlap / hyp_total : 0.0;
  s.recall = ref_total > 0 ? overlap / ref_total : 0.0;
  const double d = s.precision + s.recall;
  s.f1 = d > 0 ? 2.0 * s.precision * s.recall / d : 0.0;
  return s;
}

std::map<std::vector<std::string>, std::size_t> ngram_counts(const std::vector<std::string>& t,
                                                             std::size_t n) {
  std::map<std::vector<std::string>, std::size_t> out;
  for (std::size_t i = 0; i + n <= t.size(); ++i) {
    ++out[std::vector<std::string>(t.begin() + static_cast<std::ptrdiff_t>(i),
                                   t.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return out;
}

}  // namespace

RougeScore rouge_n(const std::vector<std::string>& reference,
                   const std::vector<std::string>& hypothesis, std::size_t n) {
  if (n < 1) throw RangeError("ROUGE-N needs n >= 1");
  const auto ref = ngram_counts(reference, n);
  const auto hyp = ngram_counts(hypothesis, n);
  std::size_t overlap = 0, ref_total = 0, hyp_total = 0;
  for (const auto& [g, c] : ref) ref_total += c;
  for (const auto& [g, c] : hyp) {
    hyp_total += c;
    if (const auto it = ref.find(g); it != ref.end()) overlap += std::min(c, it->second);
  }
  return score(static_cast<double>(overlap), static_cast<double>(hyp_total),
               static_cast<double>(ref_total));
}

std::size_t lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

RougeScore rouge_l(const std::vector<std::string>& reference,
                   const std::vector<std::string>& hypothesis) {
  return score(static_cast<double>(lcs_length(reference, hypothesis)),
               static_cast<double>(hypothesis.size()), static_cast<double>(reference.size()));
}

SpeedReport summarize_runs(const RunRecord& baseline, const RunRecord& method) {
  if (baseline.prompts != method.prompts) {
    throw ContractError("runs decoded different prompt sets");
  }
  if (baseline.outputs.size() != method.outputs.size()) {
    throw ContractError("runs produced different numbers of outputs");
  }
  for (std::size_t i = 0; i < baseline.outputs.size(); ++i) {
    if (baseline.outputs[i].size() != method.outputs[i].size()) {
      throw ContractError("runs decoded prompt " + std::to_string(i) + " to different lengths");
    }
  }
  SpeedReport r;
  r.baseline_target_forwards = baseline.target_forwards;
  r.method_target_forwards = method.target_forwards;
  r.wall_ns_baseline = baseline.wall_ns;
  r.wall_ns_method = method.wall_ns;
  r.baseline_cache_bytes = baseline.cache_bytes;
  r.method_cache_bytes = method.cache_bytes;
  r.outputs_match = baseline.outputs == method.outputs;
  auto ratio = [](std::uint64_t a, std::uint64_t b) {
    return b ? static_cast<double>(a) / static_cast<double>(b) : 0.0;
  };
  r.speedup_forwards = ratio(baseline.target_forwards, method.target_forwards);
  r.speedup_wall = ratio(baseline.wall_ns, method.wall_ns);
  if (baseline.cache_bytes > 0) {
    r.memory_reduction = static_cast<double>(baseline.cache_bytes - std::min(baseline.cache_bytes, method.cache_bytes)) /
                         static_cast<double>(baseline.cache_bytes);
  }
  return r;
}

}  // namespace edgelab
