#include "edgelab/bench.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include "edgelab/lora.hpp"
#include "edgelab/metrics.hpp"
#include "edgelab/quant.hpp"
#include "edgelab/speculative.hpp"

namespace edgelab {

// ---- corpus -----------------------------------------------------------------

Tokens NeedleSample::answer() const {
  const auto b = prompt.begin() + static_cast<std::ptrdiff_t>(answer_begin);
  return Tokens(b, b + static_cast<std::ptrdiff_t>(answer_len));
}

namespace {

Tokens filler(Rng& rng, std::size_t n) {
  std::uniform_int_distribution<Token> pick(kFillerLo, kBandLo - 1);
  Tokens out(n);
  for (auto& t : out) t = pick(rng);
  return out;
}

}  // namespace

NeedleSample gen_needle(std::size_t context_len, std::size_t needle_pos, std::uint64_t seed) {
  if (context_len == 0 || needle_pos >= context_len) {
    throw RangeError("needle position " + std::to_string(needle_pos) + " outside context of " +
                     std::to_string(context_len));
  }
  Rng rng(derive_seed(seed, "needle"));
  const Tokens hay = filler(rng, context_len);

  Tokens band(static_cast<std::size_t>(kBandHi - kBandLo));
  std::iota(band.begin(), band.end(), kBandLo);
  std::shuffle(band.begin(), band.end(), rng);
  const Token k1 = band[0], k2 = band[1];

  NeedleSample s;
  s.needle_pos = needle_pos;
  s.prompt.assign(hay.begin(), hay.begin() + static_cast<std::ptrdiff_t>(needle_pos));
  s.prompt.insert(s.prompt.end(), {kNeedleMark, k1, k2});
  s.answer_begin = s.prompt.size();
  s.answer_len = 4;
  s.prompt.insert(s.prompt.end(), band.begin() + 2, band.begin() + 6);
  s.prompt.insert(s.prompt.end(), hay.begin() + static_cast<std::ptrdiff_t>(needle_pos), hay.end());
  s.prompt.insert(s.prompt.end(), {kQueryMark, k1, k2});
  return s;
}

std::size_t needle_position(const TaskSpec& task, std::uint64_t trial_seed) {
  if (task.needle_pos) return *task.needle_pos;
  if (task.context_len == 0) throw RangeError("needle task needs a nonempty context");
  Rng rng(derive_seed(trial_seed, "needle_pos"));
  return std::uniform_int_distribution<std::size_t>(0, task.context_len - 1)(rng);
}

CopySample gen_copy(std::size_t len, std::uint64_t seed) {
  if (len < 2) throw RangeError("copy task needs len >= 2");
  Rng rng(derive_seed(seed, "copy"));
  const Tokens s = filler(rng, len);
  CopySample c;
  c.prompt = s;
  c.prompt.push_back(kCopySep);
  c.prompt.insert(c.prompt.end(), s.begin(), s.begin() + static_cast<std::ptrdiff_t>(len / 2));
  c.answer.assign(s.begin() + static_cast<std::ptrdiff_t>(len / 2), s.end());
  return c;
}

std::vector<std::string> default_dialogue_lexicon() {
  return {"invoice", "refund", "tuesday", "warehouse", "contract", "router",
          "password", "shipment", "berlin",  "manager",   "printer", "deadline"};
}

DialogueSample gen_dialogue(std::size_t turns, const std::vector<std::string>& lexicon,
                            std::uint64_t seed) {
  if (turns == 0) throw RangeError("dialogue needs at least one turn");
  if (lexicon.empty()) throw ConfigError("dialogue lexicon is empty");
  static const std::vector<std::string> words = {
      "we",   "need", "to",    "check", "the",   "about", "please", "send",  "it",
      "soon", "yes",  "maybe", "again", "later", "with",  "for",    "today", "call"};
  Rng rng(derive_seed(seed, "dialogue"));
  std::uniform_int_distribution<std::size_t> pick_word(0, words.size() - 1);
  std::uniform_int_distribution<std::size_t> pick_entity(0, lexicon.size() - 1);
  std::uniform_int_distribution<std::size_t> pick_len(4, 8);

  DialogueSample d;
  std::vector<std::string> mentioned;
  for (std::size_t t = 0; t < turns; ++t) {
    d.text += (t % 2 == 0 ? "A:" : "B:");
    const std::size_t n = pick_len(rng);
    const std::size_t at = pick_len(rng) % n;
    for (std::size_t i = 0; i < n; ++i) {
      d.text += ' ';
      if (i == at) {
        const std::string& e = lexicon[pick_entity(rng)];
        d.text += e;
        if (std::find(mentioned.begin(), mentioned.end(), e) == mentioned.end()) {
          mentioned.push_back(e);
        }
      } else {
        d.text += words[pick_word(rng)];
      }
    }
    d.text += '\n';
  }
  for (std::size_t i = 0; i < mentioned.size(); ++i) {
    d.summary += (i ? " " : "") + mentioned[i];
  }
  const std::string full = d.text + "Summary:";
  for (unsigned char c : full) d.prompt.push_back(static_cast<Token>(c));
  return d;
}

TinyLM plant_retrieval_head(const TinyLM& model, double strength) {
  const ModelConfig& cfg = model.config();
  if (cfg.d_model < 2 || cfg.vocab_size < static_cast<std::size_t>(kBandHi)) {
    throw ConfigError("retrieval head needs d_model >= 2 and vocab_size >= 256");
  }
  const std::size_t d = cfg.d_model, hd = cfg.head_dim;
  const std::size_t bias_dim = d - 2, band_dim = d - 1;
  std::vector<Weight> w = model.weights();

  Matrix& embed = w[model.token_embed_slot()].dense;
  w[model.token_embed_slot()].quant.reset();
  for (std::size_t t = 0; t < cfg.vocab_size; ++t) {
    embed.at(t, bias_dim) = 1.0f;
    const bool band = t >= static_cast<std::size_t>(kBandLo) && t < static_cast<std::size_t>(kBandHi);
    embed.at(t, band_dim) = band ? 1.0f : 0.0f;
  }
  // Lowest rotary frequency pair: dims (hd-2, hd-1) of every head.
  const auto s = static_cast<float>(strength);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const LayerSlots& ls = model.layer(l);
    Matrix& wq = w[ls.attn_q].dense;
    Matrix& wk = w[ls.attn_k].dense;
    w[ls.attn_q].quant.reset();
    w[ls.attn_k].quant.reset();
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
      for (std::size_t r : {h * hd + hd - 2, h * hd + hd - 1}) {
        std::fill(wq.row(r).begin(), wq.row(r).end(), 0.0f);
      }
      wq.at(h * hd + hd - 2, bias_dim) = s;
    }
    for (std::size_t g = 0; g < cfg.n_kv_heads; ++g) {
      for (std::size_t r : {g * hd + hd - 2, g * hd + hd - 1}) {
        std::fill(wk.row(r).begin(), wk.row(r).end(), 0.0f);
      }
      wk.at(g * hd + hd - 2, band_dim) = s;
    }
  }
  return TinyLM(cfg, model.slot_names(), std::move(w));
}

// ---- reports ----------------------------------------------------------------

Json to_json(const TrialRecord& t) {
  return Json{{"trial", t.trial}, {"seed", t.seed}, {"group", t.group},
              {"metrics", t.metrics}, {"info", t.info}};
}

TrialRecord trial_from_json(const Json& j) {
  TrialRecord t;
  t.trial = j.at("trial").get<std::size_t>();
  t.seed = j.at("seed").get<std::uint64_t>();
  t.group = j.at("group").get<std::string>();
  t.metrics = j.at("metrics");
  t.info = j.value("info", Json::object());
  return t;
}

Json recompute_aggregates(const std::vector<TrialRecord>& trials) {
  struct Acc {
    std::size_t count = 0;
    double sum = 0.0, lo = 0.0, hi = 0.0;
  };
  std::map<std::string, std::map<std::string, Acc>> acc;
  for (const auto& t : trials) {
    for (const auto& [key, val] : t.metrics.items()) {
      double x = 0.0;
      if (val.is_boolean()) {
        x = val.get<bool>() ? 1.0 : 0.0;
      } else if (val.is_number()) {
        x = val.get<double>();
      } else {
        throw FormatError("metric '" + key + "' is not numeric");
      }
      Acc& a = acc[t.group][key];
      a.lo = a.count ? std::min(a.lo, x) : x;
      a.hi = a.count ? std::max(a.hi, x) : x;
      a.sum += x;
      ++a.count;
    }
  }
  Json out = Json::object();
  for (const auto& [group, metrics] : acc) {
    for (const auto& [key, a] : metrics) {
      out[group][key] = {{"count", a.count},
                         {"mean", a.sum / static_cast<double>(a.count)},
                         {"min", a.lo},
                         {"max", a.hi}};
    }
  }
  return out;
}

Json RunReport::to_json() const {
  Json rows = Json::array();
  for (const auto& t : trials) rows.push_back(edgelab::to_json(t));
  return Json{{"version", version},       {"kind", kind},       {"seed", seed},
              {"config", config},         {"metric_variants", metric_variants},
              {"aggregates", aggregates}, {"extra", extra},     {"trials", rows}};
}

RunReport RunReport::from_json(const Json& j) {
  RunReport r;
  try {
    r.version = j.at("version").get<std::string>();
    if (r.version != kArtifactVersion) {
      throw FormatError("unsupported report version '" + r.version + "'");
    }
    r.kind = j.at("kind").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.config = j.at("config");
    r.metric_variants = j.value("metric_variants", Json::object());
    r.aggregates = j.at("aggregates");
    r.extra = j.value("extra", Json::object());
    for (const auto& t : j.at("trials")) r.trials.push_back(trial_from_json(t));
  } catch (const Json::exception& e) {
    throw FormatError(std::string("malformed report: ") + e.what());
  }
  return r;
}

namespace {

std::string fmt(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

}  // namespace

std::string report_csv(const RunReport& report) {
  std::string out = "# edgelab-report-csv v1 kind=" + report.kind + " seed=" +
                    std::to_string(report.seed) + "\n";
  out += "group,metric,count,mean,min,max\n";
  for (const auto& [group, metrics] : report.aggregates.items()) {
    for (const auto& [key, a] : metrics.items()) {
      out += csv_field(group) + "," + csv_field(key) + "," +
             std::to_string(a.at("count").get<std::size_t>()) + "," +
             fmt(a.at("mean").get<double>()) + "," + fmt(a.at("min").get<double>()) + "," +
             fmt(a.at("max").get<double>()) + "\n";
    }
  }
  return out;
}

void write_report(const RunReport& report, const std::string& dir, bool csv) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  {
    std::ofstream out(fs::path(dir) / "trials.jsonl");
    for (const auto& t : report.trials) out << to_json(t).dump() << '\n';
  }
  {
    std::ofstream out(fs::path(dir) / "report.json");
    out << report.to_json().dump(2) << '\n';
  }
  if (csv) {
    std::ofstream out(fs::path(dir) / "summary.csv");
    out << report_csv(report);
  }
}

void parallel_for(std::size_t n, std::size_t threads,
                  const std::function<void(std::size_t)>& body) {
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= n) return;
        try {
          body(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mu);
          if (!error) error = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

// ---- pipelines --------------------------------------------------------------

namespace {

using Clock = std::chrono::steady_clock;

std::uint64_t elapsed_ns(Clock::time_point since) {
  return static_cast<std::uint64_t>(
      std::chrono::duration_cast<std::chrono::nanoseconds>(Clock::now() - since).count());
}

std::string ratio_tag(double r) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%.2f", r);
  return buf;
}

RunReport start_report(const ExperimentConfig& c, std::string kind) {
  RunReport r;
  r.kind = std::move(kind);
  r.config = c.raw;
  r.seed = c.seed;
  r.extra = Json::object();
  r.metric_variants = Json::object();
  return r;
}

std::vector<TrialRecord> flatten(std::vector<std::vector<TrialRecord>>& per_trial) {
  std::vector<TrialRecord> out;
  for (auto& v : per_trial) {
    for (auto& t : v) out.push_back(std::move(t));
  }
  return out;
}

struct TaskPrompt {
  Tokens prompt;
  std::optional<std::pair<std::size_t, std::size_t>> answer;  // needle span
  Json info;
};

TaskPrompt make_prompt(const TaskSpec& task, std::uint64_t trial_seed) {
  TaskPrompt p;
  switch (task.kind) {
    case TaskSpec::Kind::Needle: {
      const std::size_t pos = needle_position(task, trial_seed);
      const NeedleSample s = gen_needle(task.context_len, pos, trial_seed);
      p.prompt = s.prompt;
      p.answer = {{s.answer_begin, s.answer_len}};
      p.info = {{"needle_pos", pos}, {"answer_begin", s.answer_begin}};
      break;
    }
    case TaskSpec::Kind::Copy: {
      const CopySample s = gen_copy(task.len, trial_seed);
      p.prompt = s.prompt;
      break;
    }
    case TaskSpec::Kind::Dialogue: {
      const auto lex = task.lexicon.empty() ? default_dialogue_lexicon() : task.lexicon;
      const DialogueSample s = gen_dialogue(task.turns, lex, trial_seed);
      p.prompt = s.prompt;
      p.info = {{"summary", s.summary}};
      break;
    }
  }
  return p;
}

std::vector<std::string> token_words(const Tokens& t) {
  std::vector<std::string> out;
  out.reserve(t.size());
  for (Token x : t) out.push_back(std::to_string(x));
  return out;
}

// Greedy continuation from a primed cache; `first` is the token predicted by
// the prefill. With a policy the cache is held at `budget` after every step.
Tokens continue_decode(const TinyLM& m, KvCache& cache, Token first, std::size_t n,
                       const EvictionPolicy* p, std::size_t budget) {
  Tokens out{first};
  ForwardOptions opts;
  opts.capture_attn = p != nullptr;
  while (out.size() < n) {
    const ForwardOutput fo = forward(m, Tokens{out.back()}, &cache, opts);
    if (p) evict(cache, *p, budget);
    out.push_back(static_cast<Token>(argmax(fo.logits.row(0))));
  }
  return out;
}

bool span_retained(const KvCache& cache, std::size_t begin, std::size_t len) {
  for (std::size_t l = 0; l < cache.n_layers(); ++l) {
    const auto& pos = cache.layer(l).positions;
    for (std::size_t i = begin; i < begin + len; ++i) {
      if (!std::binary_search(pos.begin(), pos.end(), static_cast<std::int64_t>(i))) return false;
    }
  }
  return true;
}

TinyLM evict_model(const ExperimentConfig& c, const EvictMethod& m, std::uint64_t trial_seed) {
  TinyLM model = init_model(c.model, derive_seed(trial_seed, "model"));
  return m.plant_retrieval_head ? plant_retrieval_head(model) : model;
}

}  // namespace

std::vector<TraceRecord> capture_trace(const ExperimentConfig& config) {
  const auto* m = std::get_if<EvictMethod>(&config.method);
  if (!m) throw ConfigError("attention traces come from evict experiments");
  const std::uint64_t ts = derive_seed(config.seed, std::uint64_t{0});
  const TinyLM model = evict_model(config, *m, ts);
  const TaskPrompt tp = make_prompt(config.task, ts);
  ForwardOptions opts;
  opts.capture_attn = true;
  const ForwardOutput fo = forward(model, tp.prompt, nullptr, opts);
  std::vector<TraceRecord> out;
  for (std::size_t l = 0; l < model.config().n_layers; ++l) {
    for (std::size_t i = 0; i < tp.prompt.size(); ++i) {
      out.push_back({l, i, static_cast<std::int64_t>(i), (*fo.attn_rows)[l][i]});
    }
  }
  return out;
}

RunReport run_evict_bench(const ExperimentConfig& c) {
  const auto& m = std::get<EvictMethod>(c.method);
  RunReport report = start_report(c, "evict");
  report.metric_variants = {{"rouge", kRougeVariant},
                            {"rouge_reference", "no-eviction greedy output of the same model"},
                            {"retrieved", "all answer positions kept in every layer after "
                                          "prefill eviction"},
                            {"cache_bytes", "float32 keys and values"}};

  std::vector<std::vector<TrialRecord>> rows(c.trials);
  parallel_for(c.trials, c.threads, [&](std::size_t trial) {
    const std::uint64_t ts = derive_seed(c.seed, static_cast<std::uint64_t>(trial));
    const TinyLM model = evict_model(c, m, ts);
    const TaskPrompt tp = make_prompt(c.task, ts);
    const std::size_t n = tp.prompt.size();

    KvCache primed = KvCache::for_model(model.config(), m.window_capacity);
    ForwardOptions opts;
    opts.capture_attn = true;
    Token first = 0;
    {
      const ForwardOutput fo = forward(model, tp.prompt, &primed, opts);
      first = static_cast<Token>(argmax(fo.logits.row(n - 1)));
    }
    const std::uint64_t full_bytes = cache_bytes(primed, sizeof(float));

    KvCache base_cache = primed;
    const Tokens baseline = continue_decode(model, base_cache, first, m.decode_len, nullptr, 0);
    const auto ref_words = token_words(baseline);

    std::vector<double> ratios = m.ratios;
    if (std::find(ratios.begin(), ratios.end(), 0.0) == ratios.end()) {
      ratios.insert(ratios.begin(), 0.0);
    }
    for (double ratio : ratios) {
      const auto evicted = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n)));
      const std::size_t budget = n - std::min(evicted, n - 1);
      for (const auto& p : m.policies) {
        if (budget < mandatory_floor(p)) continue;
        KvCache cache = primed;
        const EvictionReport er = evict(cache, p, budget);
        const std::uint64_t bytes = cache_bytes(cache, sizeof(float));

        TrialRecord t;
        t.trial = trial;
        t.seed = ts;
        t.group = policy_name(p) + "@" + ratio_tag(ratio);
        t.metrics = Json::object();
        t.metrics["eviction_ratio"] = eviction_ratio(er);
        t.metrics["cache_bytes"] = bytes;
        t.metrics["memory_reduction"] =
            static_cast<double>(full_bytes - bytes) / static_cast<double>(full_bytes);
        if (tp.answer) {
          t.metrics["retrieved"] = span_retained(cache, tp.answer->first, tp.answer->second);
        }
        const Tokens out = continue_decode(model, cache, first, m.decode_len, &p, budget);
        const auto hyp = token_words(out);
        t.metrics["rouge1_f1"] = rouge_n(ref_words, hyp, 1).f1;
        t.metrics["rouge2_f1"] = rouge_n(ref_words, hyp, 2).f1;
        t.metrics["rougeL_f1"] = rouge_l(ref_words, hyp).f1;
        t.metrics["outputs_match"] = out == baseline;
        t.info = tp.info;
        t.info["budget"] = budget;
        t.info["prompt_len"] = n;
        rows[trial].push_back(std::move(t));
      }
    }
  });

  report.trials = flatten(rows);
  report.aggregates = recompute_aggregates(report.trials);
  return report;
}

namespace {

TinyLM perturbed_copy(const TinyLM& model, double stddev, std::uint64_t seed) {
  std::vector<Weight> w = model.weights();
  const auto& names = model.slot_names();
  for (std::size_t i = 0; i < w.size(); ++i) {
    w[i].quant.reset();
    Rng rng(derive_seed(seed, names[i]));
    const auto noise = normal_vector(rng, w[i].dense.size(), stddev);
    for (std::size_t j = 0; j < noise.size(); ++j) w[i].dense.data[j] += noise[j];
  }
  return TinyLM(model.config(), names, std::move(w));
}

DraftConfig make_draft(const std::string& kind, std::size_t k, const TinyLM& target,
                       const SpecMethod& m, std::uint64_t ts) {
  DraftConfig d;
  d.k = k;
  if (kind == "self") {
    d.kind = IndependentDraft{std::make_shared<const TinyLM>(target)};
  } else if (kind == "perturbed") {
    d.kind = IndependentDraft{std::make_shared<const TinyLM>(
        perturbed_copy(target, m.perturb_stddev, derive_seed(ts, "perturb")))};
  } else if (kind == "independent") {
    const ModelConfig dc = m.draft_model.value_or(target.config());
    d.kind = IndependentDraft{std::make_shared<const TinyLM>(init_model(dc, derive_seed(ts, "draft")))};
  } else if (kind == "feature_reuse") {
    d.kind = FeatureReuseHead::random(target.config().d_model, derive_seed(ts, "head"));
  } else {
    throw ConfigError("unknown draft kind '" + kind + "'");
  }
  return d;
}

}  // namespace

RunReport run_spec_bench(const ExperimentConfig& c) {
  const auto& m = std::get<SpecMethod>(c.method);
  RunReport report = start_report(c, "spec");
  report.metric_variants = {
      {"block_efficiency", "tokens emitted per target forward"},
      {"speedup_forwards", "greedy target forwards / speculative target forwards"}};

  std::vector<std::vector<TrialRecord>> rows(c.trials);
  parallel_for(c.trials, c.threads, [&](std::size_t trial) {
    const std::uint64_t ts = derive_seed(c.seed, static_cast<std::uint64_t>(trial));
    const TinyLM target = init_model(c.model, derive_seed(ts, "target"));
    const TaskPrompt tp = make_prompt(c.task, ts);

    std::size_t base_forwards = 0;
    auto t0 = Clock::now();
    const Tokens greedy = greedy_decode(target, tp.prompt, m.max_new, &base_forwards);
    const std::uint64_t base_ns = elapsed_ns(t0);

    for (const auto& kind : m.drafts) {
      for (std::size_t k : m.ks) {
        const DraftConfig d = make_draft(kind, k, target, m, ts);
        t0 = Clock::now();
        const SpecResult r = decode_speculative(target, d, tp.prompt, m.max_new);
        const std::uint64_t ns = elapsed_ns(t0);
        if (r.tokens != greedy) {
          throw ContractError("losslessness violated: trial " + std::to_string(trial) +
                              ", draft " + kind + ", k=" + std::to_string(k) +
                              " diverged from greedy decoding");
        }
        TrialRecord t;
        t.trial = trial;
        t.seed = ts;
        t.group = kind + "@k=" + std::to_string(k);
        t.metrics = {{"block_efficiency", block_efficiency(r.stats)},
                     {"rounds", r.stats.rounds},
                     {"target_forwards", r.target_forwards},
                     {"accepted", r.stats.accepted},
                     {"proposed", r.stats.proposed},
                     {"acceptance_rate", r.stats.proposed ? static_cast<double>(r.stats.accepted) /
                                                                static_cast<double>(r.stats.proposed)
                                                          : 0.0},
                     {"speedup_forwards", static_cast<double>(base_forwards) /
                                              static_cast<double>(r.target_forwards)},
                     {"speedup_wall", ns ? static_cast<double>(base_ns) / static_cast<double>(ns) : 0.0},
                     {"lossless", true}};
        t.info = {{"prompt_len", tp.prompt.size()}, {"max_new", m.max_new}};
        rows[trial].push_back(std::move(t));
      }
    }
  });

  report.trials = flatten(rows);
  report.aggregates = recompute_aggregates(report.trials);
  return report;
}

std::vector<Json> capture_round_trace(const ExperimentConfig& c) {
  const auto* m = std::get_if<SpecMethod>(&c.method);
  if (!m) throw ConfigError("round traces need a spec experiment");
  const std::uint64_t ts = derive_seed(c.seed, std::uint64_t{0});
  const TinyLM target = init_model(c.model, derive_seed(ts, "target"));
  const TaskPrompt tp = make_prompt(c.task, ts);
  std::vector<Json> out;
  for (const auto& kind : m->drafts) {
    for (std::size_t k : m->ks) {
      const SpecResult r = decode_speculative(target, make_draft(kind, k, target, *m, ts),
                                              tp.prompt, m->max_new);
      for (const auto& rt : r.trace) {
        out.push_back({{"draft", kind}, {"k", k}, {"round", rt.round}, {"proposed", rt.proposed},
                       {"accepted", rt.accepted}, {"emitted", rt.emitted}});
      }
    }
  }
  return out;
}

namespace {

std::vector<Tokens> calibration_set(const ModelConfig& cfg, std::size_t count, std::size_t len,
                                    std::uint64_t seed) {
  Rng rng(derive_seed(seed, "calibration"));
  std::uniform_int_distribution<Token> pick(0, static_cast<Token>(cfg.vocab_size - 1));
  std::vector<Tokens> out(count, Tokens(len));
  for (auto& s : out) {
    for (auto& t : s) t = pick(rng);
  }
  return out;
}

Json slot_bit_map(const TinyLM& model, const PrecisionPlan& plan) {
  Json out = Json::object();
  for (const auto& [name, sp] : plan.slots) {
    const auto [r, cc] = slot_shape(model.config(), name);
    const BitRatio b = slot_bits(r, cc, sp);
    out[name] = {{"bits", sp.quant.bits}, {"total_bits", b.bits}, {"weights", b.weights}};
  }
  return out;
}

}  // namespace

RunReport run_quant_bench(const ExperimentConfig& c) {
  const auto& m = std::get<QuantMethod>(c.method);
  RunReport report = start_report(c, "quant");
  report.metric_variants = {
      {"bpw", "(codes + scales + zero points + masks) / weights over matrix slots"},
      {"top1_overlap", "teacher-forced argmax agreement with the float model"}};

  std::vector<std::vector<TrialRecord>> rows(c.trials);
  parallel_for(c.trials, c.threads, [&](std::size_t trial) {
    const std::uint64_t ts = derive_seed(c.seed, static_cast<std::uint64_t>(trial));
    const TinyLM model = init_model(c.model, derive_seed(ts, "model"));
    const auto calib = calibration_set(c.model, m.calib_sequences, m.calib_len, ts);

    TrialRecord sanity;
    sanity.trial = trial;
    sanity.seed = ts;
    sanity.group = "float-self";
    sanity.metrics = {{"bpw", model_bits(model).value()},
                      {"top1_overlap", top1_overlap(model, model, calib)}};
    rows[trial].push_back(sanity);

    for (const auto& ps : m.plans) {
      const PrecisionPlan plan = PrecisionPlan::uniform(model, ps.quant, ps.sparsity);
      const TinyLM q = ptq_model(model, plan);
      const BitRatio analytic = plan_bits(model, plan);
      const BitRatio measured = model_bits(q);
      TrialRecord t;
      t.trial = trial;
      t.seed = ts;
      t.group = ps.name;
      t.metrics = {{"bpw", analytic.value()},
                   {"bpw_measured", measured.value()},
                   {"accounting_agrees", analytic.bits == measured.bits &&
                                             analytic.weights == measured.weights},
                   {"top1_overlap", top1_overlap(model, q, calib)}};
      t.info = {{"total_bits", analytic.bits},
                {"weights", analytic.weights},
                {"slots", slot_bit_map(model, plan)}};
      rows[trial].push_back(std::move(t));
    }

    if (m.budget) {
      AssignOptions ao;
      ao.base = m.plans.front().quant;
      const AssignResult ar = assign_precision(model, calib, *m.budget, ao);
      TrialRecord t;
      t.trial = trial;
      t.seed = ts;
      t.group = "assign@" + fmt(*m.budget);
      t.metrics = {{"bpw", ar.bpw},
                   {"top1_overlap", ar.overlap},
                   {"within_budget", ar.bpw <= *m.budget},
                   {"demotions", ar.demotions},
                   {"promotions", ar.promotions}};
      t.info = {{"slots", slot_bit_map(model, ar.plan)}};
      rows[trial].push_back(std::move(t));
    }
  });

  report.trials = flatten(rows);
  report.aggregates = recompute_aggregates(report.trials);
  return report;
}

namespace {

std::string quant_state_hash(const TinyLM& model) {
  Sha256 h;
  for (const auto& w : model.weights()) {
    if (w.quant) w.quant->hash_into(h);
  }
  return h.hex_digest();
}

struct PlantedProblem {
  QuantTensor base;
  std::vector<std::vector<float>> xs, ys;
};

PlantedProblem planted_qalft(std::size_t out, std::size_t in, std::size_t samples,
                             const QuantSpec& spec, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "qalft.planted"));
  Matrix w(out, in);
  w.data = normal_vector(rng, w.size(), 0.5);
  PlantedProblem p{quantize(w, spec), {}, {}};
  p.base.freeze();
  const Matrix deq = dequantize(p.base);
  const auto u = normal_vector(rng, out, 0.5);
  const auto v = normal_vector(rng, in, 0.5);
  for (std::size_t n = 0; n < samples; ++n) {
    auto x = normal_vector(rng, in, 1.0);
    double vx = 0.0;
    for (std::size_t i = 0; i < in; ++i) vx += static_cast<double>(v[i]) * x[i];
    std::vector<float> y(out);
    for (std::size_t o = 0; o < out; ++o) {
      double acc = u[o] * vx;
      for (std::size_t i = 0; i < in; ++i) acc += static_cast<double>(deq.at(o, i)) * x[i];
      y[o] = static_cast<float>(acc);
    }
    p.xs.push_back(std::move(x));
    p.ys.push_back(std::move(y));
  }
  return p;
}

}  // namespace

RunReport run_lora_demo(const ExperimentConfig& c) {
  const auto& m = std::get<LoraMethod>(c.method);
  RunReport report = start_report(c, "lora");
  report.metric_variants = {
      {"qalft_loss", "mean squared error over samples and outputs"},
      {"grad_check", "max |g - fd| / max(|g| + |fd|, 1e-8), central differences"}};

  std::vector<std::vector<TrialRecord>> rows(c.trials);
  parallel_for(c.trials, c.threads, [&](std::size_t trial) {
    const std::uint64_t ts = derive_seed(c.seed, static_cast<std::uint64_t>(trial));
    const TinyLM fp = init_model(c.model, derive_seed(ts, "model"));
    auto base = std::make_shared<const TinyLM>(
        ptq_model(fp, PrecisionPlan::uniform(fp, m.base_quant), true));
    const std::string quant_hash = quant_state_hash(*base);
    AdapterRegistry reg(base);

    for (std::size_t a = 0; a < m.adapters; ++a) {
      LoraAdapter ad = create_adapter(*base, m.targets, m.rank, m.alpha,
                                      derive_seed(ts, "adapter" + std::to_string(a)),
                                      "scenario" + std::to_string(a));
      // Stand-in for a trained adapter: nonzero B so swaps change outputs.
      for (auto& [slot, pair] : ad.targets) {
        Rng rng(derive_seed(ts, "adapter" + std::to_string(a) + ".b." + slot));
        pair.b.data = normal_vector(rng, pair.b.size(), 0.02);
      }
      reg.register_adapter(std::move(ad));
    }

    Rng rng(derive_seed(ts, "swaps"));
    std::uniform_int_distribution<std::size_t> pick(0, m.adapters);
    const Tokens prompt = calibration_set(c.model, 1, 16, ts).front();
    const auto names = reg.adapter_names();
    double max_merge_gap = 0.0;
    for (std::size_t s = 0; s < m.swaps; ++s) {
      const std::size_t which = pick(rng);
      reg.activate(which == m.adapters ? std::nullopt : std::optional<std::string>(names[which]));
      const ForwardOutput fo = reg.apply_forward(prompt, nullptr);
      if (!reg.base_intact() || quant_state_hash(*base) != quant_hash) {
        throw ContractError("base model changed during adapter swap " + std::to_string(s));
      }
      if (s < m.adapters && reg.active()) {
        const TinyLM merged = merge_model(*base, reg.adapter(*reg.active()));
        const ForwardOutput mo = forward(merged, prompt, nullptr);
        for (std::size_t i = 0; i < mo.logits.size(); ++i) {
          max_merge_gap = std::max(
              max_merge_gap, static_cast<double>(std::abs(mo.logits.data[i] - fo.logits.data[i])));
        }
      }
    }

    QuantSpec qspec = m.base_quant;
    qspec.granularity = Granularity::per_row();
    const PlantedProblem pp = planted_qalft(m.qalft_out, m.qalft_in, m.qalft_samples, qspec, ts);
    Sha256 before_h;
    pp.base.hash_into(before_h);
    const std::string before = before_h.hex_digest();
    QalftOptions qo;
    qo.rank = 1;
    qo.alpha = 1.0;
    qo.steps = m.qalft_steps;
    qo.seed = ts;
    qo.tolerance = 1e-12;
    const QalftResult fit = qalft_fit(pp.base, pp.xs, pp.ys, qo);
    Sha256 after_h;
    pp.base.hash_into(after_h);
    if (after_h.hex_digest() != before) throw ContractError("QALFT modified the frozen base");

    double grad_worst = 0.0;
    for (std::size_t g = 0; g < m.grad_checks; ++g) {
      const std::uint64_t gs = derive_seed(ts, "gradcheck" + std::to_string(g));
      const PlantedProblem gp = planted_qalft(6, 8, 10, qspec, gs);
      const QalftProblem prob = make_qalft_problem(gp.base, gp.xs, gp.ys, 0.5);
      grad_worst = std::max(grad_worst, qalft_gradient_check(prob, 2, gs));
    }

    TrialRecord t;
    t.trial = trial;
    t.seed = ts;
    t.group = "lora";
    t.metrics = {{"adapters", m.adapters},
                 {"swaps", m.swaps},
                 {"base_hash_constant", reg.base_intact()},
                 {"merge_max_abs_gap", max_merge_gap},
                 {"qalft_initial_loss", fit.loss_trace.front()},
                 {"qalft_final_loss", fit.final_loss},
                 {"qalft_steps", fit.loss_trace.size() - 1},
                 {"grad_check_max_rel_error", grad_worst}};
    Json trace = Json::array();
    const std::size_t stride = std::max<std::size_t>(1, fit.loss_trace.size() / 50);
    for (std::size_t i = 0; i < fit.loss_trace.size(); i += stride) {
      trace.push_back({{"step", i}, {"loss", fit.loss_trace[i]}});
    }
    t.info = {{"base_hash", reg.base_hash()}, {"quant_hash", quant_hash}, {"loss_trace", trace}};
    rows[trial].push_back(std::move(t));
  });

  report.trials = flatten(rows);
  report.aggregates = recompute_aggregates(report.trials);
  return report;
}

RunReport run_experiment(const ExperimentConfig& config) {
  switch (config.method.index()) {
    case 0: return run_evict_bench(config);
    case 1: return run_spec_bench(config);
    case 2: return run_quant_bench(config);
    default: return run_lora_demo(config);
  }
}

}  // namespace edgelab
