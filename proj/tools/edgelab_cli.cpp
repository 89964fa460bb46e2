// edgelab: command-line harness for the eviction, speculation, quantization
// and adapter experiments, plus standalone loss and ROUGE evaluation.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "edgelab/bench.hpp"
#include "edgelab/metrics.hpp"
#include "edgelab/train_math.hpp"

using namespace edgelab;

namespace {

struct RunArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::string format = "json";
  std::optional<std::string> trace;
};

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ExperimentConfig load(const RunArgs& a, const std::string& expected_kind) {
  std::ifstream in(a.config);
  if (!in) throw ConfigError("cannot open config '" + a.config + "'");
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw FormatError(std::string("config is not valid JSON: ") + e.what());
  }
  if (a.seed) j["seed"] = *a.seed;
  if (a.out) j["output"]["dir"] = *a.out;
  ExperimentConfig c = parse_experiment(j);
  if (!expected_kind.empty() && method_kind(c) != expected_kind) {
    throw ConfigError("config method '" + method_kind(c) + "' does not match subcommand '" +
                      expected_kind + "'");
  }
  return c;
}

void emit(const RunReport& r, const std::string& format) {
  if (format == "csv") {
    std::cout << report_csv(r);
  } else {
    std::cout << Json{{"version", r.version},
                      {"kind", r.kind},
                      {"seed", r.seed},
                      {"trials", r.trials.size()},
                      {"aggregates", r.aggregates}}
                     .dump(2)
              << '\n';
  }
}

int run_bench(const RunArgs& a, const std::string& kind) {
  const ExperimentConfig c = load(a, kind);
  if (a.trace) {
    std::ofstream out(*a.trace);
    if (!out) throw FormatError("cannot write trace '" + *a.trace + "'");
    if (kind == "spec") {
      for (const auto& row : capture_round_trace(c)) out << row.dump() << '\n';
    } else {
      write_trace(out, capture_trace(c));
    }
  }
  const RunReport r = run_experiment(c);
  if (c.out_dir) write_report(r, *c.out_dir, true);
  emit(r, a.format);
  return 0;
}

int run_gen(const RunArgs& a) {
  const ExperimentConfig c = load(a, "");
  std::ostringstream lines;
  for (std::size_t i = 0; i < c.trials; ++i) {
    const std::uint64_t ts = derive_seed(c.seed, static_cast<std::uint64_t>(i));
    Json row{{"trial", i}, {"seed", ts}};
    switch (c.task.kind) {
      case TaskSpec::Kind::Needle: {
        const std::size_t pos = needle_position(c.task, ts);
        const NeedleSample s = gen_needle(c.task.context_len, pos, ts);
        row["task"] = "needle";
        row["prompt"] = s.prompt;
        row["answer"] = s.answer();
        row["answer_begin"] = s.answer_begin;
        row["needle_pos"] = pos;
        break;
      }
      case TaskSpec::Kind::Copy: {
        const CopySample s = gen_copy(c.task.len, ts);
        row["task"] = "copy";
        row["prompt"] = s.prompt;
        row["answer"] = s.answer;
        break;
      }
      case TaskSpec::Kind::Dialogue: {
        const DialogueSample s = gen_dialogue(
            c.task.turns, c.task.lexicon.empty() ? default_dialogue_lexicon() : c.task.lexicon, ts);
        row["task"] = "dialogue";
        row["text"] = s.text;
        row["summary"] = s.summary;
        row["prompt"] = s.prompt;
        break;
      }
    }
    lines << row.dump() << '\n';
  }
  if (c.out_dir) {
    std::filesystem::create_directories(*c.out_dir);
    std::ofstream(std::filesystem::path(*c.out_dir) / "corpus.jsonl") << lines.str();
  } else {
    std::cout << lines.str();
  }
  return 0;
}

struct LossArgs {
  std::string input;
  double beta = 0.1;
  double delta = 0.0;
  std::vector<double> weights{1.0, 1.0, 1.0};
};

int run_losses(const LossArgs& a) {
  std::istringstream in(read_file(a.input));
  PrefBatch batch;
  std::vector<double> token_logprobs;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    Json j;
    try {
      j = Json::parse(line);
      batch.push_back({j.at("lp_theta_c").get<double>(), j.at("lp_0_c").get<double>(),
                       j.at("lp_theta_r").get<double>(), j.at("lp_0_r").get<double>()});
    } catch (const Json::exception& e) {
      throw FormatError("line " + std::to_string(lineno) + ": " + e.what());
    }
    if (j.contains("token_logprobs")) {
      for (double lp : j["token_logprobs"]) token_logprobs.push_back(lp);
    }
  }
  if (a.weights.size() != 3) throw ConfigError("--weights takes three values");
  MpoWeights w{a.weights[0], a.weights[1], a.weights[2], a.beta, a.delta};
  w.validate();
  Json out{{"samples", batch.size()},
           {"reduction", {{"preference", "mean"}, {"quality", "mean"},
                          {"generation", "negative sum over all tokens"}}},
           {"weights", {{"w_p", w.w_p}, {"w_q", w.w_q}, {"w_g", w.w_g}}},
           {"beta", w.beta},
           {"delta", w.delta},
           {"preference", mpo_preference_loss(batch, w.beta)},
           {"quality", mpo_quality_loss(batch, w.beta, w.delta)}};
  if (!token_logprobs.empty()) {
    const MpoBreakdown b = mpo_joint_loss(batch, w, token_logprobs);
    out["generation"] = b.generation;
    out["total"] = b.total;
  }
  std::cout << out.dump(2) << '\n';
  return 0;
}

Json score_json(const RougeScore& s) {
  return {{"precision", s.precision}, {"recall", s.recall}, {"f1", s.f1}};
}

int run_rouge(const std::string& ref_path, const std::string& hyp_path,
              const std::string& format) {
  const auto ref = tokenize(read_file(ref_path));
  const auto hyp = tokenize(read_file(hyp_path));
  const RougeScore r1 = rouge_n(ref, hyp, 1), r2 = rouge_n(ref, hyp, 2), rl = rouge_l(ref, hyp);
  if (format == "csv") {
    std::cout << "metric,precision,recall,f1\n";
    for (const auto& [name, s] : {std::pair{"rouge1", r1}, {"rouge2", r2}, {"rougeL", rl}}) {
      std::cout << name << ',' << s.precision << ',' << s.recall << ',' << s.f1 << '\n';
    }
  } else {
    std::cout << Json{{"variant", kRougeVariant},
                      {"rouge1", score_json(r1)},
                      {"rouge2", score_json(r2)},
                      {"rougeL", score_json(rl)}}
                     .dump(2)
              << '\n';
  }
  return 0;
}

int run_report(const std::string& path, const std::string& format) {
  Json j;
  try {
    j = Json::parse(read_file(path));
  } catch (const Json::parse_error& e) {
    throw FormatError(std::string("report is not valid JSON: ") + e.what());
  }
  const RunReport r = RunReport::from_json(j);
  if (recompute_aggregates(r.trials) != r.aggregates) {
    throw ContractError("report aggregates do not match its per-trial records");
  }
  emit(r, format);
  return 0;
}

void add_run_options(CLI::App* sub, RunArgs& a) {
  sub->add_option("--config", a.config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  sub->add_option("--seed", a.seed, "Override the config seed");
  sub->add_option("--out", a.out, "Output directory for the report");
  sub->add_option("--format", a.format, "Summary format on stdout")
      ->check(CLI::IsMember({"json", "csv"}));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"edgelab: KV eviction, speculative decoding, quantization and adapter lab"};
  app.require_subcommand(1);

  RunArgs gen, evict, spec, quant, lora;
  add_run_options(app.add_subcommand("gen", "Generate the synthetic corpus of a config"), gen);
  auto* evict_cmd = app.add_subcommand("evict", "KV-cache eviction benchmark");
  add_run_options(evict_cmd, evict);
  evict_cmd->add_option("--trace", evict.trace, "Write the first trial's attention trace (JSONL)");
  auto* spec_cmd = app.add_subcommand("spec", "Speculative decoding benchmark");
  add_run_options(spec_cmd, spec);
  spec_cmd->add_option("--trace", spec.trace, "Write the first trial's per-round trace (JSONL)");
  add_run_options(app.add_subcommand("quant", "Quantization benchmark"), quant);
  add_run_options(app.add_subcommand("lora-demo", "Adapter registry and QALFT demo"), lora);

  LossArgs losses;
  auto* loss_cmd = app.add_subcommand("losses", "Evaluate MPO losses on a JSONL batch");
  loss_cmd->add_option("--input", losses.input, "JSONL preference batch")->required()->check(CLI::ExistingFile);
  loss_cmd->add_option("--beta", losses.beta, "KL penalty coefficient");
  loss_cmd->add_option("--delta", losses.delta, "Reward shift");
  loss_cmd->add_option("--weights", losses.weights, "w_p w_q w_g")->expected(3);

  std::string ref, hyp, rouge_format = "json";
  auto* rouge_cmd = app.add_subcommand("rouge", "ROUGE-1/2/L between two text files");
  rouge_cmd->add_option("reference", ref)->required()->check(CLI::ExistingFile);
  rouge_cmd->add_option("hypothesis", hyp)->required()->check(CLI::ExistingFile);
  rouge_cmd->add_option("--format", rouge_format)->check(CLI::IsMember({"json", "csv"}));

  std::string report_path, report_format = "json";
  auto* report_cmd = app.add_subcommand("report", "Verify and summarize a report.json");
  report_cmd->add_option("report", report_path)->required()->check(CLI::ExistingFile);
  report_cmd->add_option("--format", report_format)->check(CLI::IsMember({"json", "csv"}));

  CLI11_PARSE(app, argc, argv);

  try {
    if (app.got_subcommand("gen")) return run_gen(gen);
    if (app.got_subcommand("evict")) return run_bench(evict, "evict");
    if (app.got_subcommand("spec")) return run_bench(spec, "spec");
    if (app.got_subcommand("quant")) return run_bench(quant, "quant");
    if (app.got_subcommand("lora-demo")) return run_bench(lora, "lora");
    if (app.got_subcommand("losses")) return run_losses(losses);
    if (app.got_subcommand("rouge")) return run_rouge(ref, hyp, rouge_format);
    if (app.got_subcommand("report")) return run_report(report_path, report_format);
  } catch (const Error& e) {
    std::cout << Json{{"error", {{"kind", e.kind()}, {"message", e.what()}}}}.dump() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cout << Json{{"error", {{"kind", "internal"}, {"message", e.what()}}}}.dump() << '\n';
    return 1;
  }
  return 0;
}
