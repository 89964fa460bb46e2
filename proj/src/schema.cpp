#include <cmath>
#include <fstream>

#include "edgelab/bench.hpp"
#include "experiment_schema_data.hpp"

namespace edgelab {

const Json& experiment_schema() {
  static const Json schema = Json::parse(kExperimentSchemaText);
  return schema;
}

namespace {

bool has_type(const Json& v, const std::string& t) {
  if (t == "object") return v.is_object();
  if (t == "array") return v.is_array();
  if (t == "string") return v.is_string();
  if (t == "boolean") return v.is_boolean();
  if (t == "null") return v.is_null();
  if (t == "number") return v.is_number();
  if (t == "integer") {
    if (v.is_number_integer()) return true;
    return v.is_number_float() && std::floor(v.get<double>()) == v.get<double>();
  }
  return false;
}

const Json& resolve(const Json& root, const std::string& ref) {
  if (ref.rfind("#", 0) != 0) throw ConfigError("unsupported schema reference '" + ref + "'");
  return root.at(Json::json_pointer(ref.substr(1)));
}

struct Validator {
  const Json& root;
  std::vector<std::string>& errors;

  void fail(const std::string& where, const std::string& what) {
    errors.push_back((where.empty() ? "/" : where) + ": " + what);
  }

  void check(const Json& v, const Json& s, const std::string& where) {
    if (s.contains("$ref")) {
      check(v, resolve(root, s["$ref"].get<std::string>()), where);
      return;
    }
    if (s.contains("type")) {
      const Json& t = s["type"];
      bool ok = false;
      if (t.is_string()) {
        ok = has_type(v, t.get<std::string>());
      } else {
        for (const auto& x : t) ok = ok || has_type(v, x.get<std::string>());
      }
      if (!ok) {
        fail(where, "expected type " + t.dump());
        return;
      }
    }
    if (s.contains("const") && v != s["const"]) fail(where, "must equal " + s["const"].dump());
    if (s.contains("enum")) {
      bool found = false;
      for (const auto& e : s["enum"]) found = found || v == e;
      if (!found) fail(where, "must be one of " + s["enum"].dump());
    }
    if (v.is_number()) {
      const double x = v.get<double>();
      if (s.contains("minimum") && x < s["minimum"].get<double>()) {
        fail(where, "must be >= " + s["minimum"].dump());
      }
      if (s.contains("maximum") && x > s["maximum"].get<double>()) {
        fail(where, "must be <= " + s["maximum"].dump());
      }
      if (s.contains("exclusiveMinimum") && x <= s["exclusiveMinimum"].get<double>()) {
        fail(where, "must be > " + s["exclusiveMinimum"].dump());
      }
      if (s.contains("exclusiveMaximum") && x >= s["exclusiveMaximum"].get<double>()) {
        fail(where, "must be < " + s["exclusiveMaximum"].dump());
      }
    }
    if (v.is_array()) {
      if (s.contains("minItems") && v.size() < s["minItems"].get<std::size_t>()) {
        fail(where, "needs at least " + s["minItems"].dump() + " items");
      }
      if (s.contains("items")) {
        for (std::size_t i = 0; i < v.size(); ++i) {
          check(v[i], s["items"], where + "/" + std::to_string(i));
        }
      }
    }
    if (v.is_object()) {
      if (s.contains("required")) {
        for (const auto& r : s["required"]) {
          if (!v.contains(r.get<std::string>())) {
            fail(where, "missing required property '" + r.get<std::string>() + "'");
          }
        }
      }
      const Json empty = Json::object();
      const Json& props = s.contains("properties") ? s["properties"] : empty;
      for (const auto& [key, val] : v.items()) {
        if (props.contains(key)) {
          check(val, props[key], where + "/" + key);
        } else if (s.contains("additionalProperties") && s["additionalProperties"] == false) {
          fail(where, "unknown property '" + key + "'");
        }
      }
    }
    if (s.contains("oneOf")) {
      std::size_t matches = 0;
      std::vector<std::string> best;
      for (const auto& alt : s["oneOf"]) {
        std::vector<std::string> sub;
        Validator{root, sub}.check(v, alt, where);
        if (sub.empty()) {
          ++matches;
        } else if (best.empty() || sub.size() < best.size()) {
          best = std::move(sub);
        }
      }
      if (matches == 0) {
        fail(where, "matches none of the allowed forms");
        errors.insert(errors.end(), best.begin(), best.end());
      } else if (matches > 1) {
        fail(where, "matches more than one allowed form");
      }
    }
  }
};

EvictionPolicy policy_from_json(const Json& j) {
  const auto name = j.at("name").get<std::string>();
  if (name == "attention_sink") {
    policy::AttentionSink p;
    p.sinks = j.value("sinks", p.sinks);
    p.window = j.value("window", p.window);
    return p;
  }
  if (name == "heavy_hitter") {
    policy::HeavyHitter p;
    p.recent = j.value("recent", p.recent);
    return p;
  }
  if (name == "obs_window") {
    policy::ObsWindow p;
    p.obs = j.value("obs", p.obs);
    p.pool_kernel = j.value("pool_kernel", p.pool_kernel);
    return p;
  }
  if (name == "hybrid") {
    policy::Hybrid p;
    p.lambda_sink = j.value("lambda_sink", p.lambda_sink);
    p.lambda_recent = j.value("lambda_recent", p.lambda_recent);
    p.lambda_acc = j.value("lambda_acc", p.lambda_acc);
    p.lambda_win = j.value("lambda_win", p.lambda_win);
    p.obs = j.value("obs", p.obs);
    p.pool_kernel = j.value("pool_kernel", p.pool_kernel);
    p.sinks = j.value("sinks", p.sinks);
    return p;
  }
  policy::Random p;
  p.seed = j.value("seed", p.seed);
  return p;
}

}  // namespace

std::vector<std::string> validate_against_schema(const Json& instance, const Json& schema) {
  std::vector<std::string> errors;
  Validator{schema, errors}.check(instance, schema, "");
  return errors;
}

ExperimentConfig parse_experiment(const Json& j) {
  const auto errors = validate_against_schema(j, experiment_schema());
  if (!errors.empty()) {
    std::string msg = "config violates the experiment schema";
    for (const auto& e : errors) msg += "; " + e;
    throw ConfigError(msg);
  }

  ExperimentConfig c;
  c.raw = j;
  c.seed = j.at("seed").get<std::uint64_t>();
  c.trials = j.value("trials", std::size_t{1});
  c.threads = j.value("threads", std::size_t{0});
  if (j.contains("model")) c.model = model_config_from_json(j["model"]);
  c.model.validate();
  if (j.contains("output") && j["output"].contains("dir")) {
    c.out_dir = j["output"]["dir"].get<std::string>();
  }

  const Json& t = j.at("task");
  const auto tk = t.at("kind").get<std::string>();
  if (tk == "needle") {
    c.task.kind = TaskSpec::Kind::Needle;
    c.task.context_len = t.at("context_len").get<std::size_t>();
    if (t.contains("needle_pos")) {
      c.task.needle_pos = t["needle_pos"].get<std::size_t>();
      if (*c.task.needle_pos >= c.task.context_len) {
        throw ConfigError("needle_pos must be < context_len");
      }
    }
  } else if (tk == "copy") {
    c.task.kind = TaskSpec::Kind::Copy;
    c.task.len = t.at("len").get<std::size_t>();
  } else {
    c.task.kind = TaskSpec::Kind::Dialogue;
    c.task.turns = t.at("turns").get<std::size_t>();
    c.task.lexicon = t.value("lexicon", default_dialogue_lexicon());
  }

  const Json& m = j.at("method");
  const auto mk = m.at("kind").get<std::string>();
  if (mk == "evict") {
    EvictMethod e;
    for (const auto& p : m.at("policies")) {
      e.policies.push_back(policy_from_json(p));
      validate_policy(e.policies.back());
    }
    e.ratios = m.value("ratios", e.ratios);
    e.decode_len = m.value("decode_len", e.decode_len);
    e.window_capacity = m.value("window_capacity", e.window_capacity);
    e.plant_retrieval_head = m.value("plant_retrieval_head", e.plant_retrieval_head);
    if (c.task.kind == TaskSpec::Kind::Copy) {
      throw ConfigError("eviction benchmarks run on needle or dialogue tasks");
    }
    c.method = e;
  } else if (mk == "spec") {
    SpecMethod s;
    s.drafts = m.value("drafts", s.drafts);
    s.ks = m.value("ks", s.ks);
    s.max_new = m.value("max_new", s.max_new);
    s.perturb_stddev = m.value("perturb_stddev", s.perturb_stddev);
    if (m.contains("draft_model")) {
      s.draft_model = model_config_from_json(m["draft_model"]);
      s.draft_model->validate();
      if (s.draft_model->vocab_size != c.model.vocab_size) {
        throw ConfigError("draft model vocabulary differs from the target's");
      }
    }
    c.method = s;
  } else if (mk == "quant") {
    QuantMethod q;
    for (const auto& p : m.at("plans")) {
      QuantPlanSpec ps;
      ps.name = p.at("name").get<std::string>();
      ps.quant = quant_spec_from_json(p.at("quant"));
      ps.quant.validate();
      if (p.contains("sparsity")) {
        ps.sparsity = sparsity_spec_from_json(p["sparsity"]);
        ps.sparsity->validate();
      }
      q.plans.push_back(std::move(ps));
    }
    if (m.contains("budget")) q.budget = m["budget"].get<double>();
    q.calib_sequences = m.value("calib_sequences", q.calib_sequences);
    q.calib_len = m.value("calib_len", q.calib_len);
    c.method = q;
  } else {
    LoraMethod l;
    l.adapters = m.value("adapters", l.adapters);
    l.rank = m.value("rank", l.rank);
    l.alpha = m.value("alpha", l.alpha);
    l.swaps = m.value("swaps", l.swaps);
    l.targets = m.value("targets", l.targets);
    l.base_quant.bits = 4;
    l.base_quant.granularity = Granularity::per_row();
    if (m.contains("base_quant")) l.base_quant = quant_spec_from_json(m["base_quant"]);
    l.base_quant.validate();
    l.qalft_out = m.value("qalft_out", l.qalft_out);
    l.qalft_in = m.value("qalft_in", l.qalft_in);
    l.qalft_samples = m.value("qalft_samples", l.qalft_samples);
    l.qalft_steps = m.value("qalft_steps", l.qalft_steps);
    l.grad_checks = m.value("grad_checks", l.grad_checks);
    c.method = l;
  }
  return c;
}

ExperimentConfig load_experiment(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw FormatError("config '" + path + "' is not valid JSON: " + e.what());
  }
  return parse_experiment(j);
}

std::string method_kind(const ExperimentConfig& config) {
  static const char* names[] = {"evict", "spec", "quant", "lora"};
  return names[config.method.index()];
}

}  // namespace edgelab
