#include "edgelab/quant.hpp"

#include <algorithm>
#include <cmath>

#include "edgelab/kv_cache.hpp"

namespace edgelab {

PrecisionPlan PrecisionPlan::uniform(const TinyLM& model, const QuantSpec& spec,
                                     const std::optional<SparsitySpec>& sparsity) {
  PrecisionPlan p;
  for (const auto& name : model.matrix_slots()) p.slots[name] = {spec, sparsity};
  return p;
}

BitRatio slot_bits(std::size_t rows, std::size_t cols, const SlotPlan& plan) {
  const QuantSpec& q = plan.quant;
  q.validate();
  BitRatio r;
  r.weights = static_cast<std::uint64_t>(rows) * cols;

  std::uint64_t groups = 1;
  switch (q.granularity.kind) {
    case Granularity::Kind::PerTensor: groups = 1; break;
    case Granularity::Kind::PerRow: groups = rows; break;
    case Granularity::Kind::PerGroup: {
      std::size_t g = q.granularity.group;
      if (g > cols) {
        if (q.strict_groups) throw ShapeError("quant group size exceeds row length");
        g = cols;
      }
      groups = static_cast<std::uint64_t>(rows) * ((cols + g - 1) / g);
      break;
    }
  }

  std::uint64_t kept = r.weights;
  if (plan.sparsity) {
    const SparsitySpec& s = *plan.sparsity;
    s.validate();
    if (s.kind == SparsitySpec::Kind::Unstructured) {
      kept = std::min<std::uint64_t>(
          r.weights, static_cast<std::uint64_t>(
                         std::ceil(s.keep_ratio * static_cast<double>(r.weights) - 1e-9)));
    } else {
      if (cols % s.m != 0) throw ShapeError("structured sparsity needs cols divisible by m");
      kept = static_cast<std::uint64_t>(rows) * (cols / s.m) * s.n;
    }
    r.bits += s.mask_bits(rows, cols);
  }
  r.bits += kept * static_cast<std::uint64_t>(q.bits);
  r.bits += groups * static_cast<std::uint64_t>(q.scale_bits);
  if (q.scheme == QuantScheme::Asymmetric) {
    r.bits += groups * static_cast<std::uint64_t>(q.zero_point_bits);
  }
  return r;
}

BitRatio plan_bits(const TinyLM& model, const PrecisionPlan& plan) {
  BitRatio total;
  for (const auto& name : model.matrix_slots()) {
    const auto it = plan.slots.find(name);
    if (it == plan.slots.end()) throw ConfigError("precision plan misses slot '" + name + "'");
    const auto [r, c] = slot_shape(model.config(), name);
    total += slot_bits(r, c, it->second);
  }
  return total;
}

BitRatio model_bits(const TinyLM& model) {
  BitRatio total;
  for (const auto& name : model.matrix_slots()) {
    const Weight& w = model.weight(name);
    if (w.quant) {
      total += w.quant->bit_ratio();
    } else {
      total += BitRatio{w.dense.size() * 32ULL, w.dense.size()};
    }
  }
  return total;
}

double bpw(const QuantTensor& qt) { return qt.bit_ratio().value(); }

double bpw(const TinyLM& model, const PrecisionPlan& plan) {
  return plan_bits(model, plan).value();
}

namespace {

Weight quantize_slot(const Matrix& w, const SlotPlan& sp, bool freeze) {
  Weight out;
  if (sp.sparsity) {
    SparseResult s = sparsify(w, *sp.sparsity);
    out.quant = quantize(s.tensor, sp.quant, &s.mask,
                         sp.sparsity->mask_bits(w.rows, w.cols));
  } else {
    out.quant = quantize(w, sp.quant);
  }
  if (freeze) out.quant->freeze();
  out.dense = dequantize(*out.quant);
  return out;
}

void check_plan_covers(const TinyLM& model, const PrecisionPlan& plan) {
  const auto slots = model.matrix_slots();
  for (const auto& name : slots) {
    if (!plan.slots.count(name)) {
      throw ConfigError("precision plan does not cover slot '" + name + "'");
    }
  }
  for (const auto& [name, _] : plan.slots) {
    if (std::find(slots.begin(), slots.end(), name) == slots.end()) {
      throw ConfigError("precision plan names unknown slot '" + name + "'");
    }
  }
}

}  // namespace

TinyLM ptq_model(const TinyLM& model, const PrecisionPlan& plan, bool freeze) {
  check_plan_covers(model, plan);
  std::vector<Weight> weights = model.weights();
  for (const auto& [name, sp] : plan.slots) {
    const std::size_t i = model.slot_index(name);
    weights[i] = quantize_slot(model.weight(i).dense, sp, freeze);
  }
  return TinyLM(model.config(), model.slot_names(), std::move(weights));
}

namespace {

std::vector<std::size_t> argmax_rows(const Matrix& logits) {
  std::vector<std::size_t> out(logits.rows);
  for (std::size_t r = 0; r < logits.rows; ++r) out[r] = argmax(logits.row(r));
  return out;
}

std::vector<std::size_t> teacher_forced(const TinyLM& m, const std::vector<Tokens>& seqs) {
  std::vector<std::size_t> out;
  for (const auto& s : seqs) {
    if (s.empty()) continue;
    const auto a = argmax_rows(forward(m, s, nullptr).logits);
    out.insert(out.end(), a.begin(), a.end());
  }
  return out;
}

double agreement(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
  if (a.empty()) throw RangeError("top-1 overlap needs at least one scoreable position");
  if (a.size() != b.size()) throw ShapeError("prediction streams differ in length");
  std::size_t same = 0;
  for (std::size_t i = 0; i < a.size(); ++i) same += a[i] == b[i];
  return static_cast<double>(same) / static_cast<double>(a.size());
}

}  // namespace

double top1_overlap(const LogitFn& a, const LogitFn& b, const std::vector<Tokens>& sequences) {
  std::vector<std::size_t> pa, pb;
  for (const auto& s : sequences) {
    if (s.empty()) continue;
    const Matrix la = a(s);
    const Matrix lb = b(s);
    if (la.rows != s.size() || lb.rows != s.size()) {
      throw ShapeError("logit source returned the wrong number of rows");
    }
    const auto xa = argmax_rows(la);
    const auto xb = argmax_rows(lb);
    pa.insert(pa.end(), xa.begin(), xa.end());
    pb.insert(pb.end(), xb.begin(), xb.end());
  }
  return agreement(pa, pb);
}

double top1_overlap(const TinyLM& a, const TinyLM& b, const std::vector<Tokens>& sequences) {
  return agreement(teacher_forced(a, sequences), teacher_forced(b, sequences));
}

AssignResult assign_precision(const TinyLM& model, const std::vector<Tokens>& calibration,
                              double bpw_budget, const AssignOptions& opts) {
  const auto slots = model.matrix_slots();
  const auto& ladder = opts.ladder;
  if (ladder.empty()) throw ConfigError("precision ladder is empty");

  auto plan_for = [&](const std::vector<std::size_t>& level) {
    PrecisionPlan p;
    for (std::size_t s = 0; s < slots.size(); ++s) {
      QuantSpec q = opts.base;
      q.bits = ladder[level[s]];
      p.slots[slots[s]] = {q, std::nullopt};
    }
    p.bpw_budget = bpw_budget;
    return p;
  };

  const std::vector<std::size_t> top(slots.size(), 0);
  const std::vector<std::size_t> bottom(slots.size(), ladder.size() - 1);
  const double max_bpw = bpw(model, plan_for(top));
  const double min_bpw = bpw(model, plan_for(bottom));
  if (bpw_budget < min_bpw || bpw_budget > max_bpw) {
    throw ConfigError("bpw budget " + std::to_string(bpw_budget) + " outside feasible range [" +
                      std::to_string(min_bpw) + ", " + std::to_string(max_bpw) + "]");
  }

  // Quantized variants per (slot, ladder level), built once.
  std::vector<std::vector<Weight>> variants(slots.size());
  for (std::size_t s = 0; s < slots.size(); ++s) {
    for (int bits : ladder) {
      QuantSpec q = opts.base;
      q.bits = bits;
      variants[s].push_back(quantize_slot(model.weight(slots[s]).dense, {q, std::nullopt}, true));
    }
  }
  const auto reference = teacher_forced(model, calibration);
  auto evaluate = [&](const std::vector<std::size_t>& level) {
    std::vector<Weight> w = model.weights();
    for (std::size_t s = 0; s < slots.size(); ++s) {
      w[model.slot_index(slots[s])] = variants[s][level[s]];
    }
    const TinyLM q(model.config(), model.slot_names(), std::move(w));
    return agreement(reference, teacher_forced(q, calibration));
  };

  AssignResult res;
  std::vector<std::size_t> level = top;
  while (bpw(model, plan_for(level)) > bpw_budget) {
    std::optional<std::size_t> best;
    double best_overlap = -1.0;
    for (std::size_t s = 0; s < slots.size(); ++s) {
      if (level[s] + 1 >= ladder.size()) continue;
      auto trial = level;
      ++trial[s];
      const double ov = evaluate(trial);
      if (ov > best_overlap) {
        best_overlap = ov;
        best = s;
      }
    }
    if (!best) throw ConfigError("budget unreachable with the given ladder");
    ++level[*best];
    ++res.demotions;
  }
  for (;;) {
    std::optional<std::size_t> best;
    double best_overlap = -1.0;
    for (std::size_t s = 0; s < slots.size(); ++s) {
      if (level[s] == 0) continue;
      auto trial = level;
      --trial[s];
      if (bpw(model, plan_for(trial)) > bpw_budget) continue;
      const double ov = evaluate(trial);
      if (ov > best_overlap) {
        best_overlap = ov;
        best = s;
      }
    }
    if (!best) break;
    --level[*best];
    ++res.promotions;
  }

  res.plan = plan_for(level);
  res.bpw = bpw(model, res.plan);
  res.overlap = evaluate(level);
  return res;
}

}  // namespace edgelab
