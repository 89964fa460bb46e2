#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "edgelab/model.hpp"
#include "edgelab/quant_tensor.hpp"

namespace edgelab {

struct SlotPlan {
  QuantSpec quant;
  std::optional<SparsitySpec> sparsity;
};

// Per-slot precision assignment over the matrix-shaped slots of a model.
// Norm scales stay in float and are outside the plan.
struct PrecisionPlan {
  std::map<std::string, SlotPlan> slots;
  std::optional<double> bpw_budget;

  static PrecisionPlan uniform(const TinyLM& model, const QuantSpec& spec,
                               const std::optional<SparsitySpec>& sparsity = std::nullopt);
};

// Analytic bit accounting for one slot; matches QuantTensor::bit_ratio().
BitRatio slot_bits(std::size_t rows, std::size_t cols, const SlotPlan& plan);

BitRatio plan_bits(const TinyLM& model, const PrecisionPlan& plan);
// Bits per weight over the matrix slots; float slots count as 32 bits.
BitRatio model_bits(const TinyLM& model);

double bpw(const QuantTensor& qt);
double bpw(const TinyLM& model, const PrecisionPlan& plan);

TinyLM ptq_model(const TinyLM& model, const PrecisionPlan& plan, bool freeze = true);

using LogitFn = std::function<Matrix(const Tokens&)>;

// Teacher-forced argmax agreement over every position of every sequence.
double top1_overlap(const LogitFn& a, const LogitFn& b, const std::vector<Tokens>& sequences);
double top1_overlap(const TinyLM& a, const TinyLM& b, const std::vector<Tokens>& sequences);

struct AssignOptions {
  QuantSpec base;  // bits overwritten per slot
  std::vector<int> ladder{8, 4, 3, 2};
};

struct AssignResult {
  PrecisionPlan plan;
  double bpw = 0.0;
  double overlap = 0.0;
  std::size_t demotions = 0;
  std::size_t promotions = 0;
};

// Greedy sensitivity search: demote the slot whose next-lower width costs the
// least Top-1 overlap until the budget holds, then promote while any single
// step still fits.
AssignResult assign_precision(const TinyLM& model, const std::vector<Tokens>& calibration,
                              double bpw_budget, const AssignOptions& opts = {});

}  // namespace edgelab
