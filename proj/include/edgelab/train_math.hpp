#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "edgelab/common.hpp"

namespace edgelab {

// Sequence log-prob sums of the chosen and rejected responses under the
// policy (theta) and the reference (0).
struct PrefSample {
  double lp_theta_c = 0.0;
  double lp_0_c = 0.0;
  double lp_theta_r = 0.0;
  double lp_0_r = 0.0;

  double chosen_log_ratio() const { return lp_theta_c - lp_0_c; }
  double rejected_log_ratio() const { return lp_theta_r - lp_0_r; }
};
using PrefBatch = std::vector<PrefSample>;

struct MpoWeights {
  double w_p = 1.0;
  double w_q = 1.0;
  double w_g = 1.0;
  double beta = 0.1;
  double delta = 0.0;

  void validate() const;
};

// log(sigmoid(x)) without overflow for any finite x.
double log_sigmoid(double x);

// Batch reduction is the mean over samples.
double mpo_preference_loss(const PrefBatch& batch, double beta);
double mpo_quality_loss(const PrefBatch& batch, double beta, double delta);
// Negative sum (not mean) of per-token log-probabilities.
double generation_loss(const std::vector<double>& token_logprobs);

struct MpoBreakdown {
  double preference = 0.0;
  double quality = 0.0;
  double generation = 0.0;
  double total = 0.0;
};
MpoBreakdown mpo_joint_loss(const PrefBatch& batch, const MpoWeights& weights,
                            const std::vector<double>& token_logprobs);

// Exponential moving average: m * prev + (1 - m) * reward, m in [0, 1).
double reward_shift_update(double delta_prev, double new_reward, double momentum);

// -(1/N) sum_i sum_t alpha_it * logprob_it; every alpha must be >= 1.
double entity_weighted_ce(const std::vector<std::vector<double>>& logprobs,
                          const std::vector<std::vector<double>>& alphas);

struct CaptionStats {
  std::vector<std::string> tokens;
  std::vector<bool> entity_flags;
  bool has_color = false;
  bool has_number = false;

  void validate() const;
};

struct EntityLexicon {
  std::set<std::string> entities;
  std::set<std::string> colors;
  std::set<std::string> numbers;  // number words; digit strings always count

  static EntityLexicon demo();
};

// Lowercased whitespace tokens, punctuation trimmed at the edges for lookup.
CaptionStats caption_stats(const std::string& caption, const EntityLexicon& lexicon);

double entity_density_reward(const CaptionStats& stats);
double key_info_reward(const CaptionStats& stats, double beta1, double beta2);
double total_reward(double r_entity, double r_info, double r_quality, double lambda1,
                    double lambda2, double lambda3);

struct RolloutRecord {
  std::string id;
  std::size_t n_rollouts = 8;
  std::size_t n_correct = 0;
};

enum class DifficultyScore {
  CorrectCount,    // score = n_correct
  IncorrectCount,  // score = n_rollouts - n_correct
};

struct DifficultySplit {
  std::vector<RolloutRecord> selected;
  std::vector<RolloutRecord> excluded;
};

DifficultySplit select_by_difficulty(const std::vector<RolloutRecord>& records,
                                     std::size_t lo = 1, std::size_t hi = 4,
                                     DifficultyScore score = DifficultyScore::CorrectCount);

struct PairSim {
  double sim_chosen_rejected = 0.0;
  double sim_rejected_gt = 0.0;
};

enum class PairVerdict { Keep, InsufficientContrast, RejectedTooCorrect };
std::string to_string(PairVerdict v);

PairVerdict mpo_pair_filter(const PairSim& sim, double contrast_max = 0.9,
                            double gt_max = 0.8);

struct TextSegment {
  std::string text;
  friend bool operator==(const TextSegment&, const TextSegment&) = default;
};
struct ImageSegment {
  std::string source;
  friend bool operator==(const ImageSegment&, const ImageSegment&) = default;
};
using DocSegment = std::variant<TextSegment, ImageSegment>;

// An interleaved image-text document. `images_first` selects the serialized
// layout: inline `<img>SRC</img>` tags, or one `<|image_k|> <img>SRC</img>`
// header line per image followed by the text with `<|image_k|>` placeholders.
struct InterleavedDoc {
  std::vector<DocSegment> segments;
  bool images_first = false;

  std::size_t image_count() const;
  friend bool operator==(const InterleavedDoc&, const InterleavedDoc&) = default;
};

InterleavedDoc parse_interleaved(const std::string& text);
std::string serialize(const InterleavedDoc& doc);

// One Bernoulli(p) draw per document decides whether images move to the front.
InterleavedDoc reposition_images(const InterleavedDoc& doc, double p, std::uint64_t seed);

}  // namespace edgelab
