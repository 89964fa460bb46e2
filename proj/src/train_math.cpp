#include "edgelab/train_math.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <string_view>

namespace edgelab {

void MpoWeights::validate() const {
  if (w_p < 0.0 || w_q < 0.0 || w_g < 0.0) throw ConfigError("MPO weights must be nonnegative");
  if (!(w_p + w_q + w_g > 0.0)) throw ConfigError("MPO weights must not all be zero");
  if (!(beta > 0.0)) throw ConfigError("MPO beta must be positive");
  if (!std::isfinite(delta)) throw ConfigError("MPO delta must be finite");
}

double log_sigmoid(double x) {
  // log s(x) = -(max(-x, 0) + log1p(exp(-|x|)))
  return -(std::max(-x, 0.0) + std::log1p(std::exp(-std::abs(x))));
}

namespace {

void check_batch(const PrefBatch& batch) {
  if (batch.empty()) throw ContractError("preference batch is empty");
  for (const auto& s : batch) {
    if (!std::isfinite(s.lp_theta_c) || !std::isfinite(s.lp_0_c) ||
        !std::isfinite(s.lp_theta_r) || !std::isfinite(s.lp_0_r)) {
      throw RangeError("preference log-probabilities must be finite");
    }
  }
}

}  // namespace

double mpo_preference_loss(const PrefBatch& batch, double beta) {
  check_batch(batch);
  double sum = 0.0;
  for (const auto& s : batch) {
    sum -= log_sigmoid(beta * (s.chosen_log_ratio() - s.rejected_log_ratio()));
  }
  return sum / static_cast<double>(batch.size());
}

double mpo_quality_loss(const PrefBatch& batch, double beta, double delta) {
  check_batch(batch);
  double sum = 0.0;
  for (const auto& s : batch) {
    sum -= log_sigmoid(beta * s.chosen_log_ratio() - delta);
    sum -= log_sigmoid(-(beta * s.rejected_log_ratio() - delta));
  }
  return sum / static_cast<double>(batch.size());
}

double generation_loss(const std::vector<double>& token_logprobs) {
  if (token_logprobs.empty()) throw ContractError("generation loss needs at least one token");
  double sum = 0.0;
  for (double lp : token_logprobs) sum -= lp;
  return sum;
}

MpoBreakdown mpo_joint_loss(const PrefBatch& batch, const MpoWeights& weights,
                            const std::vector<double>& token_logprobs) {
  weights.validate();
  MpoBreakdown b;
  b.preference = mpo_preference_loss(batch, weights.beta);
  b.quality = mpo_quality_loss(batch, weights.beta, weights.delta);
  b.generation = generation_loss(token_logprobs);
  b.total = weights.w_p * b.preference + weights.w_q * b.quality + weights.w_g * b.generation;
  return b;
}

double reward_shift_update(double delta_prev, double new_reward, double momentum) {
  if (!(momentum >= 0.0 && momentum < 1.0)) {
    throw RangeError("reward-shift momentum must lie in [0, 1)");
  }
  if (!std::isfinite(delta_prev) || !std::isfinite(new_reward)) {
    throw RangeError("reward-shift inputs must be finite");
  }
  return momentum * delta_prev + (1.0 - momentum) * new_reward;
}

double entity_weighted_ce(const std::vector<std::vector<double>>& logprobs,
                          const std::vector<std::vector<double>>& alphas) {
  if (logprobs.empty()) throw ContractError("entity-weighted CE needs at least one sequence");
  if (logprobs.size() != alphas.size()) throw ShapeError("one weight list per sequence required");
  double sum = 0.0;
  for (std::size_t i = 0; i < logprobs.size(); ++i) {
    if (logprobs[i].size() != alphas[i].size()) {
      throw ShapeError("sequence " + std::to_string(i) + ": weight and log-prob lengths differ");
    }
    for (std::size_t t = 0; t < logprobs[i].size(); ++t) {
      if (!(alphas[i][t] >= 1.0)) throw RangeError("entity weights must be >= 1");
      sum += alphas[i][t] * logprobs[i][t];
    }
  }
  return -sum / static_cast<double>(logprobs.size());
}

void CaptionStats::validate() const {
  if (entity_flags.size() != tokens.size()) {
    throw ShapeError("one entity flag per caption token required");
  }
}

EntityLexicon EntityLexicon::demo() {
  EntityLexicon lx;
  lx.entities = {"beach", "car",   "cat",   "city",  "dog",   "lake",   "man",
                 "mountain", "ocean", "person", "river", "street", "sunset", "tree",
                 "woman", "building", "bridge", "boat", "bird", "sky"};
  lx.colors = {"red",  "orange", "yellow", "green", "blue", "purple",
               "pink", "black",  "white",  "gray",  "grey", "brown"};
  lx.numbers = {"one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten"};
  return lx;
}

namespace {

std::string lookup_form(std::string_view tok) {
  std::size_t b = 0, e = tok.size();
  while (b < e && std::ispunct(static_cast<unsigned char>(tok[b]))) ++b;
  while (e > b && std::ispunct(static_cast<unsigned char>(tok[e - 1]))) --e;
  std::string out(tok.substr(b, e - b));
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

}  // namespace

CaptionStats caption_stats(const std::string& caption, const EntityLexicon& lexicon) {
  CaptionStats st;
  std::size_t i = 0;
  while (i < caption.size()) {
    while (i < caption.size() && std::isspace(static_cast<unsigned char>(caption[i]))) ++i;
    std::size_t j = i;
    while (j < caption.size() && !std::isspace(static_cast<unsigned char>(caption[j]))) ++j;
    if (j > i) {
      const std::string w = lookup_form(std::string_view(caption).substr(i, j - i));
      st.tokens.push_back(w);
      st.entity_flags.push_back(lexicon.entities.count(w) > 0);
      st.has_color = st.has_color || lexicon.colors.count(w) > 0;
      const bool digits = std::any_of(w.begin(), w.end(),
                                      [](unsigned char c) { return std::isdigit(c); });
      st.has_number = st.has_number || digits || lexicon.numbers.count(w) > 0;
    }
    i = j;
  }
  return st;
}

double entity_density_reward(const CaptionStats& stats) {
  stats.validate();
  if (stats.tokens.empty()) throw ContractError("entity density undefined for an empty caption");
  const auto n = std::count(stats.entity_flags.begin(), stats.entity_flags.end(), true);
  return static_cast<double>(n) / static_cast<double>(stats.tokens.size());
}

double key_info_reward(const CaptionStats& stats, double beta1, double beta2) {
  return (stats.has_color ? beta1 : 0.0) + (stats.has_number ? beta2 : 0.0);
}

double total_reward(double r_entity, double r_info, double r_quality, double lambda1,
                    double lambda2, double lambda3) {
  return lambda1 * r_entity + lambda2 * r_info + lambda3 * r_quality;
}

DifficultySplit select_by_difficulty(const std::vector<RolloutRecord>& records, std::size_t lo,
                                     std::size_t hi, DifficultyScore score) {
  if (lo > hi) throw ConfigError("difficulty window has lo > hi");
  DifficultySplit out;
  for (const auto& r : records) {
    if (r.n_rollouts == 0 || r.n_correct > r.n_rollouts) {
      throw RangeError("rollout record '" + r.id + "' has inconsistent counts");
    }
    if (hi > r.n_rollouts) {
      throw ConfigError("difficulty window exceeds the rollout count of '" + r.id + "'");
    }
    const std::size_t s =
        score == DifficultyScore::CorrectCount ? r.n_correct : r.n_rollouts - r.n_correct;
    (s >= lo && s <= hi ? out.selected : out.excluded).push_back(r);
  }
  return out;
}

std::string to_string(PairVerdict v) {
  switch (v) {
    case PairVerdict::Keep: return "keep";
    case PairVerdict::InsufficientContrast: return "insufficient-contrast";
    case PairVerdict::RejectedTooCorrect: return "rejected-too-correct";
  }
  return "?";
}

PairVerdict mpo_pair_filter(const PairSim& sim, double contrast_max, double gt_max) {
  auto unit = [](double x) { return x >= 0.0 && x <= 1.0; };
  if (!unit(contrast_max) || !unit(gt_max)) throw ConfigError("similarity thresholds must lie in [0, 1]");
  if (!unit(sim.sim_chosen_rejected) || !unit(sim.sim_rejected_gt)) {
    throw RangeError("similarity scores must lie in [0, 1]");
  }
  if (sim.sim_chosen_rejected > contrast_max) return PairVerdict::InsufficientContrast;
  if (sim.sim_rejected_gt > gt_max) return PairVerdict::RejectedTooCorrect;
  return PairVerdict::Keep;
}

std::size_t InterleavedDoc::image_count() const {
  return static_cast<std::size_t>(std::count_if(segments.begin(), segments.end(), [](const auto& s) {
    return std::holds_alternative<ImageSegment>(s);
  }));
}

namespace {

constexpr std::string_view kOpen = "<img>";
constexpr std::string_view kClose = "</img>";

std::string placeholder(std::size_t k) { return "<|image_" + std::to_string(k) + "|>"; }

void push_text(std::vector<DocSegment>& segs, std::string_view text) {
  if (text.empty()) return;
  if (!segs.empty()) {
    if (auto* t = std::get_if<TextSegment>(&segs.back())) {
      t->text += text;
      return;
    }
  }
  segs.push_back(TextSegment{std::string(text)});
}

// Parses `<|image_N|>` at s[i]; returns N and advances i on success.
std::optional<std::size_t> read_placeholder(std::string_view s, std::size_t& i) {
  constexpr std::string_view pre = "<|image_";
  if (s.substr(i, pre.size()) != pre) return std::nullopt;
  std::size_t j = i + pre.size();
  const std::size_t digits_begin = j;
  while (j < s.size() && std::isdigit(static_cast<unsigned char>(s[j]))) ++j;
  if (j == digits_begin || j - digits_begin > 9 || s.substr(j, 2) != "|>") return std::nullopt;
  const auto k = static_cast<std::size_t>(std::stoul(std::string(s.substr(digits_begin, j - digits_begin))));
  i = j + 2;
  return k;
}

std::vector<std::string> read_header(std::string_view text, std::size_t& body_start) {
  std::vector<std::string> sources;
  std::size_t i = 0;
  for (;;) {
    std::size_t j = i;
    const auto k = read_placeholder(text, j);
    if (!k || *k != sources.size()) break;
    if (text.substr(j, 1 + kOpen.size()) != " <img>") break;
    j += 1 + kOpen.size();
    const std::size_t close = text.find(kClose, j);
    const std::size_t eol = text.find('\n', j);
    if (close == std::string_view::npos || eol == std::string_view::npos ||
        eol != close + kClose.size()) {
      break;
    }
    sources.emplace_back(text.substr(j, close - j));
    i = eol + 1;
  }
  body_start = i;
  return sources;
}

}  // namespace

InterleavedDoc parse_interleaved(const std::string& text) {
  InterleavedDoc doc;
  std::string_view s(text);
  std::size_t body = 0;
  const auto header = read_header(s, body);

  if (!header.empty()) {
    doc.images_first = true;
    std::size_t i = body, run = body;
    while (i < s.size()) {
      std::size_t j = i;
      const auto k = read_placeholder(s, j);
      if (k && *k < header.size()) {
        push_text(doc.segments, s.substr(run, i - run));
        doc.segments.push_back(ImageSegment{header[*k]});
        i = run = j;
      } else {
        ++i;
      }
    }
    push_text(doc.segments, s.substr(run));
    return doc;
  }

  std::size_t i = 0;
  while (i < s.size()) {
    const std::size_t open = s.find(kOpen, i);
    if (open == std::string_view::npos) break;
    const std::size_t close = s.find(kClose, open + kOpen.size());
    if (close == std::string_view::npos) break;
    push_text(doc.segments, s.substr(i, open - i));
    doc.segments.push_back(ImageSegment{std::string(s.substr(open + kOpen.size(), close - open - kOpen.size()))});
    i = close + kClose.size();
  }
  push_text(doc.segments, s.substr(i));
  return doc;
}

std::string serialize(const InterleavedDoc& doc) {
  std::string out;
  if (doc.images_first && doc.image_count() > 0) {
    std::size_t k = 0;
    for (const auto& seg : doc.segments) {
      if (const auto* img = std::get_if<ImageSegment>(&seg)) {
        out += placeholder(k++) + " <img>" + img->source + "</img>\n";
      }
    }
    k = 0;
    for (const auto& seg : doc.segments) {
      if (const auto* t = std::get_if<TextSegment>(&seg)) {
        out += t->text;
      } else {
        out += placeholder(k++);
      }
    }
    return out;
  }
  for (const auto& seg : doc.segments) {
    if (const auto* t = std::get_if<TextSegment>(&seg)) {
      out += t->text;
    } else {
      out += std::string(kOpen) + std::get<ImageSegment>(seg).source + std::string(kClose);
    }
  }
  return out;
}

InterleavedDoc reposition_images(const InterleavedDoc& doc, double p, std::uint64_t seed) {
  if (!(p >= 0.0 && p <= 1.0)) throw RangeError("repositioning probability must lie in [0, 1]");
  Rng rng(derive_seed(seed, "reposition"));
  const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  InterleavedDoc out = doc;
  if (u < p && doc.image_count() > 0) out.images_first = true;
  return out;
}

}  // namespace edgelab
