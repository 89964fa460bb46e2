#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <regex>
#include <set>

#include "edgelab/train_math.hpp"

using namespace edgelab;

namespace {

PrefSample ratios(double chosen, double rejected) { return {chosen, 0.0, rejected, 0.0}; }

// -log(sigmoid(x)) the long way, valid for moderate x.
double nls(double x) { return std::log1p(std::exp(-x)); }

const std::string kFigureOriginal =
    "The sunset over the Pacific Ocean was breathtaking. <img>pacific_sunset.jpg</img> The "
    "vibrant colors painted the sky in shades of orange and pink. Later that evening, we hiked "
    "to the mountain viewpoint. <img>mountain_vista.jpg</img>";
const std::string kFigureTransformed =
    "<|image_0|> <img>pacific_sunset.jpg</img>\n"
    "<|image_1|> <img>mountain_vista.jpg</img>\n"
    "The sunset over the Pacific Ocean was breathtaking. <|image_0|> The vibrant colors painted "
    "the sky in shades of orange and pink. Later that evening, we hiked to the mountain "
    "viewpoint. <|image_1|>";

std::uint64_t seed_that_moves(double p) {
  // First seed whose single Bernoulli draw fires.
  for (std::uint64_t s = 0;; ++s) {
    InterleavedDoc d;
    d.segments = {ImageSegment{"x"}};
    if (reposition_images(d, p, s).images_first) return s;
  }
}

}  // namespace

TEST(LogSigmoid, StableAtExtremes) {
  EXPECT_NEAR(log_sigmoid(0.0), -std::log(2.0), 1e-15);
  EXPECT_NEAR(log_sigmoid(-1e4), -1e4, 1e-9);
  EXPECT_EQ(log_sigmoid(1e4), 0.0);
  for (double x : {-30.0, -2.0, 0.5, 7.0}) EXPECT_NEAR(-log_sigmoid(x), nls(x), 1e-12);
}

TEST(PreferenceLoss, Examples) {
  EXPECT_NEAR(mpo_preference_loss({{-3.2, -3.2, -5.1, -5.1}}, 0.1), std::log(2.0), 1e-12);
  EXPECT_NEAR(mpo_preference_loss({ratios(2, -2)}, 0.1), 0.513015, 1e-6);
  EXPECT_NEAR(mpo_preference_loss({ratios(2, -2)}, 0.1), nls(0.4), 1e-14);
  double prev = 1e9;
  for (double m : {10.0, 20.0, 40.0}) {
    const double l = mpo_preference_loss({ratios(m, 0)}, 0.1);
    EXPECT_LT(l, prev);
    EXPECT_GE(l, 0.0);
    prev = l;
  }
}

TEST(PreferenceLoss, MeanOverSamples) {
  const PrefBatch b{ratios(2, -2), ratios(0, 0)};
  EXPECT_NEAR(mpo_preference_loss(b, 0.1), 0.5 * (nls(0.4) + std::log(2.0)), 1e-14);
  EXPECT_THROW(mpo_preference_loss({}, 0.1), ContractError);
  EXPECT_THROW(mpo_preference_loss({ratios(NAN, 0)}, 0.1), RangeError);
}

TEST(PreferenceLoss, FiniteAtLargeMargins) {
  for (double m : {-1e4, -1e3, 1e3, 1e4}) {
    EXPECT_TRUE(std::isfinite(mpo_preference_loss({ratios(m, -m)}, 1.0)));
    EXPECT_TRUE(std::isfinite(mpo_quality_loss({ratios(m, -m)}, 1.0, 0.0)));
  }
}

TEST(QualityLoss, Examples) {
  EXPECT_NEAR(mpo_quality_loss({{-1, -1, -2, -2}}, 0.1, 0.0), 2 * std::log(2.0), 1e-12);
  EXPECT_NEAR(mpo_quality_loss({ratios(3, -3)}, 1.0, 0.0), 0.0971747, 1e-6);
  EXPECT_NEAR(mpo_quality_loss({ratios(3, -3)}, 1.0, 0.0), 2 * std::log1p(std::exp(-3.0)), 1e-14);
}

TEST(QualityLoss, DeltaShiftsTermsInOppositeDirections) {
  // chosen term -log s(b*c - d) rises with d; rejected term -log s(d - b*r) falls.
  double prev_c = -1, prev_r = 1e9;
  for (double d : {-1.0, 0.0, 1.0}) {
    const double chosen = nls(0.5 - d), rejected = nls(d + 0.7);
    EXPECT_NEAR(mpo_quality_loss({ratios(0.5, -0.7)}, 1.0, d), chosen + rejected, 1e-14);
    EXPECT_GT(chosen, prev_c);
    EXPECT_LT(rejected, prev_r);
    prev_c = chosen;
    prev_r = rejected;
  }
}

TEST(GenerationLoss, Examples) {
  const double u = std::log(0.25);
  EXPECT_NEAR(generation_loss({u, u, u}), 3 * std::log(4.0), 1e-9);
  EXPECT_EQ(generation_loss({0.0, 0.0}), 0.0);
  EXPECT_EQ(generation_loss({-0.5, -1.5}), 2.0);
  EXPECT_THROW(generation_loss({}), ContractError);
}

TEST(JointLoss, ReductionsAndSum) {
  const PrefBatch b{ratios(2, -2)};
  const std::vector<double> tok{-0.5, -1.5};
  MpoWeights w{1, 0, 0, 0.1, 0};
  EXPECT_EQ(mpo_joint_loss(b, w, tok).total, mpo_preference_loss(b, 0.1));
  w = {0, 0, 1, 0.1, 0};
  EXPECT_EQ(mpo_joint_loss(b, w, tok).total, 2.0);
  w = {1, 1, 1, 0.1, 0};
  const MpoBreakdown all = mpo_joint_loss(b, w, tok);
  EXPECT_NEAR(all.total, nls(0.4) + (nls(0.2) + nls(0.2)) + 2.0, 1e-12);
  EXPECT_NEAR(all.total, all.preference + all.quality + all.generation, 1e-15);
  EXPECT_THROW((MpoWeights{0, 0, 0, 0.1, 0}.validate()), ConfigError);
  EXPECT_THROW((MpoWeights{1, 1, 1, 0.0, 0}.validate()), ConfigError);
}

TEST(RewardShift, MovingAverage) {
  EXPECT_EQ(reward_shift_update(5.0, 2.0, 0.0), 2.0);
  EXPECT_NEAR(reward_shift_update(1.0, 0.0, 0.9), 0.9, 1e-15);
  double d = 0.0;
  for (int i = 0; i < 200; ++i) d = reward_shift_update(d, 0.7, 0.9);
  EXPECT_NEAR(d, 0.7, 1e-6);
  EXPECT_THROW(reward_shift_update(0, 0, 1.0), RangeError);
  EXPECT_THROW(reward_shift_update(0, 0, -0.1), RangeError);
}

TEST(EntityCe, Examples) {
  EXPECT_EQ(entity_weighted_ce({{-1, -1}}, {{2, 1}}), 3.0);
  const std::vector<std::vector<double>> lp{{-0.3, -1.2, -0.05}, {-2.0, -0.4}};
  const std::vector<std::vector<double>> ones{{1, 1, 1}, {1, 1}};
  EXPECT_EQ(entity_weighted_ce(lp, ones),
            (generation_loss({-0.3, -1.2, -0.05, -2.0, -0.4})) / 2.0);
  EXPECT_EQ(entity_weighted_ce({lp[0]}, {{1, 1, 1}}), generation_loss(lp[0]));
  EXPECT_NEAR(entity_weighted_ce({lp[0]}, {{1, 2, 1}}) - entity_weighted_ce({lp[0]}, {{1, 1, 1}}), 1.2,
              1e-15);
  EXPECT_THROW(entity_weighted_ce({{-1}}, {{0.5}}), RangeError);
  EXPECT_THROW(entity_weighted_ce({{-1, -1}}, {{1}}), ShapeError);
}

TEST(Rewards, EntityDensityAndKeyInfo) {
  CaptionStats s;
  s.tokens = std::vector<std::string>(10, "w");
  s.entity_flags = {true, false, true, false, false, true, false, false, false, false};
  EXPECT_NEAR(entity_density_reward(s), 0.3, 1e-15);
  s.entity_flags.assign(10, false);
  EXPECT_EQ(entity_density_reward(s), 0.0);
  s.entity_flags.assign(10, true);
  EXPECT_EQ(entity_density_reward(s), 1.0);
  EXPECT_THROW(entity_density_reward(CaptionStats{}), ContractError);

  s.has_color = true;
  EXPECT_EQ(key_info_reward(s, 0.5, 0.5), 0.5);
  s.has_number = true;
  EXPECT_EQ(key_info_reward(s, 0.25, 0.5), 0.75);
  s.has_color = s.has_number = false;
  EXPECT_EQ(key_info_reward(s, 0.5, 0.5), 0.0);
}

TEST(Rewards, CaptionStatsFromLexicon) {
  const CaptionStats s = caption_stats("Two dogs? No: a Dog, a red car and 3 trees.", EntityLexicon::demo());
  ASSERT_EQ(s.tokens.size(), 11u);
  EXPECT_TRUE(s.has_color);
  EXPECT_TRUE(s.has_number);
  std::size_t ents = 0;
  for (bool f : s.entity_flags) ents += f;
  EXPECT_EQ(ents, 2u);  // "dog," and "car"; plurals are not stemmed
}

TEST(Rewards, TotalIsWeightedSum) {
  EXPECT_EQ(total_reward(0.3, 0.5, 1.0, 1, 0, 0), 0.3);
  EXPECT_EQ(total_reward(0.3, 0.5, 0.75, 0, 0, 1), 0.75);
  EXPECT_NEAR(total_reward(0.3, 0.5, 1.0, 0.3, 0.3, 0.4), 0.64, 1e-15);
}

TEST(Difficulty, WindowSelection) {
  const std::vector<RolloutRecord> recs{{"hard", 8, 0}, {"mid", 8, 3}, {"easy", 8, 8}, {"edge", 8, 4}};
  const DifficultySplit s = select_by_difficulty(recs);
  ASSERT_EQ(s.selected.size(), 2u);
  EXPECT_EQ(s.selected[0].id, "mid");
  EXPECT_EQ(s.selected[1].id, "edge");
  ASSERT_EQ(s.excluded.size(), 2u);
  const DifficultySplit inv = select_by_difficulty(recs, 1, 4, DifficultyScore::IncorrectCount);
  ASSERT_EQ(inv.selected.size(), 1u);
  EXPECT_EQ(inv.selected[0].id, "edge");
  EXPECT_THROW(select_by_difficulty(recs, 5, 4), ConfigError);
  EXPECT_THROW(select_by_difficulty({{"bad", 8, 9}}), RangeError);
}

TEST(Difficulty, PartitionsInput) {
  std::mt19937_64 rng(3);
  std::vector<RolloutRecord> recs;
  for (int i = 0; i < 200; ++i) recs.push_back({std::to_string(i), 8, rng() % 9});
  const DifficultySplit s = select_by_difficulty(recs);
  EXPECT_EQ(s.selected.size() + s.excluded.size(), recs.size());
  std::set<std::string> ids;
  for (const auto& r : s.selected) ids.insert(r.id);
  for (const auto& r : s.excluded) EXPECT_TRUE(ids.insert(r.id).second);
  EXPECT_EQ(ids.size(), recs.size());
}

TEST(PairFilter, Verdicts) {
  EXPECT_EQ(mpo_pair_filter({0.2, 0.2}), PairVerdict::Keep);
  EXPECT_EQ(mpo_pair_filter({0.95, 0.2}), PairVerdict::InsufficientContrast);
  EXPECT_EQ(mpo_pair_filter({0.2, 0.95}), PairVerdict::RejectedTooCorrect);
  EXPECT_EQ(to_string(PairVerdict::InsufficientContrast), "insufficient-contrast");
  EXPECT_EQ(to_string(PairVerdict::RejectedTooCorrect), "rejected-too-correct");
  EXPECT_THROW(mpo_pair_filter({1.5, 0.2}), RangeError);
  EXPECT_THROW(mpo_pair_filter({0.2, 0.2}, 1.2, 0.8), ConfigError);
}

TEST(Reposition, FigureExampleByteForByte) {
  const InterleavedDoc doc = parse_interleaved(kFigureOriginal);
  EXPECT_EQ(doc.image_count(), 2u);
  EXPECT_EQ(serialize(doc), kFigureOriginal);
  const InterleavedDoc moved = reposition_images(doc, 1.0, 0);
  EXPECT_EQ(serialize(moved), kFigureTransformed);
  // The transformed text parses back to the same document.
  EXPECT_EQ(parse_interleaved(kFigureTransformed), moved);
  // Idempotent on an already-transformed document.
  EXPECT_EQ(serialize(reposition_images(parse_interleaved(kFigureTransformed), 1.0, 5)), kFigureTransformed);
}

TEST(Reposition, SeededHalfProbability) {
  const InterleavedDoc doc = parse_interleaved(kFigureOriginal);
  const std::uint64_t s = seed_that_moves(0.5);
  EXPECT_EQ(serialize(reposition_images(doc, 0.5, s)), kFigureTransformed);
  int moved = 0;
  for (std::uint64_t seed = 0; seed < 2000; ++seed) moved += reposition_images(doc, 0.5, seed).images_first;
  EXPECT_GT(moved, 900);
  EXPECT_LT(moved, 1100);
}

TEST(Reposition, IdentityCases) {
  const InterleavedDoc doc = parse_interleaved(kFigureOriginal);
  for (std::uint64_t s = 0; s < 50; ++s) EXPECT_EQ(serialize(reposition_images(doc, 0.0, s)), kFigureOriginal);
  const InterleavedDoc plain = parse_interleaved("no pictures here.");
  EXPECT_EQ(serialize(reposition_images(plain, 1.0, 1)), "no pictures here.");
  EXPECT_THROW(reposition_images(doc, 1.5, 0), RangeError);
}

TEST(Reposition, IndexConsistencyOnRandomDocuments) {
  std::mt19937_64 rng(42);
  const std::vector<std::string> words{"alpha", "beta", "gamma", "delta", "eps."};
  for (int trial = 0; trial < 100; ++trial) {
    std::string text;
    std::vector<std::string> sources;
    const int parts = 1 + static_cast<int>(rng() % 8);
    for (int i = 0; i < parts; ++i) {
      if (rng() % 2) {
        sources.push_back("img" + std::to_string(trial) + "_" + std::to_string(i) + ".png");
        text += "<img>" + sources.back() + "</img>";
      } else {
        text += words[rng() % words.size()];
      }
      if (i + 1 < parts) text += " ";
    }
    const InterleavedDoc doc = parse_interleaved(text);
    ASSERT_EQ(serialize(doc), text);
    const std::string out = serialize(reposition_images(doc, 1.0, trial));
    if (sources.empty()) {
      EXPECT_EQ(out, text);
      continue;
    }
    // Header line k names the k-th source; the body holds <|image_k|> in order.
    std::size_t pos = 0;
    for (std::size_t k = 0; k < sources.size(); ++k) {
      const std::string line = "<|image_" + std::to_string(k) + "|> <img>" + sources[k] + "</img>\n";
      ASSERT_EQ(out.compare(pos, line.size(), line), 0) << out;
      pos += line.size();
    }
    const std::string body = out.substr(pos);
    EXPECT_EQ(body.find("<img>"), std::string::npos);
    const std::regex tag(R"(<\|image_(\d+)\|>)");
    std::size_t k = 0;
    for (auto it = std::sregex_iterator(body.begin(), body.end(), tag); it != std::sregex_iterator(); ++it, ++k) {
      EXPECT_EQ(std::stoul((*it)[1]), k);
    }
    EXPECT_EQ(k, sources.size());
    // Replacing the placeholders by the inline tags restores the original.
    std::string restored = body;
    for (std::size_t j = 0; j < sources.size(); ++j) {
      const std::string ph = "<|image_" + std::to_string(j) + "|>";
      restored.replace(restored.find(ph), ph.size(), "<img>" + sources[j] + "</img>");
    }
    EXPECT_EQ(restored, text);
  }
}
