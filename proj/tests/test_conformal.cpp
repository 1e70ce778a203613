#include "cotd/conformal.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace cotd;

namespace {

CalibrationSet hundred_scores() {
  std::vector<std::vector<double>> rows;
  for (int i = 100; i >= 1; --i) rows.push_back({i / 10.0});
  return CalibrationSet::from_scores(rows, {});
}

EnvConfig deterministic_grid() {
  auto c = EnvConfig::training(EnvId::Gridworld);
  c.grid.slippery_rows.clear();
  return c;
}

struct GridArtifacts {
  PolicyNet policy;
  CvaeEnsemble ensemble;
};

const GridArtifacts& grid_artifacts() {
  static const GridArtifacts a = [] {
    GridArtifacts g;
    g.policy = train_agent(deterministic_grid(), default_agent_hyper(EnvId::Gridworld), 3).policy;
    g.ensemble = train_cvae_ensemble(g.policy, deterministic_grid(), 3, 400, CvaeHyper{}, 4).ensemble;
    return g;
  }();
  return a;
}

}  // namespace

TEST(CalibrationSet, PoolsAndSorts) {
  const auto c = CalibrationSet::from_scores({{0.5, 0.1, 0.9}, {0.3, 0.7, 0.2}}, {});
  EXPECT_EQ(c.m, 2u);
  EXPECT_EQ(c.n, 3u);
  EXPECT_EQ(c.scores, (std::vector<double>{0.1, 0.2, 0.3, 0.5, 0.7, 0.9}));
  EXPECT_EQ(c.per_model[0], (std::vector<double>{0.3, 0.5}));
}

TEST(CalibrationSet, InsertionOrderDoesNotMatter) {
  Rng rng(1);
  std::vector<std::vector<double>> rows(50, std::vector<double>(4));
  for (auto& r : rows)
    for (auto& v : r) v = uniform(rng, 0, 3);
  const auto a = CalibrationSet::from_scores(rows, {});
  std::shuffle(rows.begin(), rows.end(), rng);
  const auto b = CalibrationSet::from_scores(rows, {});
  EXPECT_EQ(a.scores, b.scores);
  EXPECT_EQ(a.per_model, b.per_model);
}

TEST(CalibrationSet, RejectsNegativeOrRaggedScores) {
  EXPECT_THROW(CalibrationSet::from_scores({{0.1, -0.2}}, {}), ContractError);
  EXPECT_THROW(CalibrationSet::from_scores({{0.1, 0.2}, {0.3}}, {}), ContractError);
}

TEST(BuildCalibrationSet, DeterministicCountedAndGuarded) {
  const auto& g = grid_artifacts();
  const auto a = build_calibration_set(g.policy, g.ensemble, deterministic_grid(), 120, 9);
  const auto b = build_calibration_set(g.policy, g.ensemble, deterministic_grid(), 120, 9);
  EXPECT_EQ(a.scores.size(), 120u * 3u);
  EXPECT_TRUE(std::is_sorted(a.scores.begin(), a.scores.end()));
  EXPECT_EQ(a.scores, b.scores);
  EXPECT_EQ(a.provenance, provenance_of(g.ensemble));
  EXPECT_THROW(build_calibration_set(g.policy, g.ensemble, deterministic_grid(), 99, 9), ConfigError);
  auto other = g.policy;
  (*other.net.parameters().front())[0] += 1.0;
  EXPECT_THROW(build_calibration_set(other, g.ensemble, deterministic_grid(), 120, 9), IntegrityError);
}

TEST(Threshold, RankArithmetic) {
  const auto c = hundred_scores();
  EXPECT_DOUBLE_EQ(conformal_threshold(c, {0.05, ThresholdMode::PaperLiteral}), 0.5);
  EXPECT_DOUBLE_EQ(conformal_threshold(c, {0.05, ThresholdMode::Validity}), 9.6);
  // ceil(0.99 * 101) = 100: the largest score
  EXPECT_DOUBLE_EQ(conformal_threshold(c, {0.01, ThresholdMode::Validity}), 10.0);
  EXPECT_EQ(threshold_rank(100, 0.05, ThresholdMode::PaperLiteral), 5u);
  EXPECT_EQ(threshold_rank(100, 0.05, ThresholdMode::Validity), 96u);
}

TEST(Threshold, OutOfRangeRankIsConfigError) {
  const auto c = hundred_scores();
  EXPECT_THROW(conformal_threshold(c, {0.005, ThresholdMode::PaperLiteral}), ConfigError);
  EXPECT_THROW(conformal_threshold(c, {0.001, ThresholdMode::Validity}), ConfigError);
  EXPECT_THROW(conformal_threshold(c, {0.0, ThresholdMode::Validity}), ConfigError);
  EXPECT_THROW(conformal_threshold(c, {1.0, ThresholdMode::PaperLiteral}), ConfigError);
}

TEST(Threshold, MonotoneInDelta) {
  Rng rng(3);
  std::vector<std::vector<double>> rows(200, std::vector<double>(5));
  for (auto& r : rows)
    for (auto& v : r) v = std::exp(normal(rng));
  const auto c = CalibrationSet::from_scores(rows, {});
  double prev_valid = std::numeric_limits<double>::infinity(), prev_literal = -1.0;
  for (double d = 0.01; d < 0.99; d += 0.01) {
    const double tv = conformal_threshold(c, {d, ThresholdMode::Validity});
    const double tl = conformal_threshold(c, {d, ThresholdMode::PaperLiteral});
    EXPECT_LE(tv, prev_valid);
    EXPECT_GE(tl, prev_literal);
    prev_valid = tv;
    prev_literal = tl;
  }
}

TEST(Threshold, PerModelOption) {
  const auto c = CalibrationSet::from_scores({{1, 10}, {2, 20}, {3, 30}, {4, 40}}, {});
  const DetectorConfig pooled{0.5, ThresholdMode::PaperLiteral, false};
  const DetectorConfig split{0.5, ThresholdMode::PaperLiteral, true};
  EXPECT_EQ(model_thresholds(c, pooled), (std::vector<double>{4, 4}));  // rank floor(0.5*8) = 4
  EXPECT_EQ(model_thresholds(c, split), (std::vector<double>{2, 20}));   // rank floor(0.5*4) = 2
}

TEST(DetectOod, Examples) {
  auto v = detect_ood({10.1, 11.0, 12.3}, 9.6, 3);
  EXPECT_TRUE(v.is_ood);
  EXPECT_TRUE(v.conforming.empty());
  v = detect_ood({1.0, 11.0, 12.3}, 9.6, 3);
  EXPECT_FALSE(v.is_ood);
  EXPECT_EQ(v.conforming, (std::vector<std::size_t>{0}));
  v = detect_ood({9.6, 9.6, 9.6}, 9.6, 3);
  EXPECT_TRUE(v.is_ood);
  EXPECT_DOUBLE_EQ(v.mean, 9.6);
  EXPECT_THROW(detect_ood({1.0, 2.0}, 9.6, 3), ContractError);
}

TEST(DetectOod, SummaryFields) {
  const auto v = detect_ood({3.0, 1.0, 2.0}, 2.5, 3);
  EXPECT_EQ(v.min, 1.0);
  EXPECT_EQ(v.max, 3.0);
  EXPECT_DOUBLE_EQ(v.mean, 2.0);
  EXPECT_EQ(v.threshold, 2.5);
  EXPECT_EQ(v.is_ood, v.conforming.empty());
}

TEST(DetectOod, PermutationInvariantAndMonotone) {
  Rng rng(5);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> e(5);
    for (auto& x : e) x = uniform(rng, 0, 2);
    const double t = uniform(rng, 0, 2);
    const bool base = detect_ood(e, t, 5).is_ood;
    auto p = e;
    std::shuffle(p.begin(), p.end(), rng);
    EXPECT_EQ(detect_ood(p, t, 5).is_ood, base);
    // raising one score never turns an OOD verdict into ID
    auto up = e;
    up[static_cast<std::size_t>(trial % 5)] += uniform(rng, 0, 1);
    if (base) EXPECT_TRUE(detect_ood(up, t, 5).is_ood);
  }
}

TEST(ContinuousScore, Aggregations) {
  EXPECT_EQ(continuous_score({1, 2, 3}), 2.0);
  EXPECT_EQ(continuous_score({1, 2, 3}, Aggregation::Min), 1.0);
  EXPECT_EQ(continuous_score({4.5}, Aggregation::Mean), 4.5);
  EXPECT_EQ(continuous_score({4.5}, Aggregation::Min), 4.5);
  EXPECT_THROW(continuous_score({}), ContractError);
}

TEST(Validity, ExchangeableScoresRespectDelta) {
  // iid lognormal scores: every held-out score is exchangeable with the pool
  const double delta = 0.05;
  Rng rng(77);
  const std::size_t m = 400, n = 5, held = 2000;
  std::vector<std::vector<double>> rows(m, std::vector<double>(n));
  for (auto& r : rows)
    for (auto& v : r) v = std::exp(normal(rng));
  const auto cal = CalibrationSet::from_scores(rows, {});
  const double t = conformal_threshold(cal, {delta, ThresholdMode::Validity});
  std::size_t exceed = 0, ood = 0;
  for (std::size_t i = 0; i < held; ++i) {
    std::vector<double> e(n);
    for (auto& v : e) v = std::exp(normal(rng));
    exceed += e[0] >= t;
    ood += detect_ood(e, t, n).is_ood;
  }
  const double bound = delta + 3.0 * std::sqrt(delta * (1 - delta) / held);
  EXPECT_LE(static_cast<double>(exceed) / held, bound);
  EXPECT_LE(ood, exceed);
}

TEST(Provenance, MismatchIsRefused) {
  const auto& g = grid_artifacts();
  const auto cal = build_calibration_set(g.policy, g.ensemble, deterministic_grid(), 100, 1);
  EXPECT_NO_THROW(verify_provenance(cal, g.ensemble));
  auto other = g.ensemble;
  (*other.models[0].decoder.parameters().back())[0] += 0.1;
  EXPECT_THROW(verify_provenance(cal, other), IntegrityError);
  auto moved = g.ensemble;
  moved.config_ini += "\n";
  EXPECT_THROW(verify_provenance(cal, moved), IntegrityError);
}

TEST(CalibrationPersistence, RoundTripAndCsv) {
  const auto cal = CalibrationSet::from_scores({{0.5, 0.1}, {0.3, 0.7}}, {11, 22});
  const auto back = calibration_from_checkpoint(Checkpoint::from_bytes(calibration_checkpoint(cal).to_bytes()));
  EXPECT_EQ(back.scores, cal.scores);
  EXPECT_EQ(back.per_model, cal.per_model);
  EXPECT_EQ(back.provenance, cal.provenance);
  EXPECT_EQ(back.m, 2u);
  const auto csv = calibration_csv(cal);
  EXPECT_NE(csv.find("rank,score\n1,0.1\n2,0.3\n3,0.5\n4,0.7\n"), std::string::npos);

  auto ck = calibration_checkpoint(cal);
  ck.metadata["kind"] = "policy";
  EXPECT_THROW(calibration_from_checkpoint(ck), FormatError);
}
