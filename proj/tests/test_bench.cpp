#include "cotd/bench.hpp"

#include <gtest/gtest.h>

#include <numbers>
#include <set>

using namespace cotd;

namespace {

// fraction of (ood, id) pairs where ood scores higher, ties count half
double brute_force_auc(const std::vector<double>& s, const std::vector<bool>& l) {
  double wins = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (l[i] && !l[j]) {
        pairs += 1.0;
        wins += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
      }
  return wins / pairs;
}

EnvConfig deterministic_grid() {
  auto c = EnvConfig::training(EnvId::Gridworld);
  c.grid.slippery_rows.clear();
  return c;
}

const PolicyNet& cartpole_policy() {
  static const PolicyNet p = train_agent(EnvConfig::training(EnvId::CartPole),
                                         default_agent_hyper(EnvId::CartPole), 1).policy;
  return p;
}

struct GridDetector {
  EnvConfig config;
  PolicyNet policy;
  CvaeEnsemble ensemble;
  CalibrationSet calibration;
};

// slippery-row gridworld with a small COTD bundle
const GridDetector& grid_detector() {
  static const GridDetector g = [] {
    GridDetector d;
    d.config = EnvConfig::training(EnvId::Gridworld);
    d.policy = train_agent(d.config, default_agent_hyper(EnvId::Gridworld), 2).policy;
    d.ensemble = train_cvae_ensemble(d.policy, d.config, 3, 3000, CvaeHyper{}, 5).ensemble;
    d.calibration = build_calibration_set(d.policy, d.ensemble, d.config, 600, 6);
    return d;
  }();
  return g;
}

/// Flags from step `at` on with a score that grows with the step index.
class FlagAtStep final : public Detector {
 public:
  explicit FlagAtStep(std::size_t at) : at_(at) {}
  std::string name() const override { return "flag-at"; }
  Assessment assess(const StateVector&, const ActionValue&, const StateVector&, const TruthHint&) const override {
    const std::size_t t = step_++;
    return {static_cast<double>(t), t >= at_};
  }

 private:
  std::size_t at_;
  mutable std::size_t step_ = 0;
};

}  // namespace

// ---------------------------------------------------------------- ROC

TEST(RocAuc, Examples) {
  EXPECT_DOUBLE_EQ(compute_roc_auc({0.1, 0.2, 0.9, 1.0}, {false, false, true, true}).auc, 1.0);
  EXPECT_DOUBLE_EQ(compute_roc_auc({0.4, 0.4, 0.4, 0.4}, {false, true, false, true}).auc, 0.5);
  EXPECT_DOUBLE_EQ(compute_roc_auc({0.3, 0.7, 0.5, 0.9}, {false, false, true, true}).auc, 0.75);
}

TEST(RocAuc, MatchesAllPairsOnRandomInstances) {
  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng() % 199;
    std::vector<double> s(n);
    std::vector<bool> l(n);
    for (std::size_t i = 0; i < n; ++i) {
      // coarse grid so ties are common
      s[i] = std::floor(uniform(rng, 0, 20)) / 4.0;
      l[i] = rng() % 2;
    }
    l[0] = true;
    l[1] = false;
    const auto r = compute_roc_auc(s, l);
    EXPECT_NEAR(r.auc, brute_force_auc(s, l), 1e-12);
    EXPECT_GE(r.auc, 0.0);
    EXPECT_LE(r.auc, 1.0);
  }
}

TEST(RocAuc, PointsAreMonotone) {
  Rng rng(12);
  std::vector<double> s(300);
  std::vector<bool> l(300);
  for (std::size_t i = 0; i < s.size(); ++i) {
    l[i] = i % 3 == 0;
    s[i] = normal(rng) + (l[i] ? 1.0 : 0.0);
  }
  const auto r = compute_roc_auc(s, l);
  EXPECT_EQ(r.points.front().fpr, 0.0);
  EXPECT_EQ(r.points.front().tpr, 0.0);
  EXPECT_DOUBLE_EQ(r.points.back().fpr, 1.0);
  EXPECT_DOUBLE_EQ(r.points.back().tpr, 1.0);
  for (std::size_t i = 1; i < r.points.size(); ++i) {
    EXPECT_GE(r.points[i].fpr, r.points[i - 1].fpr);
    EXPECT_GE(r.points[i].tpr, r.points[i - 1].tpr);
    EXPECT_LT(r.points[i].threshold, r.points[i - 1].threshold);
  }
  EXPECT_EQ(r.positives, 100u);
  EXPECT_EQ(r.negatives, 200u);
}

TEST(RocAuc, RejectsDegenerateInput) {
  EXPECT_THROW(compute_roc_auc({0.1, 0.2}, {true, true}), MetricError);
  EXPECT_THROW(compute_roc_auc({0.1, 0.2}, {false, false}), MetricError);
  EXPECT_THROW(compute_roc_auc({0.1}, {true, false}), MetricError);
  EXPECT_THROW(compute_roc_auc({0.1, std::nan("")}, {true, false}), MetricError);
}

// --------------------------------------------------------- state labels

TEST(StateLabels, Examples) {
  const auto cfg = EnvConfig::training(EnvId::Gridworld);
  const auto& spec = gridworld_spec(cfg.grid);
  std::vector<std::uint64_t> visits(spec.cells(), 1000);
  const auto right = ActionValue::discrete(kRight);

  // start cell: deterministic and well visited
  EXPECT_FALSE(label_state_ood(cfg, visits, spec.state_of(spec.start), right, {}));
  // slippery row: four equally likely successors, ln 4 > 0.9 ln 2
  const std::size_t slippery = spec.cell(2, 3);
  EXPECT_GT(gridworld_entropy(spec, slippery, kRight), 0.9 * std::numbers::ln2);
  EXPECT_TRUE(label_state_ood(cfg, visits, spec.state_of(slippery), right, {}));
  // never visited but deterministic
  visits[spec.cell(4, 4)] = 0;
  EXPECT_TRUE(label_state_ood(cfg, visits, spec.state_of(spec.cell(4, 4)), right, {}));
  // count threshold is strict
  visits[spec.cell(4, 4)] = 20;
  EXPECT_FALSE(label_state_ood(cfg, visits, spec.state_of(spec.cell(4, 4)), right, {}));
}

TEST(StateLabels, OnlyGridworldIsSupported) {
  const auto cp = EnvConfig::training(EnvId::CartPole);
  EXPECT_THROW(label_state_ood(cp, {}, {0, 0, 0, 0}, ActionValue::discrete(0), {}), UnsupportedError);
}

// ------------------------------------------------------------- episodes

TEST(RunEpisode, ControlArmRunsToCap) {
  const auto cfg = EnvConfig::training(EnvId::CartPole);
  const auto rec = run_episode(cartpole_policy(), ConstantDetector{}, cfg, 3);
  EXPECT_EQ(rec.label, Label::Id);
  EXPECT_EQ(rec.length, rec.scores.size());
  EXPECT_EQ(rec.length, rec.verdicts.size());
  EXPECT_FALSE(rec.first_detection.has_value());
  EXPECT_TRUE(rec.terminated || rec.length == cfg.max_steps);
  EXPECT_TRUE(rec.altered.empty());
}

TEST(RunEpisode, AlteredGravityIsEnvParam) {
  const auto cfg = make_altered_config(EnvConfig::training(EnvId::CartPole), {{"gravity", 30.0}});
  const auto rec = run_episode(cartpole_policy(), ConstantDetector{}, cfg, 3);
  EXPECT_EQ(rec.label, Label::EnvParam);
  EXPECT_EQ(rec.altered.at("gravity"), 30.0);
  EXPECT_EQ(rec.config_checksum, cfg.checksum());

  auto perturbed = EnvConfig::training(EnvId::CartPole);
  perturbed.perturbation.flip_prob = 0.3;
  EXPECT_EQ(run_episode(cartpole_policy(), ConstantDetector{}, perturbed, 3).label, Label::EnvPerturb);
}

TEST(RunEpisode, SameSeedSameRecord) {
  const auto& g = grid_detector();
  const CotdDetector det(g.ensemble, g.calibration, {});
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto a = run_episode(g.policy, det, g.config, seed);
    const auto b = run_episode(g.policy, det, g.config, seed);
    EXPECT_EQ(a.scores, b.scores);
    EXPECT_EQ(a.verdicts, b.verdicts);
    EXPECT_EQ(a.first_detection, b.first_detection);
    EXPECT_EQ(a.length, b.length);
  }
}

TEST(RunEpisode, EndsAtFirstDetection) {
  const auto cfg = EnvConfig::training(EnvId::CartPole);
  const auto rec = run_episode(cartpole_policy(), FlagAtStep(7), cfg, 4);
  ASSERT_TRUE(rec.first_detection.has_value());
  EXPECT_EQ(*rec.first_detection, 7u);
  EXPECT_EQ(rec.length, 8u);
  EXPECT_TRUE(rec.verdicts.back());

  EpisodeOptions keep_going;
  keep_going.early_stop = false;
  const auto full = run_episode(cartpole_policy(), FlagAtStep(7), cfg, 4, keep_going);
  EXPECT_EQ(*full.first_detection, 7u);
  EXPECT_GT(full.length, 8u);
}

TEST(RunEpisode, NoTransitionAfterFirstVerdict) {
  const auto& g = grid_detector();
  const CotdDetector det(g.ensemble, g.calibration, {});
  auto cfg = g.config;
  cfg.perturbation.flip_prob = 0.5;
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const auto rec = run_episode(g.policy, det, cfg, seed);
    for (std::size_t t = 0; t < rec.verdicts.size(); ++t)
      if (rec.verdicts[t]) {
        EXPECT_EQ(t + 1, rec.length);
        EXPECT_EQ(rec.first_detection, t);
      }
  }
}

TEST(RunEpisode, ProvenanceMismatchIsRefused) {
  const auto& g = grid_detector();
  auto other = g.ensemble;
  (*other.models[0].decoder.parameters().back())[0] += 0.5;
  EXPECT_THROW(CotdDetector(other, g.calibration, {}), IntegrityError);
}

// ---------------------------------------------------------------- suite

TEST(Suite, ScaledCountsAndMetrics) {
  auto spec = SuiteSpec::defaults(EnvConfig::training(EnvId::CartPole), 21);
  spec.scale = 0.1;
  const auto rep = run_experiment_suite(cartpole_policy(), ConstantDetector{}, spec);
  EXPECT_EQ(rep.arm_counts.at("id"), 100u);
  EXPECT_EQ(rep.arm_counts.at("env-perturb"), 50u);
  EXPECT_EQ(rep.arm_counts.at("env-param"), 50u);
  EXPECT_EQ(rep.episodes.size(), 200u);
  for (const char* m : {"overall", "env", "env-param", "env-perturb", "env-param-transition",
                        "env-perturb-transition", "false-positive-transition", "false-positive-episode"})
    EXPECT_TRUE(rep.value(m).has_value()) << m;
  // no exact state oracle outside gridworld
  EXPECT_FALSE(rep.value("state").has_value());
  EXPECT_FALSE(rep.row("state")->notice.empty());
  EXPECT_EQ(rep.row("env-param")->positives, 50u);
  EXPECT_EQ(rep.row("env-param")->negatives, 100u);

  // every parameter episode is genuinely altered
  for (const auto& e : rep.episodes)
    if (e.arm == "env-param") EXPECT_EQ(e.altered.size(), 1u);
}

TEST(Suite, ConstantDetectorIsUninformative) {
  auto spec = SuiteSpec::defaults(EnvConfig::training(EnvId::CartPole), 22);
  spec.scale = 0.05;
  const auto rep = run_experiment_suite(cartpole_policy(), ConstantDetector{}, spec);
  for (const auto& r : rep.rows)
    if (r.value && r.name.rfind("false-positive", 0) != 0) EXPECT_DOUBLE_EQ(*r.value, 0.5) << r.name;
  EXPECT_EQ(*rep.value("false-positive-transition"), 0.0);
}

TEST(Suite, OracleDetectorIsPerfect) {
  const auto& g = grid_detector();
  auto spec = SuiteSpec::defaults(g.config, 23);
  spec.scale = 0.05;
  spec.episode.visits = g.ensemble.visits;
  const auto rep = run_experiment_suite(g.policy, OracleDetector{}, spec);
  ASSERT_TRUE(rep.value("state").has_value());
  for (const auto& r : rep.rows)
    if (r.value && r.name.rfind("false-positive", 0) != 0) EXPECT_DOUBLE_EQ(*r.value, 1.0) << r.name;
  // gridworld has no physical parameters to alter
  EXPECT_EQ(rep.arm_counts.at("env-param"), 0u);
  EXPECT_FALSE(rep.row("env-param")->notice.empty());

  auto cp = SuiteSpec::defaults(EnvConfig::training(EnvId::CartPole), 24);
  cp.scale = 0.05;
  const auto cp_rep = run_experiment_suite(cartpole_policy(), OracleDetector{}, cp);
  for (const char* m : {"overall", "env", "env-param", "env-perturb"}) EXPECT_DOUBLE_EQ(*cp_rep.value(m), 1.0) << m;
}

TEST(Suite, ParamDrawsRespectRangeAndDeadZone) {
  const auto base = EnvConfig::training(EnvId::Pendulum);
  Rng rng(3);
  for (int i = 0; i < 500; ++i) {
    const auto cfg = draw_param_alteration(base, 0.02, rng);
    int changed = 0;
    for (const auto& p : param_table(base.id)) {
      const double v = cfg.param(p.name);
      if (v == p.training) continue;
      ++changed;
      EXPECT_GE(v, p.lo);
      EXPECT_LE(v, p.hi);
      EXPECT_GT(std::abs(v - p.training), 0.02 * std::abs(p.training));
    }
    EXPECT_EQ(changed, 1);
  }
  Rng r2(3);
  EXPECT_THROW(draw_param_alteration(EnvConfig::training(EnvId::Gridworld), 0.02, r2), UnsupportedError);
}

TEST(Suite, ReportIsByteIdenticalAcrossRuns) {
  const auto& g = grid_detector();
  const CotdDetector det(g.ensemble, g.calibration, {});
  auto spec = SuiteSpec::defaults(g.config, 25);
  spec.scale = 0.03;
  spec.episode.visits = g.ensemble.visits;
  const auto a = run_experiment_suite(g.policy, det, spec);
  const auto b = run_experiment_suite(g.policy, det, spec);
  EXPECT_EQ(report_csv(a, "abc"), report_csv(b, "abc"));
  EXPECT_EQ(episode_trace_jsonl(a, "abc"), episode_trace_jsonl(b, "abc"));
  EXPECT_EQ(roc_gnuplot(a, "abc"), roc_gnuplot(b, "abc"));

  const auto dir = std::filesystem::temp_directory_path() / "cotd_bench_report";
  std::filesystem::remove_all(dir);
  const auto files = write_report_files(dir.string(), a, "abc");
  EXPECT_GE(files.size(), 3u);
  for (const auto& f : files) EXPECT_TRUE(std::filesystem::exists(f)) << f;
  const auto csv = report_csv(a, "abc");
  EXPECT_NE(csv.find("mode=validity"), std::string::npos);
  EXPECT_NE(csv.find("provenance=abc"), std::string::npos);
  EXPECT_NE(csv.find("metric,value,positives,negatives,notice\n"), std::string::npos);
  std::filesystem::remove_all(dir);
}

TEST(Suite, UnalteredArmRespectsConformalBound) {
  // per-transition flag rate on the unaltered arm stays within the Monte Carlo bound
  const auto cfg = EnvConfig::training(EnvId::CartPole);
  const auto& policy = cartpole_policy();
  const auto ens = train_cvae_ensemble(policy, cfg, 2, 1500, CvaeHyper{}, 31).ensemble;
  // strided calibration spreads the sample over many episodes
  const auto cal = build_calibration_set(policy, ens, cfg, 1000, 32, 25);
  const DetectorConfig dcfg{0.05, ThresholdMode::Validity, false};
  const CotdDetector det(ens, cal, dcfg);
  std::size_t n = 0, flags = 0;
  EpisodeOptions opt;
  opt.early_stop = false;
  for (std::size_t i = 0; i < 400; ++i) {
    // one transition per episode keeps the held-out sample independent
    Environment env(cfg, substream_seed(33, "held-out", i));
    Rng pick = make_rng(33, "held-out-step", i);
    const std::size_t at = pick() % 200;
    Rng unused(0);
    for (std::size_t t = 0;; ++t) {
      const auto a = select_action(policy, env.state(), ActionMode::Greedy, unused);
      const auto st = env.step(a);
      if (t == at) {
        flags += det.assess(st.prev, a, st.next, {}).is_ood;
        ++n;
        break;
      }
      if (st.done()) break;
    }
  }
  ASSERT_GT(n, 300u);
  const double rate = static_cast<double>(flags) / static_cast<double>(n);
  EXPECT_LE(rate, 0.05 + 3.0 * std::sqrt(0.05 * 0.95 / static_cast<double>(n)));
}

// ----------------------------------------------- detector comparison grid

// Four corners of uncertainty x likelihood on the slippery gridworld, with the
// ground truth taken from the exact kernel: a transition is OOD when its
// probability under the training kernel falls below delta.
TEST(Scenarios, CertaintyLikelihoodGrid) {
  const auto& g = grid_detector();
  const auto& spec = gridworld_spec(g.config.grid);
  const DetectorConfig dcfg{0.05, ThresholdMode::Validity, false};
  const CotdDetector det(g.ensemble, g.calibration, dcfg);
  Rng unused(0);
  auto greedy = [&](std::size_t cell) { return select_action(g.policy, spec.state_of(cell), ActionMode::Greedy, unused); };
  auto verdict = [&](std::size_t from, std::size_t to) {
    return det.assess(spec.state_of(from), greedy(from), spec.state_of(to), {}).is_ood;
  };
  auto prob = [&](std::size_t from, std::size_t to) {
    return gridworld_transition_probability(spec, spec.state_of(from), greedy(from), spec.state_of(to));
  };

  // a slippery cell on the greedy path
  std::size_t cell = spec.start, slippery = spec.cells();
  for (int t = 0; t < 40 && slippery == spec.cells(); ++t) {
    if (spec.high_entropy[cell]) slippery = cell;
    cell = spec.move(cell, greedy(cell).index);
  }
  ASSERT_LT(slippery, spec.cells());
  ASSERT_GE(g.ensemble.visits[slippery], 20u);
  const std::size_t far_corner = spec.cell(spec.rows - 1, spec.cols - 1);

  // D: certain state, likely successor
  const std::size_t expected = spec.move(spec.start, greedy(spec.start).index);
  EXPECT_EQ(prob(spec.start, expected), 1.0);
  EXPECT_FALSE(verdict(spec.start, expected));
  // C: certain state, impossible successor
  EXPECT_EQ(prob(spec.start, spec.goal), 0.0);
  EXPECT_TRUE(verdict(spec.start, spec.goal));
  // B: uncertain state, possible successor (one of four)
  const std::size_t slip_to = spec.move(slippery, kLeft);
  EXPECT_DOUBLE_EQ(prob(slippery, slip_to), 0.25);
  EXPECT_FALSE(verdict(slippery, slip_to));
  // A: uncertain state, impossible successor
  ASSERT_NE(slippery / spec.cols, far_corner / spec.cols);
  EXPECT_EQ(prob(slippery, far_corner), 0.0);
  EXPECT_TRUE(verdict(slippery, far_corner));
}

// ----------------------------------------------------------------- PEDM

namespace {

DynamicsEnsemble zero_dynamics(std::size_t d, int arity, std::size_t k) {
  DynamicsEnsemble dyn;
  dyn.space = {true, arity, 0.0, 0.0};
  dyn.env = EnvId::Gridworld;
  dyn.state_norm = Normalizer::identity(d);
  dyn.delta_norm = Normalizer::identity(d);
  for (std::size_t i = 0; i < k; ++i)
    dyn.models.push_back(Mlp::zeros({d + static_cast<std::size_t>(arity), 3, 2 * d},
                                    {Activation::Tanh, Activation::Identity}));
  return dyn;
}

// output bias = (mean ++ logvar), all weights zero
void set_output(Mlp& m, const std::vector<double>& mean, const std::vector<double>& logvar) {
  auto ps = m.parameters();
  Tensor& bias = *ps.back();
  for (std::size_t i = 0; i < mean.size(); ++i) {
    bias[i] = mean[i];
    bias[mean.size() + i] = logvar[i];
  }
}

}  // namespace

TEST(Pedm, GaussianNllClosedForm) {
  const double half_ln2pi = 0.5 * std::log(2.0 * std::numbers::pi);
  EXPECT_NEAR(gaussian_nll({0.0}, {0.0}, {0.0}), half_ln2pi, 1e-12);
  EXPECT_NEAR(gaussian_nll({0.0}, {0.0}, {0.0}), 0.9189, 1e-4);
  EXPECT_NEAR(gaussian_nll({1.0}, {0.0}, {0.0}), 1.4189, 1e-4);
  EXPECT_NEAR(gaussian_nll({1.0}, {0.0}, {0.0}) - gaussian_nll({0.0}, {0.0}, {0.0}), 0.5, 1e-12);
  EXPECT_THROW(gaussian_nll({1.0, 2.0}, {0.0}, {0.0}), ContractError);
}

TEST(Pedm, ZeroResidualAtFloorGivesConstant) {
  auto dyn = zero_dynamics(2, 4, 1);
  const StateVector s1{0.2, 0.4}, s2{0.4, 0.4};
  set_output(dyn.models[0], {0.2, 0.0}, {-30.0, -30.0});  // clamped to the floor
  const double expected = 0.5 * 2 * (-10.0 + std::log(2.0 * std::numbers::pi));
  EXPECT_NEAR(pedm_score(dyn, s1, ActionValue::discrete(1), s2), expected, 1e-9);
  EXPECT_NEAR(pedm_nll_floor(2), expected, 1e-12);
  EXPECT_NEAR(pedm_nonconformity(dyn, s1, ActionValue::discrete(1), s2)[0], 0.0, 1e-9);
}

TEST(Pedm, EnsembleMeanAndSingleMember) {
  auto dyn = zero_dynamics(1, 2, 2);
  set_output(dyn.models[0], {0.0}, {0.0});
  set_output(dyn.models[1], {1.0}, {0.0});
  const StateVector s1{0.0}, s2{0.0};
  const auto a = ActionValue::discrete(0);
  const auto members = pedm_member_scores(dyn, s1, a, s2);
  EXPECT_NEAR(members[0], 0.9189, 1e-4);
  EXPECT_NEAR(members[1], 1.4189, 1e-4);
  EXPECT_NEAR(pedm_score(dyn, s1, a, s2), 0.5 * (members[0] + members[1]), 1e-12);
  dyn.models.pop_back();
  EXPECT_EQ(pedm_score(dyn, s1, a, s2), members[0]);
}

TEST(Pedm, DimMismatchIsContractError) {
  auto dyn = zero_dynamics(2, 4, 1);
  EXPECT_THROW(pedm_score(dyn, {0.0, 0.0, 0.0}, ActionValue::discrete(0), {0.0, 0.0, 0.0}), ContractError);
  EXPECT_THROW(pedm_score(dyn, {0.0, 0.0}, ActionValue::discrete(0), {0.0}), ContractError);
  EXPECT_THROW(pedm_score(dyn, {0.0, 0.0}, ActionValue::discrete(7), {0.0, 0.0}), ContractError);
}

TEST(Pedm, TrainingOnDeterministicGrid) {
  const auto cfg = deterministic_grid();
  const auto policy = train_agent(cfg, default_agent_hyper(EnvId::Gridworld), 3).policy;
  const auto res = train_dynamics_ensemble(policy, cfg, 5, 1500, DynamicsHyper{}, 8);
  std::set<std::uint64_t> sums;
  for (const auto& m : res.model.models) {
    sums.insert(m.checksum());
    EXPECT_EQ(m.out_dim(), 2 * state_dim(EnvId::Gridworld));
  }
  EXPECT_EQ(sums.size(), 5u);

  const auto& log = res.nll_log;
  ASSERT_GE(log.size(), 100u);
  const std::size_t dec = log.size() / 10;
  double first = 0.0, last = 0.0;
  for (std::size_t i = 0; i < dec; ++i) {
    first += log[i];
    last += log[log.size() - 1 - i];
  }
  EXPECT_LT(last, first);

  // determinism and round trip
  const auto again = train_dynamics_ensemble(policy, cfg, 5, 1500, DynamicsHyper{}, 8);
  EXPECT_EQ(again.model.checksum(), res.model.checksum());
  const auto back = dynamics_from_checkpoint(Checkpoint::from_bytes(dynamics_checkpoint(res.model).to_bytes()));
  EXPECT_EQ(back.checksum(), res.model.checksum());
  EXPECT_EQ(back.policy_checksum, res.model.policy_checksum);

  // calibrated detector plugs into the harness
  const auto cal = build_pedm_calibration_set(policy, res.model, cfg, 200, 9);
  EXPECT_EQ(cal.n, 5u);
  const PedmDetector det(res.model, cal, {});
  EXPECT_EQ(det.name(), "pedm");
  EXPECT_THROW(build_pedm_calibration_set(policy, res.model, cfg, 50, 9), ConfigError);
}

TEST(Pedm, NanLossIsTrainingError) {
  const auto cfg = deterministic_grid();
  const auto policy = train_agent(cfg, default_agent_hyper(EnvId::Gridworld), 3).policy;
  DynamicsHyper h;
  h.lr = std::nan("");
  EXPECT_THROW(train_dynamics_ensemble(policy, cfg, 2, 200, h, 1), TrainingError);
  EXPECT_THROW(train_dynamics_ensemble(policy, cfg, 0, 200, DynamicsHyper{}, 1), ContractError);
}
