#include "cotd/agent.hpp"

#include <gtest/gtest.h>

#include <Eigen/LU>

#include <boost/math/distributions/chi_squared.hpp>

#include <random>

using namespace cotd;

namespace {

TabularMdp random_mdp(std::uint64_t seed, std::size_t n, std::size_t m) {
  Rng rng(seed);
  TabularMdp mdp(n, m, uniform(rng, 0.5, 0.97));
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t a = 0; a < m; ++a) {
      double z = 0.0;
      for (std::size_t k = 0; k < n; ++k) z += (mdp.t(k, s, a) = uniform(rng, 0.0, 1.0));
      for (std::size_t k = 0; k < n; ++k) mdp.t(k, s, a) /= z;
      mdp.r(s, a) = uniform(rng, -1.0, 1.0);
    }
  return mdp;
}

PolicyNet fixed_logits_policy(double a, double b) {
  // zero weights, output bias carries the logits
  PolicyNet p;
  p.space = action_space(EnvId::CartPole);
  p.net = Mlp::zeros({4, 3, 2}, {Activation::Tanh, Activation::Identity});
  auto ps = p.net.parameters();
  (*ps.back())[0] = a;
  (*ps.back())[1] = b;
  p.log_std = Tensor(Shape{1, 1}, 0.0);
  return p;
}

}  // namespace

TEST(ValueIteration, AbsorbingZeroRewardIsZero) {
  TabularMdp mdp(1, 2, 0.9);
  mdp.t(0, 0, 0) = mdp.t(0, 0, 1) = 1.0;
  const auto v = value_iteration(mdp, 1e-12);
  EXPECT_EQ(v[0], 0.0);
}

TEST(ValueIteration, TwoStateChain) {
  TabularMdp mdp(2, 1, 0.9);
  mdp.t(1, 0, 0) = 1.0;
  mdp.r(0, 0) = 1.0;
  mdp.t(1, 1, 0) = 1.0;
  const auto v = value_iteration(mdp, 1e-12);
  EXPECT_NEAR(v[0], 1.0, 1e-12);
  EXPECT_NEAR(v[1], 0.0, 1e-12);
}

TEST(ValueIteration, GeometricSeries) {
  TabularMdp mdp(1, 1, 0.5);
  mdp.t(0, 0, 0) = 1.0;
  mdp.r(0, 0) = 1.0;
  const auto v = value_iteration(mdp, 1e-12);
  EXPECT_NEAR(v[0], 1.0 / (1.0 - 0.5), 1e-11);
}

TEST(ValueIteration, RejectsNonStochasticRows) {
  TabularMdp mdp(2, 1, 0.9);
  mdp.t(0, 0, 0) = 0.7;
  mdp.t(1, 1, 0) = 1.0;
  EXPECT_THROW(value_iteration(mdp, 1e-8), ContractError);
  TabularMdp bad_gamma(1, 1, 1.0);
  bad_gamma.t(0, 0, 0) = 1.0;
  EXPECT_THROW(value_iteration(bad_gamma, 1e-8), ContractError);
}

TEST(ValueIteration, FixedPointOnRandomMdps) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto mdp = random_mdp(seed, 3 + seed % 7, 2 + seed % 3);
    const auto v = value_iteration(mdp, 1e-8);
    EXPECT_LE(bellman_residual(mdp, v), 1e-8) << "seed " << seed;
    // Independent check: the optimal values dominate any deterministic policy.
    std::vector<int> pi(mdp.n_states, 0);
    const auto vpi = policy_evaluation(mdp, pi, 1e-12);
    for (std::size_t s = 0; s < mdp.n_states; ++s) EXPECT_GE(v[s] + 1e-7, vpi[s]);
  }
}

TEST(ValueIteration, MatchesExhaustivePolicySearch) {
  // Small MDPs: V* equals the best of all m^n deterministic policies, each
  // solved exactly as (I - gamma P) v = r.
  for (std::uint64_t seed = 100; seed < 110; ++seed) {
    const auto mdp = random_mdp(seed, 3, 2);
    const auto v = value_iteration(mdp, 1e-12);
    std::vector<double> best(3, -1e300);
    for (int code = 0; code < 8; ++code) {
      Eigen::Matrix3d a = Eigen::Matrix3d::Identity();
      Eigen::Vector3d r;
      for (std::size_t s = 0; s < 3; ++s) {
        const std::size_t act = (static_cast<unsigned>(code) >> s) & 1u;
        r(static_cast<Eigen::Index>(s)) = mdp.r(s, act);
        for (std::size_t k = 0; k < 3; ++k)
          a(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(k)) -= mdp.gamma * mdp.t(k, s, act);
      }
      const Eigen::Vector3d vp = a.lu().solve(r);
      for (std::size_t s = 0; s < 3; ++s) best[s] = std::max(best[s], vp(static_cast<Eigen::Index>(s)));
    }
    for (std::size_t s = 0; s < 3; ++s) EXPECT_NEAR(v[s], best[s], 1e-9);
  }
}

TEST(SelectAction, GreedyArgmax) {
  const auto p = fixed_logits_policy(5.0, -5.0);
  Rng rng(1);
  EXPECT_EQ(select_action(p, {0.1, 0.2, 0.3, 0.4}, ActionMode::Greedy, rng).index, 0);
}

TEST(SelectAction, UniformLogitsSampleEvenly) {
  const auto p = fixed_logits_policy(0.0, 0.0);
  Rng rng(7);
  int ones = 0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) ones += select_action(p, {0, 0, 0, 0}, ActionMode::Sample, rng).index;
  const double f = static_cast<double>(ones) / n;
  EXPECT_GE(f, 0.47);
  EXPECT_LE(f, 0.53);
}

TEST(SelectAction, SoftmaxFrequenciesPassChiSquare) {
  PolicyNet p;
  p.space = {true, 3, 0, 2};
  p.net = Mlp::zeros({2, 3}, {Activation::Identity});
  auto ps = p.net.parameters();
  const double logits[3] = {0.5, -1.0, 1.2};
  for (int i = 0; i < 3; ++i) (*ps.back())[static_cast<std::size_t>(i)] = logits[i];
  double z = 0.0;
  for (double l : logits) z += std::exp(l);
  Rng rng(99);
  std::array<int, 3> counts{};
  const int n = 10000;
  for (int i = 0; i < n; ++i) ++counts[static_cast<std::size_t>(select_action(p, {0, 0}, ActionMode::Sample, rng).index)];
  double chi2 = 0.0;
  for (int i = 0; i < 3; ++i) {
    const double expected = n * std::exp(logits[i]) / z;
    chi2 += (counts[static_cast<std::size_t>(i)] - expected) * (counts[static_cast<std::size_t>(i)] - expected) / expected;
  }
  const double crit = boost::math::quantile(boost::math::chi_squared(2.0), 0.99);
  EXPECT_LT(chi2, crit);
}

TEST(SelectAction, ContinuousGreedyIsMeanAndSamplesClip) {
  PolicyNet p;
  p.space = action_space(EnvId::Pendulum);
  p.net = Mlp::zeros({3, 1}, {Activation::Identity});
  (*p.net.parameters().back())[0] = 0.3;
  p.log_std = Tensor(Shape{1, 1}, 2.0);
  Rng rng(3);
  EXPECT_DOUBLE_EQ(select_action(p, {1, 0, 0}, ActionMode::Greedy, rng).value, 0.3);
  for (int i = 0; i < 1000; ++i) {
    const double a = select_action(p, {1, 0, 0}, ActionMode::Sample, rng).value;
    EXPECT_GE(a, p.space.lo);
    EXPECT_LE(a, p.space.hi);
  }
  // log-std is clamped at its upper bound
  p.log_std[0] = 50.0;
  EXPECT_DOUBLE_EQ(p.clamped_log_std(), kLogStdMax);
}

namespace {

TrajectoryBatch tiny_batch(bool discrete, std::uint64_t seed, std::size_t n) {
  Rng rng(seed);
  TrajectoryBatch b;
  for (std::size_t i = 0; i < n; ++i) {
    b.states.push_back({uniform(rng, -1, 1), uniform(rng, -1, 1)});
    b.actions.push_back(discrete ? ActionValue::discrete(static_cast<int>(i % 2))
                                 : ActionValue::continuous(uniform(rng, -2, 2)));
    b.rewards.push_back(1.0);
    b.next_states.push_back(b.states.back());
    b.dones.push_back(false);
    b.returns.push_back(uniform(rng, -1, 1));
    b.advantages.push_back(uniform(rng, -1, 1));
  }
  return b;
}

PolicyNet tiny_policy(bool discrete, std::uint64_t seed) {
  ActionSpace sp = discrete ? ActionSpace{true, 2, 0, 1} : action_space(EnvId::Pendulum);
  auto p = PolicyNet::make(2, sp, {4}, seed);
  p.log_std[0] = -0.3;
  return p;
}

}  // namespace

TEST(A2cUpdate, ZeroAdvantageLeavesPolicyBitIdentical) {
  for (bool discrete : {true, false}) {
    auto batch = tiny_batch(discrete, 1, 6);
    std::fill(batch.advantages.begin(), batch.advantages.end(), 0.0);
    auto policy = tiny_policy(discrete, 2);
    auto value = ValueNet::make(2, {4}, 3);
    AgentHyper h;
    h.entropy_coef = 0.0;
    A2cOptimizers opt{AdamState(policy.parameters(), AdamHyper{h.lr}), AdamState(value.net.parameters(), AdamHyper{h.lr})};
    const auto before = policy.checksum();
    const auto vbefore = value.net.checksum();
    a2c_update(batch, policy, value, opt, h);
    EXPECT_EQ(policy.checksum(), before);
    EXPECT_NE(value.net.checksum(), vbefore);
  }
}

TEST(A2cUpdate, EntropyAloneMovesPolicy) {
  auto batch = tiny_batch(true, 1, 6);
  std::fill(batch.advantages.begin(), batch.advantages.end(), 0.0);
  auto policy = tiny_policy(true, 2);
  auto value = ValueNet::make(2, {4}, 3);
  AgentHyper h;
  A2cOptimizers opt{AdamState(policy.parameters(), AdamHyper{h.lr}), AdamState(value.net.parameters(), AdamHyper{h.lr})};
  const auto before = policy.checksum();
  a2c_update(batch, policy, value, opt, h);
  EXPECT_NE(policy.checksum(), before);
}

TEST(A2cUpdate, ValueStepMovesTowardReturn) {
  for (double target : {-3.0, 0.2, 5.0}) {
    TrajectoryBatch b = tiny_batch(true, 5, 1);
    auto policy = tiny_policy(true, 6);
    auto value = ValueNet::make(2, {4}, 7);
    b.returns[0] = target;
    b.advantages[0] = 0.0;
    AgentHyper h;
    h.entropy_coef = 0.0;
    A2cOptimizers opt{AdamState(policy.parameters(), AdamHyper{h.lr}), AdamState(value.net.parameters(), AdamHyper{1e-3})};
    const double v0 = value(b.states[0]);
    a2c_update(b, policy, value, opt, h);
    const double v1 = value(b.states[0]);
    EXPECT_LT(std::abs(v1 - target), std::abs(v0 - target));
  }
}

TEST(A2cUpdate, LossGradientMatchesFiniteDifferences) {
  for (bool discrete : {true, false}) {
    const auto batch = tiny_batch(discrete, 11, 5);
    auto policy = tiny_policy(discrete, 12);
    auto value = ValueNet::make(2, {4}, 13);
    AgentHyper h;
    auto loss_at = [&]() {
      Graph g;
      std::vector<Var> pv;
      for (const auto* p : policy.parameters()) pv.push_back(g.parameter(*p));
      const auto vv = value.net.bind(g);
      return a2c_loss(g, batch, policy, value, pv, vv, h).value().item();
    };
    Graph g;
    std::vector<Var> pv;
    for (const auto* p : policy.parameters()) pv.push_back(g.parameter(*p));
    const auto vv = value.net.bind(g);
    g.backward(a2c_loss(g, batch, policy, value, pv, vv, h));
    std::vector<Tensor*> params = policy.parameters();
    std::vector<Tensor> grads = collect_grads(pv);
    for (auto* p : value.net.parameters()) params.push_back(p);
    for (auto& t : collect_grads(vv)) grads.push_back(t);
    for (std::size_t k = 0; k < params.size(); ++k)
      for (std::size_t i = 0; i < params[k]->size(); ++i) {
        const double x = (*params[k])[i];
        const double eps = 1e-6;
        (*params[k])[i] = x + eps;
        const double up = loss_at();
        (*params[k])[i] = x - eps;
        const double dn = loss_at();
        (*params[k])[i] = x;
        const double fd = (up - dn) / (2 * eps);
        const double an = grads[k][i];
        EXPECT_LT(std::abs(fd - an), 1e-4 * std::max(1.0, std::abs(fd)))
            << (discrete ? "discrete" : "continuous") << " param " << k << "[" << i << "]";
      }
  }
}

TEST(A2cUpdate, EmptyBatchRejected) {
  auto policy = tiny_policy(true, 1);
  auto value = ValueNet::make(2, {4}, 1);
  A2cOptimizers opt{AdamState(policy.parameters(), AdamHyper{}), AdamState(value.net.parameters(), AdamHyper{})};
  EXPECT_THROW(a2c_update(TrajectoryBatch{}, policy, value, opt, AgentHyper{}), ContractError);
}

TEST(A2cUpdate, NonFiniteLossIsTrainingError) {
  auto batch = tiny_batch(true, 1, 3);
  batch.returns[1] = std::numeric_limits<double>::quiet_NaN();
  auto policy = tiny_policy(true, 1);
  auto value = ValueNet::make(2, {4}, 1);
  A2cOptimizers opt{AdamState(policy.parameters(), AdamHyper{}), AdamState(value.net.parameters(), AdamHyper{})};
  try {
    a2c_update(batch, policy, value, opt, AgentHyper{}, 17);
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("17"), std::string::npos);
  }
}

TEST(GridworldMdp, OptimalStartValueMatchesShortestPathBound) {
  const auto& spec = gridworld_spec(GridworldLayout{});
  const auto mdp = gridworld_mdp(spec, 0.99);
  const auto v = value_iteration(mdp, 1e-10);
  EXPECT_EQ(v[spec.goal], 0.0);
  // Deterministic cells adjacent to the goal: one step to +1.
  EXPECT_NEAR(v[spec.cell(0, 4)], 1.0, 1e-9);
  EXPECT_NEAR(v[spec.cell(1, 5)], 1.0, 1e-9);
  EXPECT_GT(v[spec.start], 0.0);
  EXPECT_LT(v[spec.start], 1.0);
}

TEST(TrainAgent, GridworldReachesNearOptimalAndIsDeterministic) {
  auto cfg = EnvConfig::training(EnvId::Gridworld);
  auto h = default_agent_hyper(EnvId::Gridworld);
  const auto a = train_agent(cfg, h, 42);
  EXPECT_TRUE(a.criterion_met) << a.status << " score " << a.final_score;

  const auto& spec = gridworld_spec(cfg.grid);
  const auto mdp = gridworld_mdp(spec, h.gamma);
  const auto vstar = value_iteration(mdp, 1e-10);
  const auto vpi = policy_evaluation(mdp, greedy_grid_policy(a.policy, spec), 1e-10);
  EXPECT_GE(vpi[spec.start], 0.9 * vstar[spec.start]);

  const auto b = train_agent(cfg, h, 42);
  ASSERT_EQ(a.curve.size(), b.curve.size());
  for (std::size_t i = 0; i < a.curve.size(); ++i) {
    EXPECT_EQ(a.curve[i].step, b.curve[i].step);
    EXPECT_EQ(a.curve[i].episode_return, b.curve[i].episode_return);
  }
  EXPECT_EQ(a.policy.checksum(), b.policy.checksum());
}

TEST(TrainAgent, RejectsAlteredConfig) {
  auto cfg = make_altered_config(EnvConfig::training(EnvId::CartPole), {{"gravity", 20.0}});
  EXPECT_THROW(train_agent(cfg, default_agent_hyper(EnvId::CartPole), 1), ContractError);
}

TEST(PolicyCheckpoint, RoundTrip) {
  auto policy = PolicyNet::make(3, action_space(EnvId::Pendulum), {8, 8}, 5);
  policy.log_std[0] = -0.7;
  auto value = ValueNet::make(3, {8, 8}, 6);
  const auto c = policy_checkpoint(policy, value, EnvConfig::training(EnvId::Pendulum), 5, "trained");
  const auto back = Checkpoint::from_bytes(c.to_bytes());
  auto [p2, v2] = policy_from_checkpoint(back);
  EXPECT_EQ(p2.checksum(), policy.checksum());
  EXPECT_EQ(v2.net.checksum(), value.net.checksum());
  EXPECT_FALSE(p2.space.discrete);
}
