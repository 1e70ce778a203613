#pragma once

// Advantage actor-critic agent and a tabular value-iteration oracle.

#include "cotd/autodiff.hpp"
#include "cotd/checkpoint.hpp"
#include "cotd/envs.hpp"
#include "cotd/nn.hpp"
#include "cotd/optim.hpp"

#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

namespace cotd {

// ------------------------------------------------------------ tabular MDP

/// Finite MDP (S, A, T, R, gamma). Transition probabilities are stored as
/// probs[(s * m + a) * n + s'].
struct TabularMdp {
  std::size_t n_states = 0;
  std::size_t n_actions = 0;
  std::vector<double> probs;
  std::vector<double> reward;  // reward[s * m + a], expected immediate reward
  double gamma = 0.9;

  TabularMdp() = default;
  TabularMdp(std::size_t n, std::size_t m, double g)
      : n_states(n), n_actions(m), probs(n * m * n, 0.0), reward(n * m, 0.0), gamma(g) {}

  /// T[s', s, a]
  double& t(std::size_t next, std::size_t s, std::size_t a) { return probs[(s * n_actions + a) * n_states + next]; }
  double t(std::size_t next, std::size_t s, std::size_t a) const {
    return probs[(s * n_actions + a) * n_states + next];
  }
  double& r(std::size_t s, std::size_t a) { return reward[s * n_actions + a]; }
  double r(std::size_t s, std::size_t a) const { return reward[s * n_actions + a]; }

  void validate() const {
    if (!(gamma > 0.0 && gamma < 1.0)) throw ContractError("tabular mdp: gamma must lie strictly inside (0, 1)");
    if (probs.size() != n_states * n_actions * n_states || reward.size() != n_states * n_actions)
      throw DimensionError("tabular mdp: table sizes do not match (n, m)");
    for (std::size_t s = 0; s < n_states; ++s)
      for (std::size_t a = 0; a < n_actions; ++a) {
        double sum = 0.0;
        for (std::size_t k = 0; k < n_states; ++k) {
          const double p = t(k, s, a);
          if (p < 0.0 || p > 1.0) throw ContractError("tabular mdp: probability outside [0, 1]");
          sum += p;
        }
        if (std::abs(sum - 1.0) > 1e-9)
          throw ContractError("tabular mdp: transition row (" + std::to_string(s) + ", " + std::to_string(a) +
                              ") sums to " + format_double(sum));
      }
  }

  /// R(s,a) + gamma * sum_s' T(s'|s,a) V(s')
  double q(const std::vector<double>& v, std::size_t s, std::size_t a) const {
    double acc = 0.0;
    const double* row = &probs[(s * n_actions + a) * n_states];
    for (std::size_t k = 0; k < n_states; ++k) acc += row[k] * v[k];
    return r(s, a) + gamma * acc;
  }
};

/// max_s |max_a Q(s,a) - V(s)|
inline double bellman_residual(const TabularMdp& mdp, const std::vector<double>& v) {
  double worst = 0.0;
  for (std::size_t s = 0; s < mdp.n_states; ++s) {
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < mdp.n_actions; ++a) best = std::max(best, mdp.q(v, s, a));
    worst = std::max(worst, std::abs(best - v[s]));
  }
  return worst;
}

/// Optimal state values. The returned table satisfies bellman_residual <= tol.
inline std::vector<double> value_iteration(const TabularMdp& mdp, double tol, std::size_t max_iters = 1'000'000) {
  mdp.validate();
  std::vector<double> v(mdp.n_states, 0.0), next(mdp.n_states);
  for (std::size_t it = 0; it < max_iters; ++it) {
    double delta = 0.0;
    for (std::size_t s = 0; s < mdp.n_states; ++s) {
      double best = -std::numeric_limits<double>::infinity();
      for (std::size_t a = 0; a < mdp.n_actions; ++a) best = std::max(best, mdp.q(v, s, a));
      next[s] = best;
      delta = std::max(delta, std::abs(best - v[s]));
    }
    v.swap(next);
    // residual(v_{k+1}) <= gamma * ||v_{k+1} - v_k||
    if (mdp.gamma * delta <= tol) return v;
  }
  throw TrainingError("value_iteration: no convergence within iteration budget");
}

/// Values of a fixed deterministic policy (iterative evaluation).
inline std::vector<double> policy_evaluation(const TabularMdp& mdp, const std::vector<int>& policy, double tol) {
  mdp.validate();
  if (policy.size() != mdp.n_states) throw DimensionError("policy_evaluation: one action per state required");
  std::vector<double> v(mdp.n_states, 0.0);
  for (std::size_t it = 0; it < 1'000'000; ++it) {
    double delta = 0.0;
    for (std::size_t s = 0; s < mdp.n_states; ++s) {
      const double nv = mdp.q(v, s, static_cast<std::size_t>(policy[s]));
      delta = std::max(delta, std::abs(nv - v[s]));
      v[s] = nv;
    }
    if (delta <= tol) return v;
  }
  throw TrainingError("policy_evaluation: no convergence");
}

/// Gridworld as a tabular MDP; the goal is absorbing with zero reward.
inline TabularMdp gridworld_mdp(const GridworldSpec& spec, double gamma) {
  TabularMdp mdp(spec.cells(), 4, gamma);
  for (std::size_t s = 0; s < spec.cells(); ++s)
    for (std::size_t a = 0; a < 4; ++a) {
      double er = 0.0;
      for (std::size_t k = 0; k < spec.cells(); ++k) {
        const double p = spec.kernel[s][a][k];
        mdp.t(k, s, a) = p;
        er += p * spec.reward[k];
      }
      mdp.r(s, a) = spec.terminal[s] ? 0.0 : er;
    }
  return mdp;
}

// -------------------------------------------------------------- networks

enum class ActionMode { Sample, Greedy };

inline constexpr double kLogStdMin = -5.0;
inline constexpr double kLogStdMax = 2.0;

/// Maps states to action logits (discrete) or a Gaussian mean with a learned,
/// state-independent log standard deviation (continuous).
struct PolicyNet {
  Mlp net;
  Tensor log_std;  // [1, 1]; unused for discrete spaces
  ActionSpace space;

  static PolicyNet make(std::size_t state_dim, ActionSpace space, const std::vector<std::size_t>& hidden,
                        std::uint64_t seed) {
    PolicyNet p;
    p.space = space;
    std::vector<std::size_t> dims{state_dim};
    std::vector<Activation> acts;
    for (auto h : hidden) {
      dims.push_back(h);
      acts.push_back(Activation::Tanh);
    }
    dims.push_back(space.discrete ? static_cast<std::size_t>(space.arity) : 1);
    acts.push_back(Activation::Identity);
    p.net = Mlp::xavier(dims, acts, seed);
    p.log_std = Tensor(Shape{1, 1}, 0.0);
    return p;
  }

  std::vector<Tensor*> parameters() {
    auto ps = net.parameters();
    if (!space.discrete) ps.push_back(&log_std);
    return ps;
  }
  std::vector<const Tensor*> parameters() const {
    auto ps = net.parameters();
    if (!space.discrete) ps.push_back(&log_std);
    return ps;
  }

  double clamped_log_std() const { return std::clamp(log_std[0], kLogStdMin, kLogStdMax); }

  std::uint64_t checksum() const {
    Fnv1a h;
    for (const auto* p : parameters()) h.f64s(p->data());
    return h.value();
  }
};

struct ValueNet {
  Mlp net;

  static ValueNet make(std::size_t state_dim, const std::vector<std::size_t>& hidden, std::uint64_t seed) {
    std::vector<std::size_t> dims{state_dim};
    std::vector<Activation> acts;
    for (auto h : hidden) {
      dims.push_back(h);
      acts.push_back(Activation::Tanh);
    }
    dims.push_back(1);
    acts.push_back(Activation::Identity);
    return {Mlp::xavier(dims, acts, seed)};
  }

  double operator()(const StateVector& s) const { return net.forward(Tensor::row(s)).item(); }
};

/// Greedy: argmax logits / clipped Gaussian mean. Sample: softmax or Gaussian
/// draw, clipped to the action bounds.
inline ActionValue select_action(const PolicyNet& policy, const StateVector& state, ActionMode mode, Rng& rng) {
  const Tensor out = policy.net.forward(Tensor::row(state));
  if (policy.space.discrete) {
    const std::size_t n = out.size();
    if (mode == ActionMode::Greedy) {
      std::size_t best = 0;
      for (std::size_t i = 1; i < n; ++i)
        if (out[i] > out[best]) best = i;
      return ActionValue::discrete(static_cast<int>(best));
    }
    double mx = out[0];
    for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, out[i]);
    std::vector<double> p(n);
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i) z += (p[i] = std::exp(out[i] - mx));
    double u = uniform(rng, 0.0, z);
    for (std::size_t i = 0; i < n; ++i) {
      if (u < p[i]) return ActionValue::discrete(static_cast<int>(i));
      u -= p[i];
    }
    return ActionValue::discrete(static_cast<int>(n - 1));
  }
  double a = out[0];
  if (mode == ActionMode::Sample) a += std::exp(policy.clamped_log_std()) * normal(rng);
  return ActionValue::continuous(std::clamp(a, policy.space.lo, policy.space.hi));
}

// ------------------------------------------------------------------ A2C

struct AgentHyper {
  std::vector<std::size_t> hidden{64, 64};
  double lr = 3e-4;
  double gamma = 0.99;
  int n_steps = 5;
  double value_coef = 0.5;
  double entropy_coef = 0.01;
  int num_envs = 8;
  double reward_scale = 1.0;
  long total_steps = 300'000;
  long eval_interval = 10'000;
  int eval_episodes = 20;
  double clip_norm = kGradClipNorm;
};

/// Per-environment defaults for the training budget and reward scale.
inline AgentHyper default_agent_hyper(EnvId id) {
  AgentHyper h;
  switch (id) {
    case EnvId::CartPole: h.total_steps = 300'000; h.eval_interval = 10'000; break;
    case EnvId::Pendulum: h.total_steps = 200'000; h.eval_interval = 20'000; h.reward_scale = 0.1; break;
    case EnvId::Gridworld: h.total_steps = 100'000; h.eval_interval = 5'000; break;
  }
  return h;
}

/// Rollout segment. Row i of each field belongs to the same transition.
struct TrajectoryBatch {
  std::vector<StateVector> states;
  std::vector<ActionValue> actions;
  std::vector<double> rewards;
  std::vector<StateVector> next_states;
  std::vector<bool> dones;
  std::vector<double> returns;     // n-step bootstrapped
  std::vector<double> advantages;  // returns - V(s) from the values stored at rollout time

  std::size_t size() const { return states.size(); }
};

struct A2cOptimizers {
  AdamState policy;
  AdamState value;
};

struct A2cLossParts {
  double total = 0.0;
  double policy = 0.0;
  double value = 0.0;
  double entropy = 0.0;
};

/// Builds the A2C loss on `g`. `policy_vars` / `value_vars` must come from
/// binding the nets (policy: net params then log-std for continuous spaces).
inline Var a2c_loss(Graph& g, const TrajectoryBatch& batch, const PolicyNet& policy, const ValueNet& value,
                    std::span<const Var> policy_vars, std::span<const Var> value_vars, const AgentHyper& hyper,
                    A2cLossParts* parts = nullptr) {
  const std::size_t B = batch.size();
  Var states = g.constant(stack_rows(batch.states));
  Var adv = g.constant(Tensor(Shape{B, 1}, batch.advantages));
  Var ret = g.constant(Tensor(Shape{B, 1}, batch.returns));

  const std::size_t n_net = policy.net.parameters().size();
  Var head = policy.net.forward(policy_vars.first(n_net), states);
  Var logp, entropy;
  if (policy.space.discrete) {
    Tensor onehot(Shape{B, static_cast<std::size_t>(policy.space.arity)}, 0.0);
    for (std::size_t i = 0; i < B; ++i) onehot.at(i, static_cast<std::size_t>(batch.actions[i].index)) = 1.0;
    Var lsm = log_softmax(head);
    logp = row_sum(lsm * g.constant(std::move(onehot)));
    entropy = -row_sum(exp(lsm) * lsm);
  } else {
    Tensor act(Shape{B, 1});
    for (std::size_t i = 0; i < B; ++i) act[i] = batch.actions[i].value;
    Var log_std = clamp(policy_vars[n_net], kLogStdMin, kLogStdMax);
    Var z = (g.constant(std::move(act)) - head) * exp(-log_std);
    const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
    logp = scale(square(z), -0.5) - log_std - g.constant(Tensor::scalar(half_log_2pi));
    entropy = log_std + g.constant(Tensor::scalar(half_log_2pi + 0.5));
  }
  Var v = value.net.forward(value_vars, states);
  Var policy_loss = -mean(logp * adv);
  Var value_loss = mean(square(v - ret));
  Var entropy_mean = mean(entropy);
  Var total = policy_loss + scale(value_loss, hyper.value_coef) - scale(entropy_mean, hyper.entropy_coef);
  if (parts) {
    parts->total = total.value().item();
    parts->policy = policy_loss.value().item();
    parts->value = value_loss.value().item();
    parts->entropy = entropy_mean.value().item();
  }
  return total;
}

/// One gradient step on the A2C loss (policy gradient + c_v value loss -
/// c_e entropy). Throws TrainingError on a non-finite loss or parameter.
inline A2cLossParts a2c_update(const TrajectoryBatch& batch, PolicyNet& policy, ValueNet& value,
                               A2cOptimizers& opt, const AgentHyper& hyper, long step_index = 0) {
  if (batch.size() == 0) throw ContractError("a2c_update: empty batch");
  Graph g;
  std::vector<Var> pv;
  for (const auto* p : policy.parameters()) pv.push_back(g.parameter(*p));
  const auto vv = value.net.bind(g);
  A2cLossParts parts;
  Var loss = a2c_loss(g, batch, policy, value, pv, vv, hyper, &parts);
  if (!std::isfinite(parts.total))
    throw TrainingError("a2c_update: non-finite loss at step " + std::to_string(step_index));
  g.backward(loss);
  auto pg = collect_grads(pv);
  auto vg = collect_grads(vv);
  clip_global_norm(pg, hyper.clip_norm);
  clip_global_norm(vg, hyper.clip_norm);
  auto pp = policy.parameters();
  auto vp = value.net.parameters();
  adam_step(pp, pg, opt.policy);
  adam_step(vp, vg, opt.value);
  ensure_finite(pp, "a2c policy (step " + std::to_string(step_index) + ")");
  ensure_finite(vp, "a2c value (step " + std::to_string(step_index) + ")");
  return parts;
}

struct CurvePoint {
  long step = 0;
  double episode_return = 0.0;
};

struct AgentTrainResult {
  PolicyNet policy;
  ValueNet value;
  std::vector<CurvePoint> curve;
  bool criterion_met = false;
  double final_score = 0.0;  // last evaluation against the reward criterion
  long steps = 0;
  std::string status;  // "trained" or a warning
};

/// Mean undiscounted return of greedy rollouts on fresh seeds.
inline double evaluate_greedy(const PolicyNet& policy, const EnvConfig& config, int episodes, std::uint64_t seed) {
  double total = 0.0;
  Rng unused(0);
  for (int e = 0; e < episodes; ++e) {
    Environment env(config, substream_seed(seed, "eval", static_cast<std::uint64_t>(e)));
    double ret = 0.0;
    while (true) {
      auto s = env.step(select_action(policy, env.state(), ActionMode::Greedy, unused));
      ret += s.reward;
      if (s.done()) break;
    }
    total += ret;
  }
  return total / episodes;
}

/// Greedy action per gridworld cell.
inline std::vector<int> greedy_grid_policy(const PolicyNet& policy, const GridworldSpec& spec) {
  std::vector<int> pi(spec.cells());
  Rng unused(0);
  for (std::size_t c = 0; c < spec.cells(); ++c)
    pi[c] = select_action(policy, spec.state_of(c), ActionMode::Greedy, unused).index;
  return pi;
}

/// Reward criterion: CartPole mean greedy return >= 400 over 20 episodes,
/// Pendulum >= -300, Gridworld exact greedy value at the start cell
/// >= 0.9 x optimal value.
inline std::pair<bool, double> reward_criterion(const PolicyNet& policy, const EnvConfig& config,
                                                const AgentHyper& hyper, std::uint64_t seed) {
  switch (config.id) {
    case EnvId::CartPole: {
      const double r = evaluate_greedy(policy, config, hyper.eval_episodes, seed);
      return {r >= 400.0, r};
    }
    case EnvId::Pendulum: {
      const double r = evaluate_greedy(policy, config, hyper.eval_episodes, seed);
      return {r >= -300.0, r};
    }
    case EnvId::Gridworld: {
      const auto& spec = gridworld_spec(config.grid);
      const auto mdp = gridworld_mdp(spec, hyper.gamma);
      const auto vstar = value_iteration(mdp, 1e-10);
      const auto vpi = policy_evaluation(mdp, greedy_grid_policy(policy, spec), 1e-10);
      const double ratio = vpi[spec.start] / vstar[spec.start];
      return {ratio >= 0.9, ratio};
    }
  }
  return {false, 0.0};
}

/// Synchronous A2C over `hyper.num_envs` parallel episodes.
inline AgentTrainResult train_agent(const EnvConfig& config, const AgentHyper& hyper, std::uint64_t seed) {
  if (config.is_altered()) throw ContractError("train_agent: requires the unaltered training config");
  const std::size_t sd = state_dim(config.id);
  const auto space = action_space(config.id);
  AgentTrainResult res;
  res.policy = PolicyNet::make(sd, space, hyper.hidden, substream_seed(seed, "agent-policy-init"));
  res.value = ValueNet::make(sd, hyper.hidden, substream_seed(seed, "agent-value-init"));
  A2cOptimizers opt{AdamState(res.policy.parameters(), AdamHyper{hyper.lr}),
                    AdamState(res.value.net.parameters(), AdamHyper{hyper.lr})};

  Rng rng = make_rng(seed, "agent-actions");
  std::uint64_t episode_counter = 0;
  std::vector<Environment> envs;
  std::vector<double> ep_return(static_cast<std::size_t>(hyper.num_envs), 0.0);
  for (int i = 0; i < hyper.num_envs; ++i)
    envs.emplace_back(config, substream_seed(seed, "agent-episode", episode_counter++));

  long steps = 0, next_eval = hyper.eval_interval, updates = 0;
  while (steps < hyper.total_steps) {
    TrajectoryBatch batch;
    const std::size_t E = envs.size();
    constexpr std::size_t kCut = static_cast<std::size_t>(-1);
    std::vector<std::vector<std::size_t>> rows(E);  // batch rows per env, in time order
    for (int t = 0; t < hyper.n_steps; ++t) {
      for (std::size_t e = 0; e < E; ++e) {
        const StateVector s = envs[e].state();
        const ActionValue a = select_action(res.policy, s, ActionMode::Sample, rng);
        auto st = envs[e].step(a);
        ++steps;
        ep_return[e] += st.reward;
        rows[e].push_back(batch.size());
        batch.states.push_back(s);
        batch.actions.push_back(a);  // the policy's choice; training env is unperturbed
        batch.rewards.push_back(st.reward * hyper.reward_scale);
        batch.next_states.push_back(st.next);
        batch.dones.push_back(st.terminated);
        if (st.done()) {
          res.curve.push_back({steps, ep_return[e]});
          ep_return[e] = 0.0;
          // Truncation bootstraps from the last observed state.
          if (st.truncated) batch.dones.back() = false;
          envs[e] = Environment(config, substream_seed(seed, "agent-episode", episode_counter++));
          // the segment continues in a fresh episode; cut the return chain
          if (t + 1 < hyper.n_steps) rows[e].push_back(kCut);
        }
      }
    }
    // Values at rollout time.
    const Tensor vs = res.value.net.forward(stack_rows(batch.states));
    const Tensor vnext = res.value.net.forward(stack_rows(batch.next_states));
    batch.returns.assign(batch.size(), 0.0);
    batch.advantages.assign(batch.size(), 0.0);
    for (std::size_t e = 0; e < E; ++e) {
      double running = 0.0;
      bool open = false;
      for (auto it = rows[e].rbegin(); it != rows[e].rend(); ++it) {
        const std::size_t i = *it;
        if (i == kCut) {
          open = false;
          continue;
        }
        // The last row of a segment bootstraps from V(s') unless terminal.
        const double tail = open ? running : (batch.dones[i] ? 0.0 : vnext[i]);
        open = true;
        running = batch.rewards[i] + hyper.gamma * tail;
        batch.returns[i] = running;
        batch.advantages[i] = running - vs[i];
      }
    }
    a2c_update(batch, res.policy, res.value, opt, hyper, updates++);

    if (steps >= next_eval || steps >= hyper.total_steps) {
      next_eval += hyper.eval_interval;
      auto [met, score] = reward_criterion(res.policy, config, hyper, substream_seed(seed, "agent-eval"));
      res.final_score = score;
      if (met) {
        res.criterion_met = true;
        break;
      }
    }
  }
  res.steps = steps;
  res.status = res.criterion_met ? "trained" : "warning: reward criterion unmet within step budget";
  return res;
}

// ------------------------------------------------------------ persistence

inline Checkpoint policy_checkpoint(const PolicyNet& policy, const ValueNet& value, const EnvConfig& config,
                                    std::uint64_t seed, const std::string& status) {
  Checkpoint c;
  c.metadata["kind"] = "policy";
  c.metadata["env"] = to_string(config.id);
  c.metadata["seed"] = seed;
  c.metadata["status"] = status;
  c.metadata["discrete"] = policy.space.discrete;
  c.metadata["arity"] = policy.space.arity;
  c.metadata["action_lo"] = policy.space.lo;
  c.metadata["action_hi"] = policy.space.hi;
  c.metadata["config"] = config.to_ini();
  put_mlp(c, "policy/", policy.net);
  put_mlp(c, "value/", value.net);
  c.add("policy/log_std", policy.log_std);
  return c;
}

inline std::pair<PolicyNet, ValueNet> policy_from_checkpoint(const Checkpoint& c) {
  if (c.metadata.value("kind", "") != "policy") throw FormatError("checkpoint is not a policy");
  PolicyNet p;
  p.net = get_mlp(c, "policy/");
  p.log_std = c.get("policy/log_std");
  p.space.discrete = c.metadata.at("discrete").get<bool>();
  p.space.arity = c.metadata.at("arity").get<int>();
  p.space.lo = c.metadata.at("action_lo").get<double>();
  p.space.hi = c.metadata.at("action_hi").get<double>();
  ValueNet v{get_mlp(c, "value/")};
  return {std::move(p), std::move(v)};
}

}  // namespace cotd
