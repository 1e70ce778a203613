#pragma once

// Probabilistic ensemble dynamics baseline: K Gaussian next-state-delta
// models scored by negative log-likelihood.

#include "cotd/agent.hpp"
#include "cotd/autodiff.hpp"
#include "cotd/checkpoint.hpp"
#include "cotd/conformal.hpp"
#include "cotd/cvae.hpp"
#include "cotd/envs.hpp"
#include "cotd/nn.hpp"
#include "cotd/optim.hpp"

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

namespace cotd {

struct DynamicsHyper {
  std::vector<std::size_t> hidden{64, 64};
  double lr = 1e-3;
  std::size_t replay_capacity = 100'000;
  std::size_t batch_size = 64;
  double normalizer_fraction = 0.1;
};

/// Each member maps (s1 ++ a) to (mean ++ log-variance) of the normalized
/// state delta s2 - s1.
struct DynamicsEnsemble {
  std::vector<Mlp> models;
  std::vector<std::uint64_t> seeds;
  Normalizer state_norm;
  Normalizer delta_norm;
  ActionSpace space;
  EnvId env = EnvId::CartPole;
  std::uint64_t policy_checksum = 0;
  std::string config_ini;
  DynamicsHyper hyper;

  std::size_t size() const { return models.size(); }
  std::size_t state_dim() const { return state_norm.dim(); }
  std::size_t action_dim() const { return space.discrete ? static_cast<std::size_t>(space.arity) : 1; }

  std::uint64_t checksum() const {
    Fnv1a h;
    for (const auto& m : models) h.u64(m.checksum());
    h.f64s(state_norm.mean);
    h.f64s(state_norm.stddev);
    h.f64s(delta_norm.mean);
    h.f64s(delta_norm.stddev);
    return h.value();
  }

  /// Normalized state followed by a one-hot (discrete) or range-scaled action.
  std::vector<double> input(const StateVector& s1, const ActionValue& a) const {
    std::vector<double> in = state_norm.apply(s1);
    if (space.discrete) {
      if (!a.is_discrete() || a.index < 0 || a.index >= space.arity) throw ContractError("pedm: bad discrete action");
      for (int i = 0; i < space.arity; ++i) in.push_back(i == a.index ? 1.0 : 0.0);
    } else {
      if (a.is_discrete()) throw ContractError("pedm: expected a continuous action");
      in.push_back(a.value / std::max(std::abs(space.lo), std::abs(space.hi)));
    }
    return in;
  }

  StateVector delta(const StateVector& s1, const StateVector& s2) const {
    if (s1.size() != s2.size() || s1.size() != state_dim()) throw ContractError("pedm: state dim mismatch");
    StateVector d(s1.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = s2[i] - s1[i];
    return delta_norm.apply(d);
  }
};

/// 0.5 * sum(r^2 exp(-lv) + lv + ln 2 pi), r = target - mean.
inline double gaussian_nll(const std::vector<double>& target, const std::vector<double>& mean,
                           const std::vector<double>& logvar) {
  if (target.size() != mean.size() || mean.size() != logvar.size()) throw ContractError("gaussian_nll: dim mismatch");
  const double ln2pi = std::log(2.0 * std::numbers::pi);
  double acc = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const double r = target[i] - mean[i];
    acc += r * r * std::exp(-logvar[i]) + logvar[i] + ln2pi;
  }
  return 0.5 * acc;
}

/// Per-member NLL of the observed delta, in ensemble order.
inline std::vector<double> pedm_member_scores(const DynamicsEnsemble& dyn, const StateVector& s1,
                                              const ActionValue& a, const StateVector& s2) {
  const auto in = dyn.input(s1, a);
  const auto target = dyn.delta(s1, s2);
  const std::size_t d = dyn.state_dim();
  std::vector<double> out;
  for (const auto& m : dyn.models) {
    const Tensor y = m.forward(Tensor::row(in));
    std::vector<double> mu(d), lv(d);
    for (std::size_t i = 0; i < d; ++i) {
      mu[i] = y[i];
      lv[i] = std::clamp(y[d + i], kLogVarMin, kLogVarMax);
    }
    out.push_back(gaussian_nll(target, mu, lv));
  }
  return out;
}

/// Mean NLL over the K members; higher = more OOD.
inline double pedm_score(const DynamicsEnsemble& dyn, const StateVector& s1, const ActionValue& a,
                         const StateVector& s2) {
  return continuous_score(pedm_member_scores(dyn, s1, a, s2));
}

/// Lowest NLL any member can produce, reached at zero residual with the
/// log-variance at its floor. Subtracting it gives non-negative conformal scores.
inline double pedm_nll_floor(std::size_t state_dim) {
  return 0.5 * static_cast<double>(state_dim) * (kLogVarMin + std::log(2.0 * std::numbers::pi));
}

inline std::vector<double> pedm_nonconformity(const DynamicsEnsemble& dyn, const StateVector& s1,
                                              const ActionValue& a, const StateVector& s2) {
  auto s = pedm_member_scores(dyn, s1, a, s2);
  const double floor = pedm_nll_floor(dyn.state_dim());
  for (double& v : s) v = std::max(0.0, v - floor);
  return s;
}

struct DynamicsTrainResult {
  DynamicsEnsemble model;
  std::vector<double> nll_log;  // per gradient step, averaged over members
  std::size_t updates = 0;
};

/// Batch mean of the Gaussian NLL (without the constant) on graph `g`.
inline Var dynamics_loss(Graph& g, const Mlp& model, std::span<const Var> params, const Tensor& inputs,
                         const Tensor& targets) {
  const std::size_t d = targets.cols();
  Var y = model.forward(params, g.constant(inputs));
  Var mu = slice_cols(y, 0, d);
  Var lv = clamp(slice_cols(y, d, 2 * d), kLogVarMin, kLogVarMax);
  Var r2 = square(g.constant(targets) - mu);
  return scale(mean(row_sum(r2 * exp(-lv) + lv)), 0.5);
}

inline DynamicsTrainResult train_dynamics_ensemble(const PolicyNet& policy, const EnvConfig& config, std::size_t k,
                                                   std::size_t steps, const DynamicsHyper& hyper, std::uint64_t seed) {
  if (k == 0) throw ContractError("train_dynamics_ensemble: need at least one member");
  if (config.is_altered()) throw ContractError("train_dynamics_ensemble: requires the unaltered training config");
  const std::size_t d = state_dim(config.id);
  DynamicsTrainResult res;
  auto& dyn = res.model;
  dyn.env = config.id;
  dyn.space = action_space(config.id);
  dyn.policy_checksum = policy.checksum();
  dyn.config_ini = config.to_ini();
  dyn.hyper = hyper;
  dyn.state_norm = Normalizer::identity(d);
  dyn.delta_norm = Normalizer::identity(d);
  const std::size_t in_dim = d + dyn.action_dim();
  for (std::size_t i = 0; i < k; ++i) {
    std::vector<std::size_t> dims{in_dim};
    std::vector<Activation> acts;
    for (auto h : hyper.hidden) {
      dims.push_back(h);
      acts.push_back(Activation::Tanh);
    }
    dims.push_back(2 * d);
    acts.push_back(Activation::Identity);
    dyn.seeds.push_back(substream_seed(seed, "pedm-init", i));
    dyn.models.push_back(Mlp::xavier(dims, acts, dyn.seeds.back()));
  }

  const auto stream = collect_transitions(policy, config, steps, seed, "pedm-episode");
  const std::size_t warmup =
      std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(hyper.normalizer_fraction * double(steps))));
  std::vector<AdamState> opts;
  std::vector<Rng> rngs;
  for (std::size_t i = 0; i < k; ++i) {
    opts.emplace_back(dyn.models[i].parameters(), AdamHyper{hyper.lr});
    rngs.push_back(make_rng(seed, "pedm", i));
  }
  for (std::size_t t = 0; t < stream.size(); ++t) {
    if (t + 1 < warmup) continue;
    if (t + 1 == warmup) {
      std::vector<StateVector> states, deltas;
      for (std::size_t i = 0; i < warmup; ++i) {
        states.push_back(stream[i].s1);
        StateVector dl(d);
        for (std::size_t j = 0; j < d; ++j) dl[j] = stream[i].s2[j] - stream[i].s1[j];
        deltas.push_back(std::move(dl));
      }
      dyn.state_norm = Normalizer::fit(states, d);
      dyn.delta_norm = Normalizer::fit(deltas, d);
    }
    double nll = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t lo = t + 1 > hyper.replay_capacity ? t + 1 - hyper.replay_capacity : 0;
      const std::size_t b = std::min(hyper.batch_size, t + 1 - lo);
      std::uniform_int_distribution<std::size_t> pick(lo, t);
      Tensor inputs(Shape{b, in_dim}), targets(Shape{b, d});
      for (std::size_t r = 0; r < b; ++r) {
        const auto& tr = stream[pick(rngs[i])];
        const auto in = dyn.input(tr.s1, tr.action);
        const auto tg = dyn.delta(tr.s1, tr.s2);
        for (std::size_t j = 0; j < in_dim; ++j) inputs.at(r, j) = in[j];
        for (std::size_t j = 0; j < d; ++j) targets.at(r, j) = tg[j];
      }
      Graph g;
      const auto params = dyn.models[i].bind(g);
      Var loss = dynamics_loss(g, dyn.models[i], params, inputs, targets);
      const double lv = loss.value().item();
      const std::string who = "pedm model " + std::to_string(i);
      if (!std::isfinite(lv)) throw TrainingError(who + ": non-finite loss");
      g.backward(loss);
      auto grads = collect_grads(params);
      clip_global_norm(grads, kGradClipNorm);
      auto ps = dyn.models[i].parameters();
      adam_step(ps, grads, opts[i]);
      ensure_finite(ps, who);
      nll += lv;
    }
    res.nll_log.push_back(nll / static_cast<double>(k));
    ++res.updates;
  }
  return res;
}

inline Provenance provenance_of(const DynamicsEnsemble& dyn) { return {hash_string(dyn.config_ini), dyn.checksum()}; }

inline void verify_provenance(const CalibrationSet& cal, const DynamicsEnsemble& dyn) {
  const Provenance p = provenance_of(dyn);
  if (!(cal.provenance == p))
    throw IntegrityError("calibration set does not belong to dynamics ensemble " + hex64(p.ensemble_checksum));
}

/// Same inductive calibration as the CVAE detector, over shifted member NLLs.
inline CalibrationSet build_pedm_calibration_set(const PolicyNet& policy, const DynamicsEnsemble& dyn,
                                                 const EnvConfig& config, std::size_t m, std::uint64_t seed,
                                                 std::size_t stride = 1) {
  if (m < kMinCalibrationSize)
    throw ConfigError("calibration needs M >= " + std::to_string(kMinCalibrationSize) + " transitions");
  if (config.is_altered()) throw ContractError("calibration requires the unaltered training config");
  if (policy.checksum() != dyn.policy_checksum) throw IntegrityError("calibration: policy does not match dynamics model");
  if (stride == 0) throw ConfigError("calibration stride must be >= 1");
  const auto stream = collect_transitions(policy, config, m * stride, seed, "pedm-calibration");
  std::vector<std::vector<double>> rows;
  for (std::size_t i = 0; i < stream.size(); i += stride)
    rows.push_back(pedm_nonconformity(dyn, stream[i].s1, stream[i].action, stream[i].s2));
  return CalibrationSet::from_scores(rows, provenance_of(dyn));
}

// ------------------------------------------------------------ persistence

inline Checkpoint dynamics_checkpoint(const DynamicsEnsemble& dyn) {
  Checkpoint c;
  c.metadata["kind"] = "dynamics-ensemble";
  c.metadata["env"] = to_string(dyn.env);
  c.metadata["members"] = dyn.size();
  c.metadata["seeds"] = dyn.seeds;
  c.metadata["policy_checksum"] = hex64(dyn.policy_checksum);
  c.metadata["config"] = dyn.config_ini;
  c.metadata["hidden"] = dyn.hyper.hidden;
  c.metadata["lr"] = dyn.hyper.lr;
  c.metadata["batch_size"] = dyn.hyper.batch_size;
  c.metadata["replay_capacity"] = dyn.hyper.replay_capacity;
  c.metadata["normalizer_fraction"] = dyn.hyper.normalizer_fraction;
  for (std::size_t i = 0; i < dyn.size(); ++i) put_mlp(c, "member" + std::to_string(i) + "/", dyn.models[i]);
  c.add("state_norm/mean", Tensor::vector(dyn.state_norm.mean));
  c.add("state_norm/std", Tensor::vector(dyn.state_norm.stddev));
  c.add("delta_norm/mean", Tensor::vector(dyn.delta_norm.mean));
  c.add("delta_norm/std", Tensor::vector(dyn.delta_norm.stddev));
  return c;
}

inline DynamicsEnsemble dynamics_from_checkpoint(const Checkpoint& c) {
  if (c.metadata.value("kind", "") != "dynamics-ensemble") throw FormatError("checkpoint is not a dynamics ensemble");
  DynamicsEnsemble dyn;
  dyn.env = env_id_from_string(c.metadata.at("env").get<std::string>());
  dyn.space = action_space(dyn.env);
  dyn.seeds = c.metadata.at("seeds").get<std::vector<std::uint64_t>>();
  dyn.policy_checksum = std::stoull(c.metadata.at("policy_checksum").get<std::string>(), nullptr, 16);
  dyn.config_ini = c.metadata.at("config").get<std::string>();
  dyn.hyper.hidden = c.metadata.at("hidden").get<std::vector<std::size_t>>();
  dyn.hyper.lr = c.metadata.at("lr").get<double>();
  dyn.hyper.batch_size = c.metadata.at("batch_size").get<std::size_t>();
  dyn.hyper.replay_capacity = c.metadata.at("replay_capacity").get<std::size_t>();
  dyn.hyper.normalizer_fraction = c.metadata.at("normalizer_fraction").get<double>();
  const std::size_t k = c.metadata.at("members").get<std::size_t>();
  for (std::size_t i = 0; i < k; ++i) dyn.models.push_back(get_mlp(c, "member" + std::to_string(i) + "/"));
  dyn.state_norm = {c.get("state_norm/mean").values(), c.get("state_norm/std").values()};
  dyn.delta_norm = {c.get("delta_norm/mean").values(), c.get("delta_norm/std").values()};
  const std::size_t d = dyn.state_dim();
  for (const auto& m : dyn.models)
    if (m.in_dim() != d + dyn.action_dim() || m.out_dim() != 2 * d)
      throw FormatError("dynamics ensemble: member shape does not match the environment");
  return dyn;
}

}  // namespace cotd
