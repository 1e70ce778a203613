#pragma once

// Conditional VAE over next states, conditioned on the current state, and an
// ensemble trained on the transitions of a frozen policy.

#include "cotd/agent.hpp"
#include "cotd/autodiff.hpp"
#include "cotd/checkpoint.hpp"
#include "cotd/envs.hpp"
#include "cotd/nn.hpp"
#include "cotd/optim.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

namespace cotd {

inline constexpr double kLogVarMin = -10.0;
inline constexpr double kLogVarMax = 10.0;

struct CvaeHyper {
  std::vector<std::size_t> hidden{64, 64};
  std::size_t latent_dim = 0;  // 0: same as the state dimension
  double beta = 1.0;
  double lr = 1e-3;
  bool replay = true;
  std::size_t replay_capacity = 100'000;
  std::size_t batch_size = 64;
  double normalizer_fraction = 0.1;
};

/// Per-dimension standardization, frozen once fitted.
struct Normalizer {
  std::vector<double> mean;
  std::vector<double> stddev;

  static Normalizer identity(std::size_t dim) { return {std::vector<double>(dim, 0.0), std::vector<double>(dim, 1.0)}; }

  /// Dimensions with (near) zero spread keep unit scale.
  static Normalizer fit(std::span<const StateVector> rows, std::size_t dim) {
    if (rows.empty()) return identity(dim);
    Normalizer n{std::vector<double>(dim, 0.0), std::vector<double>(dim, 0.0)};
    for (const auto& r : rows)
      for (std::size_t i = 0; i < dim; ++i) n.mean[i] += r[i];
    for (auto& m : n.mean) m /= static_cast<double>(rows.size());
    for (const auto& r : rows)
      for (std::size_t i = 0; i < dim; ++i) n.stddev[i] += (r[i] - n.mean[i]) * (r[i] - n.mean[i]);
    for (auto& s : n.stddev) {
      s = std::sqrt(s / static_cast<double>(rows.size()));
      if (s < 1e-6) s = 1.0;
    }
    return n;
  }

  std::size_t dim() const { return mean.size(); }

  StateVector apply(const StateVector& s) const {
    if (s.size() != dim()) throw ContractError("normalizer: expected dim " + std::to_string(dim()));
    StateVector out(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) out[i] = (s[i] - mean[i]) / stddev[i];
    return out;
  }

  Tensor apply_rows(std::span<const StateVector> rows) const {
    Tensor t(Shape{rows.size(), dim()});
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (rows[r].size() != dim()) throw ContractError("normalizer: expected dim " + std::to_string(dim()));
      for (std::size_t i = 0; i < dim(); ++i) t.at(r, i) = (rows[r][i] - mean[i]) / stddev[i];
    }
    return t;
  }

  bool operator==(const Normalizer&) const = default;
};

struct CvaeModel {
  Mlp encoder;  // (s2 ++ s1) -> (mu ++ logvar)
  Mlp decoder;  // (z ++ s1) -> s2_hat
  std::size_t state_dim = 0;
  std::size_t latent_dim = 0;
  std::uint64_t seed = 0;

  static CvaeModel make(std::size_t state_dim, std::size_t latent_dim, const std::vector<std::size_t>& hidden,
                        std::uint64_t seed) {
    auto build = [&](std::size_t in, std::size_t out, std::uint64_t s) {
      std::vector<std::size_t> dims{in};
      std::vector<Activation> acts;
      for (auto h : hidden) {
        dims.push_back(h);
        acts.push_back(Activation::Tanh);
      }
      dims.push_back(out);
      acts.push_back(Activation::Identity);
      return Mlp::xavier(dims, acts, s);
    };
    CvaeModel m;
    m.state_dim = state_dim;
    m.latent_dim = latent_dim;
    m.seed = seed;
    m.encoder = build(2 * state_dim, 2 * latent_dim, substream_seed(seed, "encoder"));
    m.decoder = build(latent_dim + state_dim, state_dim, substream_seed(seed, "decoder"));
    m.validate();
    return m;
  }

  void validate() const {
    if (encoder.in_dim() != 2 * state_dim || encoder.out_dim() != 2 * latent_dim)
      throw ContractError("cvae: encoder must map 2*state_dim -> 2*latent_dim");
    if (decoder.in_dim() != latent_dim + state_dim || decoder.out_dim() != state_dim)
      throw ContractError("cvae: decoder must map latent_dim+state_dim -> state_dim");
  }

  std::vector<Tensor*> parameters() {
    auto ps = encoder.parameters();
    for (auto* p : decoder.parameters()) ps.push_back(p);
    return ps;
  }

  std::uint64_t checksum() const {
    Fnv1a h;
    h.u64(encoder.checksum());
    h.u64(decoder.checksum());
    return h.value();
  }
};

struct Encoded {
  std::vector<double> mu;
  std::vector<double> logvar;
};

namespace detail {
inline void expect_dim(const std::vector<double>& v, std::size_t d, const char* what) {
  if (v.size() != d)
    throw ContractError(std::string("cvae: ") + what + " has dim " + std::to_string(v.size()) + ", expected " +
                        std::to_string(d));
}
}  // namespace detail

/// Inputs are in normalized space.
inline Encoded cvae_encode(const CvaeModel& model, const StateVector& s2, const StateVector& s1) {
  detail::expect_dim(s2, model.state_dim, "s2");
  detail::expect_dim(s1, model.state_dim, "s1");
  StateVector in(s2);
  in.insert(in.end(), s1.begin(), s1.end());
  const Tensor out = model.encoder.forward(Tensor::row(in));
  Encoded e;
  for (std::size_t i = 0; i < model.latent_dim; ++i) {
    e.mu.push_back(out[i]);
    e.logvar.push_back(std::clamp(out[model.latent_dim + i], kLogVarMin, kLogVarMax));
  }
  return e;
}

inline std::vector<double> reparameterize(const std::vector<double>& mu, const std::vector<double>& logvar,
                                          const std::vector<double>& eps) {
  if (mu.size() != logvar.size() || mu.size() != eps.size()) throw ContractError("reparameterize: dim mismatch");
  std::vector<double> z(mu.size());
  for (std::size_t i = 0; i < mu.size(); ++i) z[i] = mu[i] + std::exp(0.5 * logvar[i]) * eps[i];
  return z;
}

inline StateVector cvae_decode(const CvaeModel& model, const std::vector<double>& z, const StateVector& s1) {
  detail::expect_dim(z, model.latent_dim, "z");
  detail::expect_dim(s1, model.state_dim, "s1");
  std::vector<double> in(z);
  in.insert(in.end(), s1.begin(), s1.end());
  return model.decoder.forward(Tensor::row(in)).values();
}

/// 0.5 * sum(mu^2 + exp(logvar) - 1 - logvar)
inline double kl_divergence(const std::vector<double>& mu, const std::vector<double>& logvar) {
  if (mu.size() != logvar.size()) throw ContractError("kl: dim mismatch");
  double kl = 0.0;
  for (std::size_t i = 0; i < mu.size(); ++i) kl += mu[i] * mu[i] + std::exp(logvar[i]) - 1.0 - logvar[i];
  return 0.5 * kl;
}

inline double mse(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.empty()) throw ContractError("mse: dim mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  return acc / static_cast<double>(a.size());
}

inline double elbo_loss(const StateVector& s2, const StateVector& s2_hat, const std::vector<double>& mu,
                        const std::vector<double>& logvar, double beta) {
  if (beta < 0.0) throw ContractError("elbo_loss: beta must be >= 0");
  return mse(s2, s2_hat) + beta * kl_divergence(mu, logvar);
}

struct ElboParts {
  Var loss;           // batch mean of mse + beta * kl
  double recon = 0.0; // batch mean mse
  double kl = 0.0;
};

/// Records the batch ELBO on `g`. Rows of s2/s1 are normalized states, eps
/// is [B, latent_dim].
inline ElboParts elbo_graph(Graph& g, const CvaeModel& model, std::span<const Var> enc, std::span<const Var> dec,
                            const Tensor& s2, const Tensor& s1, const Tensor& eps, double beta) {
  const std::size_t dz = model.latent_dim;
  Var x2 = g.constant(s2);
  Var x1 = g.constant(s1);
  Var h = model.encoder.forward(enc, concat_cols(x2, x1));
  Var mu = slice_cols(h, 0, dz);
  Var logvar = clamp(slice_cols(h, dz, 2 * dz), kLogVarMin, kLogVarMax);
  Var z = mu + exp(scale(logvar, 0.5)) * g.constant(eps);
  Var recon = model.decoder.forward(dec, concat_cols(z, x1));
  Var mse_rows = scale(row_sum(square(recon - x2)), 1.0 / static_cast<double>(model.state_dim));
  Var kl_rows = scale(row_sum(square(mu) + exp(logvar) - g.constant(Tensor::scalar(1.0)) - logvar), 0.5);
  ElboParts p;
  p.loss = mean(mse_rows + scale(kl_rows, beta));
  p.recon = mean(mse_rows).value().item();
  p.kl = mean(kl_rows).value().item();
  return p;
}

/// Batch statistics of one update, detached from the graph.
struct StepStats {
  double loss = 0.0;
  double recon = 0.0;
  double kl = 0.0;
};

/// One Adam step on a batch. Throws TrainingError naming `model_index` when
/// the loss or any parameter turns non-finite.
inline StepStats cvae_train_step(CvaeModel& model, AdamState& opt, const Tensor& s2, const Tensor& s1,
                                 const Tensor& eps, double beta, std::size_t model_index) {
  Graph g;
  const auto enc = model.encoder.bind(g);
  const auto dec = model.decoder.bind(g);
  ElboParts p = elbo_graph(g, model, enc, dec, s2, s1, eps, beta);
  const double loss = p.loss.value().item();
  const std::string who = "cvae model " + std::to_string(model_index);
  if (!std::isfinite(loss)) throw TrainingError(who + ": non-finite loss");
  g.backward(p.loss);
  auto grads = collect_grads(enc);
  for (auto& t : collect_grads(dec)) grads.push_back(std::move(t));
  clip_global_norm(grads, kGradClipNorm);
  auto params = model.parameters();
  adam_step(params, grads, opt);
  ensure_finite(params, who);
  return {loss, p.recon, p.kl};
}

struct Transition {
  StateVector s1;
  ActionValue action;
  StateVector s2;
};

struct CvaeEnsemble {
  std::vector<CvaeModel> models;
  Normalizer normalizer;
  EnvId env = EnvId::CartPole;
  std::uint64_t policy_checksum = 0;
  /// Gridworld only: training-stream visits per cell (indexed by s1's cell).
  std::vector<std::uint64_t> visits;
  CvaeHyper hyper;
  std::string config_ini;

  std::size_t size() const { return models.size(); }
  std::size_t state_dim() const { return normalizer.dim(); }

  std::uint64_t checksum() const {
    Fnv1a h;
    for (const auto& m : models) h.u64(m.checksum());
    h.f64s(normalizer.mean);
    h.f64s(normalizer.stddev);
    return h.value();
  }
};

/// Per-model posterior-mean reconstruction MSE in normalized space, in
/// ensemble order. Pure: repeated calls are bit-identical.
inline std::vector<double> reconstruction_errors(const CvaeEnsemble& ens, const StateVector& s1,
                                                 const StateVector& s2) {
  const StateVector n1 = ens.normalizer.apply(s1);
  const StateVector n2 = ens.normalizer.apply(s2);
  std::vector<double> out;
  out.reserve(ens.size());
  for (const auto& m : ens.models) {
    const Encoded e = cvae_encode(m, n2, n1);
    out.push_back(mse(cvae_decode(m, e.mu, n1), n2));
  }
  return out;
}

/// Batched form: result[i][k] is model k's score on transition i.
inline std::vector<std::vector<double>> reconstruction_errors(const CvaeEnsemble& ens,
                                                              std::span<const StateVector> s1,
                                                              std::span<const StateVector> s2) {
  if (s1.size() != s2.size()) throw ContractError("reconstruction_errors: s1/s2 count mismatch");
  std::vector<std::vector<double>> out(s1.size(), std::vector<double>(ens.size()));
  if (s1.empty()) return out;
  const Tensor n1 = ens.normalizer.apply_rows(s1);
  const Tensor n2 = ens.normalizer.apply_rows(s2);
  const std::size_t d = ens.state_dim();
  for (std::size_t k = 0; k < ens.size(); ++k) {
    const auto& m = ens.models[k];
    const Tensor h = m.encoder.forward(concat_cols(n2, n1));
    const Tensor recon = m.decoder.forward(concat_cols(cotd::slice_cols(h, 0, m.latent_dim), n1));
    for (std::size_t i = 0; i < s1.size(); ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double r = recon.at(i, j) - n2.at(i, j);
        acc += r * r;
      }
      out[i][k] = acc / static_cast<double>(d);
    }
  }
  return out;
}

struct CvaeTrainResult {
  CvaeEnsemble ensemble;
  /// Per gradient step: batch reconstruction MSE averaged over models.
  std::vector<double> recon_log;
  std::vector<double> loss_log;
  std::size_t transitions = 0;
  std::size_t updates = 0;
};

/// Greedy rollouts of the frozen policy; fresh episode seeds come from the
/// `stream` substream of `seed`. Episode boundaries never pair states.
inline std::vector<Transition> collect_transitions(const PolicyNet& policy, const EnvConfig& config,
                                                   std::size_t count, std::uint64_t seed,
                                                   std::string_view stream) {
  std::vector<Transition> out;
  out.reserve(count);
  Rng unused(0);
  std::uint64_t episode = 0;
  while (out.size() < count) {
    Environment env(config, substream_seed(seed, stream, episode++));
    while (out.size() < count) {
      const ActionValue a = select_action(policy, env.state(), ActionMode::Greedy, unused);
      auto st = env.step(a);
      out.push_back({std::move(st.prev), st.action, st.next});
      if (st.done()) break;
    }
  }
  return out;
}

/// Trains N CVAEs on the frozen policy's transition stream. The normalizer is
/// fitted on the first `normalizer_fraction` of transitions; gradient steps
/// start once it is frozen, one per model per subsequent transition.
inline CvaeTrainResult train_cvae_ensemble(const PolicyNet& policy, const EnvConfig& config, std::size_t n_models,
                                           std::size_t steps, const CvaeHyper& hyper, std::uint64_t seed) {
  if (n_models == 0) throw ContractError("train_cvae_ensemble: need at least one model");
  if (config.is_altered()) throw ContractError("train_cvae_ensemble: requires the unaltered training config");
  if (hyper.beta < 0.0) throw ContractError("train_cvae_ensemble: beta must be >= 0");
  const std::size_t d = state_dim(config.id);
  const std::size_t dz = hyper.latent_dim ? hyper.latent_dim : d;

  CvaeTrainResult res;
  auto& ens = res.ensemble;
  ens.env = config.id;
  ens.hyper = hyper;
  ens.policy_checksum = policy.checksum();
  ens.config_ini = config.to_ini();
  for (std::size_t k = 0; k < n_models; ++k)
    ens.models.push_back(CvaeModel::make(d, dz, hyper.hidden, substream_seed(seed, "cvae-init", k)));
  ens.normalizer = Normalizer::identity(d);

  const auto stream = collect_transitions(policy, config, steps, seed, "cvae-episode");
  res.transitions = stream.size();
  if (config.id == EnvId::Gridworld) {
    const auto& spec = gridworld_spec(config.grid);
    ens.visits.assign(spec.cells(), 0);
    for (const auto& t : stream) ++ens.visits[spec.cell_of(t.s1)];
  }

  const std::size_t warmup =
      std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(hyper.normalizer_fraction * double(steps))));
  std::vector<AdamState> opts;
  std::vector<Rng> rngs;
  for (std::size_t k = 0; k < n_models; ++k) {
    opts.emplace_back(ens.models[k].parameters(), AdamHyper{hyper.lr});
    rngs.push_back(make_rng(seed, "cvae", k));
  }

  std::vector<StateVector> s1_rows, s2_rows;
  for (std::size_t t = 0; t < stream.size(); ++t) {
    if (t + 1 < warmup) continue;
    if (t + 1 == warmup) {
      std::vector<StateVector> seen;
      for (std::size_t i = 0; i < warmup; ++i) seen.push_back(stream[i].s1);
      seen.push_back(stream[warmup - 1].s2);
      ens.normalizer = Normalizer::fit(seen, d);
    }
    double recon = 0.0, loss = 0.0;
    for (std::size_t k = 0; k < n_models; ++k) {
      s1_rows.clear();
      s2_rows.clear();
      if (hyper.replay) {
        // the buffer holds the most recent `replay_capacity` transitions
        const std::size_t lo = t + 1 > hyper.replay_capacity ? t + 1 - hyper.replay_capacity : 0;
        const std::size_t b = std::min(hyper.batch_size, t + 1 - lo);
        std::uniform_int_distribution<std::size_t> pick(lo, t);
        for (std::size_t i = 0; i < b; ++i) {
          const auto& tr = stream[pick(rngs[k])];
          s1_rows.push_back(tr.s1);
          s2_rows.push_back(tr.s2);
        }
      } else {
        s1_rows.push_back(stream[t].s1);
        s2_rows.push_back(stream[t].s2);
      }
      Tensor eps(Shape{s1_rows.size(), dz});
      for (double& e : eps.data()) e = normal(rngs[k]);
      const auto parts = cvae_train_step(ens.models[k], opts[k], ens.normalizer.apply_rows(s2_rows),
                                         ens.normalizer.apply_rows(s1_rows), eps, hyper.beta, k);
      recon += parts.recon;
      loss += parts.loss;
    }
    res.recon_log.push_back(recon / static_cast<double>(n_models));
    res.loss_log.push_back(loss / static_cast<double>(n_models));
    ++res.updates;
  }
  return res;
}

// ------------------------------------------------------------ persistence

inline Checkpoint ensemble_checkpoint(const CvaeEnsemble& ens) {
  Checkpoint c;
  c.metadata["kind"] = "cvae-ensemble";
  c.metadata["env"] = to_string(ens.env);
  c.metadata["models"] = ens.size();
  c.metadata["policy_checksum"] = hex64(ens.policy_checksum);
  c.metadata["config"] = ens.config_ini;
  json h;
  h["hidden"] = ens.hyper.hidden;
  h["latent_dim"] = ens.hyper.latent_dim;
  h["beta"] = ens.hyper.beta;
  h["lr"] = ens.hyper.lr;
  h["replay"] = ens.hyper.replay;
  h["replay_capacity"] = ens.hyper.replay_capacity;
  h["batch_size"] = ens.hyper.batch_size;
  h["normalizer_fraction"] = ens.hyper.normalizer_fraction;
  c.metadata["hyper"] = h;
  json seeds = json::array();
  for (std::size_t k = 0; k < ens.size(); ++k) {
    const auto& m = ens.models[k];
    const std::string p = "model" + std::to_string(k) + "/";
    put_mlp(c, p + "encoder/", m.encoder);
    put_mlp(c, p + "decoder/", m.decoder);
    seeds.push_back(m.seed);
  }
  c.metadata["seeds"] = seeds;
  c.add("normalizer/mean", Tensor::vector(ens.normalizer.mean));
  c.add("normalizer/std", Tensor::vector(ens.normalizer.stddev));
  if (!ens.visits.empty()) {
    std::vector<double> v(ens.visits.begin(), ens.visits.end());
    c.add("visits", Tensor::vector(std::move(v)));
  }
  return c;
}

inline CvaeEnsemble ensemble_from_checkpoint(const Checkpoint& c) {
  if (c.metadata.value("kind", "") != "cvae-ensemble") throw FormatError("checkpoint is not a cvae ensemble");
  CvaeEnsemble ens;
  ens.env = env_id_from_string(c.metadata.at("env").get<std::string>());
  ens.config_ini = c.metadata.at("config").get<std::string>();
  ens.policy_checksum = std::stoull(c.metadata.at("policy_checksum").get<std::string>(), nullptr, 16);
  const auto& h = c.metadata.at("hyper");
  ens.hyper.hidden = h.at("hidden").get<std::vector<std::size_t>>();
  ens.hyper.latent_dim = h.at("latent_dim").get<std::size_t>();
  ens.hyper.beta = h.at("beta").get<double>();
  ens.hyper.lr = h.at("lr").get<double>();
  ens.hyper.replay = h.at("replay").get<bool>();
  ens.hyper.replay_capacity = h.at("replay_capacity").get<std::size_t>();
  ens.hyper.batch_size = h.at("batch_size").get<std::size_t>();
  ens.hyper.normalizer_fraction = h.at("normalizer_fraction").get<double>();
  ens.normalizer.mean = c.get("normalizer/mean").values();
  ens.normalizer.stddev = c.get("normalizer/std").values();
  const auto seeds = c.metadata.at("seeds").get<std::vector<std::uint64_t>>();
  const std::size_t n = c.metadata.at("models").get<std::size_t>();
  if (seeds.size() != n) throw FormatError("cvae ensemble: seed list does not match model count");
  for (std::size_t k = 0; k < n; ++k) {
    const std::string p = "model" + std::to_string(k) + "/";
    CvaeModel m;
    m.encoder = get_mlp(c, p + "encoder/");
    m.decoder = get_mlp(c, p + "decoder/");
    m.state_dim = ens.normalizer.dim();
    m.latent_dim = m.encoder.out_dim() / 2;
    m.seed = seeds[k];
    m.validate();
    ens.models.push_back(std::move(m));
  }
  if (c.has("visits"))
    for (double v : c.get("visits").values()) ens.visits.push_back(static_cast<std::uint64_t>(v));
  return ens;
}

}  // namespace cotd
