#pragma once

// Experiment harness: labeled episodes, ROC/AUC and the per-arm suite report.

#include "cotd/agent.hpp"
#include "cotd/conformal.hpp"
#include "cotd/cvae.hpp"
#include "cotd/envs.hpp"
#include "cotd/pedm.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <memory>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace cotd {

class MetricError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class UnsupportedError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

enum class Label { Id, EnvParam, EnvPerturb, StateOod };

inline std::string to_string(Label l) {
  switch (l) {
    case Label::Id: return "id";
    case Label::EnvParam: return "env-param";
    case Label::EnvPerturb: return "env-perturb";
    case Label::StateOod: return "state-ood";
  }
  return "id";
}

inline Label episode_label(const EnvConfig& config) {
  if (config.perturbation.active()) return Label::EnvPerturb;
  return config.is_altered() ? Label::EnvParam : Label::Id;
}

// --------------------------------------------------------- state labels

struct StateLabelThresholds {
  double entropy = 0.9 * std::numbers::ln2;
  std::uint64_t visits = 20;
};

/// State-OOD iff the source cell's successor entropy under the executed action
/// exceeds the entropy threshold, or the cell was visited fewer than
/// `visits` times while the detector was trained.
inline bool label_state_ood(const GridworldSpec& spec, const std::vector<std::uint64_t>& visits,
                            const StateVector& s1, const ActionValue& action, const StateLabelThresholds& thr) {
  if (visits.size() != spec.cells()) throw ContractError("label_state_ood: visit table does not match the grid");
  const std::size_t cell = spec.cell_of(s1);
  return gridworld_entropy(spec, cell, action.index) > thr.entropy || visits[cell] < thr.visits;
}

inline bool label_state_ood(const EnvConfig& config, const std::vector<std::uint64_t>& visits,
                            const StateVector& s1, const ActionValue& action, const StateLabelThresholds& thr) {
  if (config.id != EnvId::Gridworld)
    throw UnsupportedError("state-based labels are only defined for gridworld, not " + to_string(config.id));
  return label_state_ood(gridworld_spec(config.grid), visits, s1, action, thr);
}

/// Exact kernel probability of the gridworld transition (s1, a) -> s2.
inline double gridworld_transition_probability(const GridworldSpec& spec, const StateVector& s1,
                                               const ActionValue& a, const StateVector& s2) {
  return spec.kernel[spec.cell_of(s1)][static_cast<std::size_t>(a.index)][spec.cell_of(s2)];
}

// ----------------------------------------------------------- detectors

/// Ground truth available to the oracle detector only.
struct TruthHint {
  bool env_altered = false;
  bool state_ood = false;
};

struct Assessment {
  double score = 0.0;
  bool is_ood = false;
};

class Detector {
 public:
  virtual ~Detector() = default;
  virtual std::string name() const = 0;
  /// `chosen` is the policy's action before any perturbation.
  virtual Assessment assess(const StateVector& s1, const ActionValue& chosen, const StateVector& s2,
                            const TruthHint& truth) const = 0;
};

class CotdDetector final : public Detector {
 public:
  CotdDetector(const CvaeEnsemble& ens, const CalibrationSet& cal, DetectorConfig cfg,
               Aggregation agg = Aggregation::Mean)
      : ens_(ens), thresholds_(), agg_(agg) {
    verify_provenance(cal, ens);
    if (cal.n != ens.size()) throw IntegrityError("calibration set and ensemble disagree on N");
    thresholds_ = model_thresholds(cal, cfg);
  }
  std::string name() const override { return "cotd"; }
  Assessment assess(const StateVector& s1, const ActionValue&, const StateVector& s2, const TruthHint&) const override {
    const auto errors = reconstruction_errors(ens_, s1, s2);
    return {continuous_score(errors, agg_), detect_ood(errors, thresholds_).is_ood};
  }
  const std::vector<double>& thresholds() const { return thresholds_; }

 private:
  const CvaeEnsemble& ens_;
  std::vector<double> thresholds_;
  Aggregation agg_;
};

class PedmDetector final : public Detector {
 public:
  PedmDetector(const DynamicsEnsemble& dyn, const CalibrationSet& cal, DetectorConfig cfg) : dyn_(dyn) {
    verify_provenance(cal, dyn);
    if (cal.n != dyn.size()) throw IntegrityError("calibration set and dynamics ensemble disagree on K");
    thresholds_ = model_thresholds(cal, cfg);
  }
  std::string name() const override { return "pedm"; }
  Assessment assess(const StateVector& s1, const ActionValue& a, const StateVector& s2, const TruthHint&) const override {
    const auto s = pedm_nonconformity(dyn_, s1, a, s2);
    return {continuous_score(s), detect_ood(s, thresholds_).is_ood};
  }

 private:
  const DynamicsEnsemble& dyn_;
  std::vector<double> thresholds_;
};

/// Scores 1 on altered environments, 0.5 on state-OOD transitions, else 0.
class OracleDetector final : public Detector {
 public:
  std::string name() const override { return "oracle"; }
  Assessment assess(const StateVector&, const ActionValue&, const StateVector&, const TruthHint& t) const override {
    return {t.env_altered ? 1.0 : t.state_ood ? 0.5 : 0.0, t.env_altered};
  }
};

class ConstantDetector final : public Detector {
 public:
  std::string name() const override { return "constant"; }
  Assessment assess(const StateVector&, const ActionValue&, const StateVector&, const TruthHint&) const override {
    return {0.0, false};
  }
};

// ------------------------------------------------------------- episodes

struct EpisodeRecord {
  std::string arm;
  std::size_t index = 0;
  Label label = Label::Id;
  std::uint64_t seed = 0;
  std::uint64_t config_checksum = 0;
  std::map<std::string, double> altered;  // parameters that differ from training
  std::vector<double> scores;
  std::vector<bool> verdicts;
  std::vector<bool> state_ood;  // gridworld only
  std::optional<std::size_t> first_detection;
  std::size_t length = 0;
  bool terminated = false;

  double episode_score() const { return scores.empty() ? 0.0 : *std::max_element(scores.begin(), scores.end()); }
};

struct EpisodeOptions {
  bool early_stop = true;
  /// Gridworld state labels; empty visits = no state labels.
  std::vector<std::uint64_t> visits;
  StateLabelThresholds thresholds;
};

/// Greedy rollout under `config`, scoring every transition; stops at the first
/// OOD verdict (when early_stop), a terminal state or the step cap.
inline EpisodeRecord run_episode(const PolicyNet& policy, const Detector& detector, const EnvConfig& config,
                                 std::uint64_t seed, const EpisodeOptions& opt = {}) {
  EpisodeRecord rec;
  rec.label = episode_label(config);
  rec.seed = seed;
  rec.config_checksum = config.checksum();
  for (const auto& p : param_table(config.id))
    if (config.param(p.name) != p.training) rec.altered[p.name] = config.param(p.name);
  const bool labels = config.id == EnvId::Gridworld && !opt.visits.empty();
  const bool altered = config.is_altered();
  Environment env(config, seed);
  Rng unused(0);
  while (true) {
    const ActionValue chosen = select_action(policy, env.state(), ActionMode::Greedy, unused);
    auto st = env.step(chosen);
    TruthHint truth{altered, false};
    if (labels) truth.state_ood = label_state_ood(config, opt.visits, st.prev, st.action, opt.thresholds);
    const Assessment a = detector.assess(st.prev, chosen, st.next, truth);
    rec.scores.push_back(a.score);
    rec.verdicts.push_back(a.is_ood);
    if (labels) rec.state_ood.push_back(truth.state_ood);
    ++rec.length;
    if (a.is_ood && !rec.first_detection) rec.first_detection = rec.length - 1;
    if (st.terminated) rec.terminated = true;
    if (st.done() || (a.is_ood && opt.early_stop)) break;
  }
  return rec;
}

// ---------------------------------------------------------------- ROC

struct RocPoint {
  double threshold = 0.0;
  double fpr = 0.0;
  double tpr = 0.0;
};

struct RocResult {
  double auc = 0.5;
  std::vector<RocPoint> points;
  std::size_t positives = 0;
  std::size_t negatives = 0;
};

/// Mann-Whitney AUC with mid-ranks for ties; ROC points at every distinct
/// score, predicting OOD for score >= threshold. labels: true = OOD.
inline RocResult compute_roc_auc(const std::vector<double>& scores, const std::vector<bool>& labels) {
  if (scores.size() != labels.size()) throw MetricError("roc: scores and labels differ in length");
  RocResult r;
  for (bool l : labels) (l ? r.positives : r.negatives)++;
  if (r.positives == 0 || r.negatives == 0) throw MetricError("roc: both classes are required");
  for (double s : scores)
    if (std::isnan(s)) throw MetricError("roc: NaN score");

  std::vector<std::size_t> order(scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos_rank_sum = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]]) pos_rank_sum += mid;
    i = j;
  }
  const double np = static_cast<double>(r.positives), nn = static_cast<double>(r.negatives);
  r.auc = (pos_rank_sum - np * (np + 1.0) / 2.0) / (np * nn);

  // walk thresholds from high to low
  r.points.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = order.size(); i > 0;) {
    const double t = scores[order[i - 1]];
    while (i > 0 && scores[order[i - 1]] == t) {
      (labels[order[i - 1]] ? tp : fp)++;
      --i;
    }
    r.points.push_back({t, static_cast<double>(fp) / nn, static_cast<double>(tp) / np});
  }
  return r;
}

// --------------------------------------------------------------- suite

struct SuiteSpec {
  EnvConfig base;
  std::size_t id_episodes = 1000;
  std::size_t perturb_episodes = 500;
  std::size_t param_episodes = 500;
  double scale = 1.0;
  Perturbation perturbation;
  /// Fixed alteration for every parameter-arm episode instead of random draws.
  std::map<std::string, double> fixed_params;
  double dead_zone = 0.02;
  EpisodeOptions episode;
  std::uint64_t seed = 0;

  static SuiteSpec defaults(const EnvConfig& base, std::uint64_t seed) {
    SuiteSpec s;
    s.base = base;
    s.seed = seed;
    if (action_space(base.id).discrete)
      s.perturbation.flip_prob = 0.3;
    else
      s.perturbation.action_sigma = 0.5;
    return s;
  }

  std::size_t scaled(std::size_t n) const {
    if (!(scale > 0.0)) throw ConfigError("suite scale must be positive");
    return static_cast<std::size_t>(std::llround(static_cast<double>(n) * scale));
  }
};

/// Uniform draw of one Table-style parameter per episode, keeping at least
/// dead_zone * |training value| away from the training value.
inline EnvConfig draw_param_alteration(const EnvConfig& base, double dead_zone, Rng& rng) {
  const auto& table = param_table(base.id);
  if (table.empty()) throw UnsupportedError("no alterable parameters for " + to_string(base.id));
  const auto& p = table[static_cast<std::size_t>(rng() % table.size())];
  double v = p.training;
  while (std::abs(v - p.training) <= dead_zone * std::abs(p.training)) v = uniform(rng, p.lo, p.hi);
  return make_altered_config(base, {{p.name, v}});
}

struct MetricRow {
  std::string name;
  std::optional<double> value;
  std::size_t positives = 0;
  std::size_t negatives = 0;
  std::vector<RocPoint> roc;
  std::string notice;
};

struct AucReport {
  std::string detector;
  EnvId env = EnvId::CartPole;
  std::uint64_t config_checksum = 0;  // unaltered base config
  DetectorConfig detector_config;
  std::vector<MetricRow> rows;
  std::vector<EpisodeRecord> episodes;
  std::map<std::string, std::size_t> arm_counts;
  Perturbation perturbation;

  const MetricRow* row(const std::string& name) const {
    for (const auto& r : rows)
      if (r.name == name) return &r;
    return nullptr;
  }
  std::optional<double> value(const std::string& name) const {
    const auto* r = row(name);
    return r ? r->value : std::nullopt;
  }
};

namespace detail {

inline MetricRow auc_row(const std::string& name, const std::vector<double>& scores, const std::vector<bool>& labels) {
  MetricRow row;
  row.name = name;
  for (bool l : labels) (l ? row.positives : row.negatives)++;
  if (row.positives == 0 || row.negatives == 0) {
    row.notice = "omitted: no " + std::string(row.positives == 0 ? "positive" : "negative") + " samples";
    return row;
  }
  auto roc = compute_roc_auc(scores, labels);
  row.value = roc.auc;
  row.roc = std::move(roc.points);
  return row;
}

inline MetricRow mean_row(const std::string& name, std::initializer_list<const MetricRow*> parts) {
  MetricRow row;
  row.name = name;
  double sum = 0.0;
  int n = 0;
  for (const auto* p : parts)
    if (p && p->value) {
      sum += *p->value;
      ++n;
      row.positives += p->positives;
      row.negatives += p->negatives;
    }
  if (n)
    row.value = sum / n;
  else
    row.notice = "omitted: no component metric";
  return row;
}

}  // namespace detail

/// Runs the unaltered, perturbed and parameter-altered arms and computes the
/// State / Env(1) / Env(2) / Env / Overall AUCs plus false-positive rates.
inline AucReport run_experiment_suite(const PolicyNet& policy, const Detector& detector, const SuiteSpec& spec,
                                      const DetectorConfig& dcfg = {}) {
  if (spec.base.is_altered()) throw ConfigError("suite base config must be the unaltered training config");
  AucReport rep;
  rep.detector = detector.name();
  rep.env = spec.base.id;
  rep.config_checksum = spec.base.checksum();
  rep.detector_config = dcfg;
  rep.perturbation = spec.perturbation;

  const std::size_t n_id = spec.scaled(spec.id_episodes);
  const std::size_t n_perturb = spec.scaled(spec.perturb_episodes);
  const bool has_params = !param_table(spec.base.id).empty();
  const std::size_t n_param = has_params ? spec.scaled(spec.param_episodes) : 0;
  rep.arm_counts = {{"id", n_id}, {"env-perturb", n_perturb}, {"env-param", n_param}};

  for (std::size_t i = 0; i < n_id; ++i) {
    auto r = run_episode(policy, detector, spec.base, substream_seed(spec.seed, "arm-id", i), spec.episode);
    r.arm = "id";
    r.index = i;
    rep.episodes.push_back(std::move(r));
  }
  EnvConfig perturbed = spec.base;
  perturbed.perturbation = spec.perturbation;
  if (n_perturb && !perturbed.perturbation.active()) throw ConfigError("perturbation arm needs a non-zero perturbation");
  for (std::size_t i = 0; i < n_perturb; ++i) {
    auto r = run_episode(policy, detector, perturbed, substream_seed(spec.seed, "arm-perturb", i), spec.episode);
    r.arm = "env-perturb";
    r.index = i;
    rep.episodes.push_back(std::move(r));
  }
  for (std::size_t i = 0; i < n_param; ++i) {
    EnvConfig cfg;
    if (spec.fixed_params.empty()) {
      Rng draw = make_rng(spec.seed, "arm-param-draw", i);
      cfg = draw_param_alteration(spec.base, spec.dead_zone, draw);
    } else {
      cfg = make_altered_config(spec.base, spec.fixed_params);
    }
    auto r = run_episode(policy, detector, cfg, substream_seed(spec.seed, "arm-param", i), spec.episode);
    r.arm = "env-param";
    r.index = i;
    rep.episodes.push_back(std::move(r));
  }

  // per-episode max scores; negatives always come from the unaltered arm
  std::vector<double> ep_scores[2], tr_scores[2];
  std::vector<bool> ep_labels[2], tr_labels[2];
  std::vector<double> state_scores;
  std::vector<bool> state_labels;
  std::size_t id_transitions = 0, id_flags = 0, id_flagged_episodes = 0;
  for (const auto& e : rep.episodes) {
    if (e.arm == "id") {
      for (int k = 0; k < 2; ++k) {
        ep_scores[k].push_back(e.episode_score());
        ep_labels[k].push_back(false);
        for (double s : e.scores) {
          tr_scores[k].push_back(s);
          tr_labels[k].push_back(false);
        }
      }
      id_transitions += e.length;
      for (bool v : e.verdicts) id_flags += v;
      id_flagged_episodes += e.first_detection.has_value();
      for (std::size_t t = 0; t < e.state_ood.size(); ++t) {
        state_scores.push_back(e.scores[t]);
        state_labels.push_back(e.state_ood[t]);
      }
    } else {
      const int k = e.arm == "env-param" ? 0 : 1;
      ep_scores[k].push_back(e.episode_score());
      ep_labels[k].push_back(true);
      for (double s : e.scores) {
        tr_scores[k].push_back(s);
        tr_labels[k].push_back(true);
      }
    }
  }

  MetricRow state;
  if (spec.base.id == EnvId::Gridworld && !spec.episode.visits.empty()) {
    state = detail::auc_row("state", state_scores, state_labels);
  } else {
    state.name = "state";
    state.notice = "omitted: state labels need gridworld visit counts";
  }
  MetricRow env1 = n_param ? detail::auc_row("env-param", ep_scores[0], ep_labels[0]) : MetricRow{"env-param"};
  if (!n_param) env1.notice = "omitted: no parameter-altered episodes";
  MetricRow env2 = n_perturb ? detail::auc_row("env-perturb", ep_scores[1], ep_labels[1]) : MetricRow{"env-perturb"};
  if (!n_perturb) env2.notice = "omitted: no perturbed episodes";
  MetricRow env = detail::mean_row("env", {&env1, &env2});
  MetricRow overall = detail::mean_row("overall", {&state, &env});

  rep.rows.push_back(std::move(overall));
  rep.rows.push_back(std::move(state));
  rep.rows.push_back(std::move(env));
  rep.rows.push_back(std::move(env1));
  rep.rows.push_back(std::move(env2));
  MetricRow t1 = n_param ? detail::auc_row("env-param-transition", tr_scores[0], tr_labels[0])
                         : MetricRow{"env-param-transition"};
  if (!n_param) t1.notice = "omitted: no parameter-altered episodes";
  MetricRow t2 = n_perturb ? detail::auc_row("env-perturb-transition", tr_scores[1], tr_labels[1])
                           : MetricRow{"env-perturb-transition"};
  if (!n_perturb) t2.notice = "omitted: no perturbed episodes";
  rep.rows.push_back(std::move(t1));
  rep.rows.push_back(std::move(t2));

  MetricRow fpt{"false-positive-transition"};
  MetricRow fpe{"false-positive-episode"};
  if (id_transitions) {
    fpt.value = static_cast<double>(id_flags) / static_cast<double>(id_transitions);
    fpt.negatives = id_transitions;
    fpe.value = static_cast<double>(id_flagged_episodes) / static_cast<double>(n_id);
    fpe.negatives = n_id;
  } else {
    fpt.notice = fpe.notice = "omitted: no unaltered episodes";
  }
  rep.rows.push_back(std::move(fpt));
  rep.rows.push_back(std::move(fpe));
  return rep;
}

// ------------------------------------------------------------- outputs

/// Metric columns of the summary table, in display order.
inline const std::vector<std::pair<std::string, std::string>>& summary_columns() {
  static const std::vector<std::pair<std::string, std::string>> cols{
      {"overall", "Overall"}, {"state", "State"}, {"env", "Env"}, {"env-param", "Env(1)"}, {"env-perturb", "Env(2)"}};
  return cols;
}

inline std::string report_header(const AucReport& rep, const std::string& provenance) {
  std::ostringstream out;
  out << "# detector=" << rep.detector << " env=" << to_string(rep.env) << " config=" << hex64(rep.config_checksum)
      << " mode=" << to_string(rep.detector_config.mode) << " delta=" << format_double(rep.detector_config.delta)
      << " provenance=" << provenance << "\n";
  return out.str();
}

inline std::string report_csv(const AucReport& rep, const std::string& provenance) {
  std::ostringstream out;
  out << report_header(rep, provenance);
  out << "# arms id=" << rep.arm_counts.at("id") << " env-perturb=" << rep.arm_counts.at("env-perturb")
      << " env-param=" << rep.arm_counts.at("env-param")
      << " action_sigma=" << format_double(rep.perturbation.action_sigma)
      << " flip_prob=" << format_double(rep.perturbation.flip_prob) << "\n";
  out << "metric,value,positives,negatives,notice\n";
  for (const auto& r : rep.rows)
    out << r.name << "," << (r.value ? format_double(*r.value) : "") << "," << r.positives << "," << r.negatives
        << "," << r.notice << "\n";
  return out.str();
}

inline std::string roc_csv(const AucReport& rep, const MetricRow& row, const std::string& provenance) {
  std::ostringstream out;
  out << report_header(rep, provenance);
  out << "# metric=" << row.name << "\n";
  out << "threshold,fpr,tpr\n";
  for (const auto& p : row.roc)
    out << (std::isinf(p.threshold) ? std::string("inf") : format_double(p.threshold)) << ","
        << format_double(p.fpr) << "," << format_double(p.tpr) << "\n";
  return out.str();
}

/// gnuplot data: one indexed block per metric ("plot 'f' index 0 using 1:2").
inline std::string roc_gnuplot(const AucReport& rep, const std::string& provenance) {
  std::ostringstream out;
  out << report_header(rep, provenance);
  bool first = true;
  for (const auto& r : rep.rows) {
    if (r.roc.empty()) continue;
    if (!first) out << "\n\n";
    first = false;
    out << "# " << r.name << " auc=" << format_double(*r.value) << "\n# fpr tpr\n";
    for (const auto& p : r.roc) out << format_double(p.fpr) << " " << format_double(p.tpr) << "\n";
  }
  return out.str();
}

inline std::string episode_trace_jsonl(const AucReport& rep, const std::string& provenance) {
  std::ostringstream out;
  for (const auto& e : rep.episodes) {
    json j;
    j["provenance"] = provenance;
    j["detector"] = rep.detector;
    j["mode"] = to_string(rep.detector_config.mode);
    j["arm"] = e.arm;
    j["index"] = e.index;
    j["label"] = to_string(e.label);
    j["seed"] = e.seed;
    j["config"] = hex64(e.config_checksum);
    j["altered"] = e.altered;
    j["length"] = e.length;
    j["terminated"] = e.terminated;
    j["first_detection"] = e.first_detection ? json(*e.first_detection) : json(nullptr);
    j["episode_score"] = e.episode_score();
    j["scores"] = e.scores;
    j["verdicts"] = e.verdicts;
    if (!e.state_ood.empty()) j["state_ood"] = e.state_ood;
    out << j.dump() << "\n";
  }
  return out.str();
}

/// Writes report_<d>.csv, roc_<d>_<metric>.csv, roc_<d>.dat and trace_<d>.jsonl.
inline std::vector<std::string> write_report_files(const std::string& dir, const AucReport& rep,
                                                   const std::string& provenance) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::vector<std::string> written;
  auto put = [&](const std::string& name, const std::string& body) {
    const std::string path = (fs::path(dir) / name).string();
    write_file_atomic(path, body);
    written.push_back(path);
  };
  put("report_" + rep.detector + ".csv", report_csv(rep, provenance));
  for (const auto& r : rep.rows)
    if (!r.roc.empty()) put("roc_" + rep.detector + "_" + r.name + ".csv", roc_csv(rep, r, provenance));
  put("roc_" + rep.detector + ".dat", roc_gnuplot(rep, provenance));
  put("trace_" + rep.detector + ".jsonl", episode_trace_jsonl(rep, provenance));
  return written;
}

}  // namespace cotd
