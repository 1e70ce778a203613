#pragma once

// Command-line pipeline: train-agent -> train-detector -> calibrate ->
// evaluate -> report, with every artifact recorded in <out>/manifest.json.
//
// Exit codes: 0 success, 1 training/runtime failure, 2 usage or config error,
// 3 artifact integrity error.

#include "cotd/agent.hpp"
#include "cotd/bench.hpp"
#include "cotd/checkpoint.hpp"
#include "cotd/conformal.hpp"
#include "cotd/cvae.hpp"
#include "cotd/envs.hpp"
#include "cotd/pedm.hpp"

#include <CLI11.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace cotd {

enum ExitCode : int { kExitOk = 0, kExitFailure = 1, kExitUsage = 2, kExitIntegrity = 3 };

// ------------------------------------------------------------------ config

struct SuiteOptions {
  std::size_t id_episodes = 1000;
  std::size_t perturb_episodes = 500;
  std::size_t param_episodes = 500;
  double scale = 1.0;
  bool early_stop = true;
  double dead_zone = 0.02;
  std::optional<double> flip_prob;
  std::optional<double> action_sigma;
  StateLabelThresholds state;
  std::map<std::string, double> fixed_params;  // [alter]
};

/// Everything a pipeline run reads from its INI file.
struct PipelineConfig {
  EnvConfig env;
  AgentHyper agent;
  CvaeHyper cvae;
  std::size_t ensemble_size = 5;
  std::size_t cvae_steps = 20'000;
  DynamicsHyper pedm;
  std::size_t pedm_members = 5;
  std::size_t pedm_steps = 20'000;
  DetectorConfig detector;
  std::size_t calib_steps = 1000;
  std::size_t calib_stride = 1;
  SuiteOptions suite;
};

namespace detail {

inline std::vector<std::size_t> parse_sizes(const std::string& key, const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const long v = std::stol(item, &used);
      if (v <= 0 || item.find_first_not_of(" \t", used) != std::string::npos) throw std::invalid_argument(item);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "': bad layer list '" + text + "'");
    }
  }
  if (out.empty()) throw ConfigError("config key '" + key + "': empty layer list");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("config key '" + key + "': expected a boolean, got '" + v + "'");
}

template <class T>
void read(const boost::property_tree::ptree& pt, const std::string& key, T& target) {
  target = get_or(pt, key, target);
}

inline void read_bool(const boost::property_tree::ptree& pt, const std::string& key, bool& target) {
  if (auto v = pt.get_optional<std::string>(key)) target = parse_bool(key, *v);
}

inline void read_sizes(const boost::property_tree::ptree& pt, const std::string& key, std::vector<std::size_t>& t) {
  if (auto v = pt.get_optional<std::string>(key)) t = parse_sizes(key, *v);
}

}  // namespace detail

inline PipelineConfig parse_pipeline_config(const std::string& text) {
  boost::property_tree::ptree pt;
  std::istringstream in(text);
  try {
    boost::property_tree::read_ini(in, pt);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError("config: " + std::string(e.what()));
  }
  static const std::set<std::string> known{"env",  "params",   "perturbation", "gridworld", "agent",
                                           "cvae", "pedm",     "detector",     "suite",     "alter"};
  for (const auto& [section, node] : pt)
    if (!known.contains(section)) throw ConfigError("config: unknown section [" + section + "]");

  PipelineConfig c;
  c.env = EnvConfig::from_ptree(pt);
  if (c.env.perturbation.active())
    throw ConfigError("config: [perturbation] must be zero for training; use [suite] flip_prob / action_sigma");

  c.agent = default_agent_hyper(c.env.id);
  using detail::read;
  detail::read_sizes(pt, "agent.hidden", c.agent.hidden);
  read(pt, "agent.lr", c.agent.lr);
  read(pt, "agent.gamma", c.agent.gamma);
  read(pt, "agent.n_steps", c.agent.n_steps);
  read(pt, "agent.value_coef", c.agent.value_coef);
  read(pt, "agent.entropy_coef", c.agent.entropy_coef);
  read(pt, "agent.num_envs", c.agent.num_envs);
  read(pt, "agent.reward_scale", c.agent.reward_scale);
  read(pt, "agent.total_steps", c.agent.total_steps);
  read(pt, "agent.eval_interval", c.agent.eval_interval);
  read(pt, "agent.eval_episodes", c.agent.eval_episodes);
  if (c.agent.n_steps <= 0 || c.agent.num_envs <= 0 || c.agent.total_steps <= 0 || c.agent.eval_interval <= 0 ||
      c.agent.eval_episodes <= 0 || !(c.agent.lr > 0.0) || !(c.agent.gamma > 0.0 && c.agent.gamma < 1.0))
    throw ConfigError("config: [agent] values must be positive and gamma inside (0, 1)");

  detail::read_sizes(pt, "cvae.hidden", c.cvae.hidden);
  read(pt, "cvae.latent_dim", c.cvae.latent_dim);
  read(pt, "cvae.beta", c.cvae.beta);
  read(pt, "cvae.lr", c.cvae.lr);
  detail::read_bool(pt, "cvae.replay", c.cvae.replay);
  read(pt, "cvae.replay_capacity", c.cvae.replay_capacity);
  read(pt, "cvae.batch_size", c.cvae.batch_size);
  read(pt, "cvae.normalizer_fraction", c.cvae.normalizer_fraction);
  read(pt, "cvae.ensemble_size", c.ensemble_size);
  read(pt, "cvae.steps", c.cvae_steps);
  if (c.ensemble_size == 0 || c.cvae.batch_size == 0 || c.cvae.replay_capacity == 0 || !(c.cvae.lr > 0.0) ||
      c.cvae.beta < 0.0 || !(c.cvae.normalizer_fraction > 0.0 && c.cvae.normalizer_fraction <= 1.0))
    throw ConfigError("config: [cvae] values out of range");

  detail::read_sizes(pt, "pedm.hidden", c.pedm.hidden);
  read(pt, "pedm.lr", c.pedm.lr);
  read(pt, "pedm.batch_size", c.pedm.batch_size);
  read(pt, "pedm.replay_capacity", c.pedm.replay_capacity);
  read(pt, "pedm.normalizer_fraction", c.pedm.normalizer_fraction);
  read(pt, "pedm.members", c.pedm_members);
  read(pt, "pedm.steps", c.pedm_steps);
  if (c.pedm_members == 0 || c.pedm.batch_size == 0 || !(c.pedm.lr > 0.0))
    throw ConfigError("config: [pedm] values out of range");

  read(pt, "detector.delta", c.detector.delta);
  if (auto m = pt.get_optional<std::string>("detector.mode")) c.detector.mode = threshold_mode_from_string(*m);
  detail::read_bool(pt, "detector.per_model", c.detector.per_model);
  read(pt, "detector.calib_steps", c.calib_steps);
  read(pt, "detector.calib_stride", c.calib_stride);
  if (!(c.detector.delta > 0.0 && c.detector.delta < 1.0)) throw ConfigError("config: detector.delta must lie in (0, 1)");
  if (c.calib_stride == 0) throw ConfigError("config: detector.calib_stride must be >= 1");

  auto& s = c.suite;
  read(pt, "suite.id_episodes", s.id_episodes);
  read(pt, "suite.perturb_episodes", s.perturb_episodes);
  read(pt, "suite.param_episodes", s.param_episodes);
  read(pt, "suite.scale", s.scale);
  detail::read_bool(pt, "suite.early_stop", s.early_stop);
  read(pt, "suite.dead_zone", s.dead_zone);
  if (pt.get_optional<std::string>("suite.flip_prob")) s.flip_prob = detail::get_or(pt, "suite.flip_prob", 0.0);
  if (pt.get_optional<std::string>("suite.action_sigma"))
    s.action_sigma = detail::get_or(pt, "suite.action_sigma", 0.0);
  read(pt, "suite.state_entropy_threshold", s.state.entropy);
  read(pt, "suite.state_visit_threshold", s.state.visits);
  if (!(s.scale > 0.0)) throw ConfigError("config: suite.scale must be positive");
  if (auto alter = pt.get_child_optional("alter"))
    for (const auto& [key, node] : *alter) s.fixed_params[key] = detail::get_or(pt, "alter." + key, 0.0);
  if (!s.fixed_params.empty()) make_altered_config(c.env, s.fixed_params);  // validates names and ranges
  return c;
}

inline PipelineConfig load_pipeline_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_pipeline_config(ss.str());
}

// ---------------------------------------------------------------- manifest

inline std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// <out>/manifest.json: one entry per artifact with its file checksum.
/// The manifest checksum covers artifact names and checksums only, so it is
/// stable across reruns; timestamps are informational.
class Manifest {
 public:
  explicit Manifest(std::string dir) : dir_(std::move(dir)) {
    const auto p = path();
    if (std::filesystem::exists(p)) {
      try {
        doc_ = json::parse(read_file(p));
      } catch (const json::exception& e) {
        throw IntegrityError("manifest " + p + " is not valid JSON: " + e.what());
      }
    }
    if (!doc_.is_object()) doc_ = json::object();
    if (!doc_.contains("artifacts")) doc_["artifacts"] = json::object();
  }

  std::string path() const { return (std::filesystem::path(dir_) / "manifest.json").string(); }
  std::string file(const std::string& name) const { return (std::filesystem::path(dir_) / name).string(); }
  bool has(const std::string& kind) const { return doc_["artifacts"].contains(kind); }
  const json& entry(const std::string& kind) const { return doc_["artifacts"].at(kind); }

  /// Path of an upstream artifact after checking its bytes against the manifest.
  std::string verified(const std::string& kind) const {
    if (!has(kind))
      throw ConfigError("manifest " + path() + " has no '" + kind + "' artifact; run the producing command first");
    const auto& e = entry(kind);
    const std::string p = file(e.at("file").get<std::string>());
    if (!std::filesystem::exists(p)) throw IntegrityError(kind + " artifact " + p + " is missing");
    const std::string actual = hex64(file_checksum(p));
    if (actual != e.at("checksum").get<std::string>())
      throw IntegrityError(kind + " artifact " + p + " has checksum " + actual + ", manifest records " +
                           e.at("checksum").get<std::string>());
    return p;
  }

  void record(const std::string& kind, const std::string& file_name, json extra = json::object()) {
    extra["file"] = file_name;
    extra["checksum"] = hex64(file_checksum(file(file_name)));
    extra["created"] = utc_timestamp();
    doc_["artifacts"][kind] = std::move(extra);
  }

  /// Artifacts whose kind starts with "report" are outputs of the checksum, not inputs.
  std::string checksum() const {
    Fnv1a h;
    for (const auto& [kind, e] : doc_["artifacts"].items()) {
      if (kind.rfind("report", 0) == 0) continue;
      h.str(kind);
      h.str(e.at("checksum").get<std::string>());
    }
    return hex64(h.value());
  }

  void save() {
    doc_["version"] = 1;
    doc_["checksum"] = checksum();
    doc_["updated"] = utc_timestamp();
    std::filesystem::create_directories(dir_);
    write_file_atomic(path(), doc_.dump(2) + "\n");
  }

 private:
  std::string dir_;
  json doc_;
};

// ---------------------------------------------------------------- commands

struct CliOptions {
  std::string config;
  std::string out = ".";
  std::uint64_t seed = 0;
  std::optional<double> delta;
  std::optional<std::string> mode;
  std::optional<std::size_t> ensemble_size;
  std::optional<std::size_t> calib_steps;
  std::optional<double> scale;
  std::string detector = "cotd";
};

namespace detail {

/// The config given on the command line, else the copy saved by train-agent.
inline PipelineConfig resolve_config(const CliOptions& o, const Manifest& man) {
  if (!o.config.empty()) return load_pipeline_config(o.config);
  const std::string saved = man.file("config.ini");
  if (!std::filesystem::exists(saved)) throw ConfigError("no --config given and " + saved + " does not exist");
  return load_pipeline_config(saved);
}

inline void require_same_env(const std::string& recorded_ini, const EnvConfig& env, const std::string& what) {
  if (hash_string(recorded_ini) != env.checksum())
    throw IntegrityError(what + " was produced for a different env config (" + hex64(hash_string(recorded_ini)) +
                         " vs " + hex64(env.checksum()) + ")");
}

inline std::pair<PolicyNet, EnvConfig> load_policy(const Manifest& man, const PipelineConfig& cfg) {
  const auto ck = Checkpoint::load(man.verified("policy"));
  require_same_env(ck.metadata.at("config").get<std::string>(), cfg.env, "policy");
  return {policy_from_checkpoint(ck).first, cfg.env};
}

inline std::uint64_t stage_seed(std::uint64_t root, const char* stage) { return substream_seed(root, stage); }

inline std::vector<std::string> known_detectors() { return {"cotd", "pedm", "oracle", "constant"}; }

}  // namespace detail

inline int cmd_train_agent(const CliOptions& o, std::ostream& out) {
  if (o.config.empty()) throw ConfigError("train-agent needs --config");
  const auto cfg = load_pipeline_config(o.config);
  Manifest man(o.out);
  std::filesystem::create_directories(o.out);
  write_file_atomic(man.file("config.ini"), read_file(o.config));

  const auto res = train_agent(cfg.env, cfg.agent, detail::stage_seed(o.seed, "agent"));
  policy_checkpoint(res.policy, res.value, cfg.env, o.seed, res.status).save(man.file("policy.ckpt"));
  man.record("config", "config.ini");
  man.record("policy", "policy.ckpt",
             {{"status", res.status}, {"criterion_met", res.criterion_met}, {"final_score", res.final_score},
              {"steps", res.steps}, {"seed", o.seed}, {"env", to_string(cfg.env.id)}});

  std::ostringstream curve;
  curve << "# policy=" << man.entry("policy").at("checksum").get<std::string>() << " env=" << to_string(cfg.env.id)
        << " config=" << hex64(cfg.env.checksum()) << "\n";
  curve << "step,episode_return\n";
  for (const auto& p : res.curve) curve << p.step << "," << format_double(p.episode_return) << "\n";
  write_file_atomic(man.file("training_curve.csv"), curve.str());
  man.record("training-curve", "training_curve.csv");
  man.save();

  out << "policy: " << man.file("policy.ckpt") << " (" << res.status << ", score " << format_double(res.final_score)
      << " after " << res.steps << " steps)\n";
  if (!res.criterion_met) out << "warning: reward criterion not met; manifest records the warning\n";
  return kExitOk;
}

inline int cmd_train_detector(const CliOptions& o, std::ostream& out) {
  Manifest man(o.out);
  const auto cfg = detail::resolve_config(o, man);
  const auto [policy, env] = detail::load_policy(man, cfg);
  if (o.detector == "cotd") {
    const std::size_t n = o.ensemble_size.value_or(cfg.ensemble_size);
    if (n == 0) throw ConfigError("--ensemble-size must be >= 1");
    const auto res = train_cvae_ensemble(policy, env, n, cfg.cvae_steps, cfg.cvae, detail::stage_seed(o.seed, "cvae"));
    ensemble_checkpoint(res.ensemble).save(man.file("ensemble.ckpt"));
    man.record("ensemble", "ensemble.ckpt",
               {{"models", n}, {"steps", cfg.cvae_steps}, {"seed", o.seed},
                {"policy", man.entry("policy").at("checksum")}});
    std::ostringstream log;
    log << "# ensemble=" << man.entry("ensemble").at("checksum").get<std::string>() << "\n";
    log << "update,mean_recon,mean_loss\n";
    for (std::size_t i = 0; i < res.recon_log.size(); ++i)
      log << i << "," << format_double(res.recon_log[i]) << "," << format_double(res.loss_log[i]) << "\n";
    write_file_atomic(man.file("cvae_training.csv"), log.str());
    man.save();
    out << "ensemble: " << man.file("ensemble.ckpt") << " (N=" << n << ", " << res.updates << " updates)\n";
  } else if (o.detector == "pedm") {
    const std::size_t k = o.ensemble_size.value_or(cfg.pedm_members);
    if (k == 0) throw ConfigError("--ensemble-size must be >= 1");
    const auto res = train_dynamics_ensemble(policy, env, k, cfg.pedm_steps, cfg.pedm, detail::stage_seed(o.seed, "pedm"));
    dynamics_checkpoint(res.model).save(man.file("dynamics.ckpt"));
    man.record("dynamics", "dynamics.ckpt",
               {{"members", k}, {"steps", cfg.pedm_steps}, {"seed", o.seed},
                {"policy", man.entry("policy").at("checksum")}});
    man.save();
    out << "dynamics baseline: " << man.file("dynamics.ckpt") << " (K=" << k << ", " << res.updates << " updates)\n";
  } else {
    throw ConfigError("train-detector: --detector must be cotd or pedm, not '" + o.detector + "'");
  }
  return kExitOk;
}

inline int cmd_calibrate(const CliOptions& o, std::ostream& out) {
  Manifest man(o.out);
  const auto cfg = detail::resolve_config(o, man);
  const std::size_t m = o.calib_steps.value_or(cfg.calib_steps);
  if (m < kMinCalibrationSize)
    throw ConfigError("--calib-steps " + std::to_string(m) + " is below the minimum of " +
                      std::to_string(kMinCalibrationSize) + " calibration transitions");
  const auto [policy, env] = detail::load_policy(man, cfg);
  const std::uint64_t seed = detail::stage_seed(o.seed, "calibration");
  CalibrationSet cal;
  std::string kind, file;
  if (o.detector == "cotd") {
    const auto ens = ensemble_from_checkpoint(Checkpoint::load(man.verified("ensemble")));
    cal = build_calibration_set(policy, ens, env, m, seed, cfg.calib_stride);
    kind = "calibration";
    file = "calibration.ckpt";
  } else if (o.detector == "pedm") {
    const auto dyn = dynamics_from_checkpoint(Checkpoint::load(man.verified("dynamics")));
    cal = build_pedm_calibration_set(policy, dyn, env, m, seed, cfg.calib_stride);
    kind = "pedm-calibration";
    file = "pedm_calibration.ckpt";
  } else {
    throw ConfigError("calibrate: --detector must be cotd or pedm, not '" + o.detector + "'");
  }
  calibration_checkpoint(cal).save(man.file(file));
  write_file_atomic(man.file(kind + ".csv"), calibration_csv(cal));
  man.record(kind, file, {{"m", m}, {"n", cal.n}, {"seed", o.seed}, {"stride", cfg.calib_stride}});
  man.save();
  out << kind << ": " << man.file(file) << " (M=" << m << ", " << cal.scores.size() << " scores)\n";
  return kExitOk;
}

inline int cmd_evaluate(const CliOptions& o, std::ostream& out) {
  Manifest man(o.out);
  const auto cfg = detail::resolve_config(o, man);
  DetectorConfig dcfg = cfg.detector;
  if (o.delta) dcfg.delta = *o.delta;
  if (o.mode) dcfg.mode = threshold_mode_from_string(*o.mode);
  if (!(dcfg.delta > 0.0 && dcfg.delta < 1.0))
    throw ConfigError("--delta " + format_double(dcfg.delta) + " must lie strictly inside (0, 1)");
  const auto& names = detail::known_detectors();
  if (std::find(names.begin(), names.end(), o.detector) == names.end())
    throw ConfigError("unknown --detector '" + o.detector + "' (cotd, pedm, oracle, constant)");

  const auto [policy, env] = detail::load_policy(man, cfg);

  SuiteSpec spec = SuiteSpec::defaults(env, detail::stage_seed(o.seed, "suite"));
  spec.id_episodes = cfg.suite.id_episodes;
  spec.perturb_episodes = cfg.suite.perturb_episodes;
  spec.param_episodes = cfg.suite.param_episodes;
  spec.scale = o.scale.value_or(cfg.suite.scale);
  if (!(spec.scale > 0.0)) throw ConfigError("--scale must be positive");
  spec.dead_zone = cfg.suite.dead_zone;
  if (cfg.suite.flip_prob) spec.perturbation.flip_prob = *cfg.suite.flip_prob;
  if (cfg.suite.action_sigma) spec.perturbation.action_sigma = *cfg.suite.action_sigma;
  spec.fixed_params = cfg.suite.fixed_params;
  spec.episode.early_stop = cfg.suite.early_stop;
  spec.episode.thresholds = cfg.suite.state;

  std::optional<CvaeEnsemble> ens;
  if (o.detector == "cotd" || (env.id == EnvId::Gridworld && man.has("ensemble"))) {
    ens = ensemble_from_checkpoint(Checkpoint::load(man.verified("ensemble")));
    if (ens->policy_checksum != policy.checksum()) throw IntegrityError("ensemble was trained for another policy");
    if (env.id == EnvId::Gridworld) spec.episode.visits = ens->visits;
  }

  std::unique_ptr<Detector> det;
  std::optional<DynamicsEnsemble> dyn;
  if (o.detector == "cotd") {
    const auto cal = calibration_from_checkpoint(Checkpoint::load(man.verified("calibration")));
    det = std::make_unique<CotdDetector>(*ens, cal, dcfg);
  } else if (o.detector == "pedm") {
    dyn = dynamics_from_checkpoint(Checkpoint::load(man.verified("dynamics")));
    if (dyn->policy_checksum != policy.checksum()) throw IntegrityError("dynamics baseline was trained for another policy");
    const auto cal = calibration_from_checkpoint(Checkpoint::load(man.verified("pedm-calibration")));
    det = std::make_unique<PedmDetector>(*dyn, cal, dcfg);
  } else if (o.detector == "oracle") {
    det = std::make_unique<OracleDetector>();
  } else {
    det = std::make_unique<ConstantDetector>();
  }

  const auto rep = run_experiment_suite(policy, *det, spec, dcfg);
  const std::string provenance = man.checksum();
  const std::string dir = man.file("report");
  write_report_files(dir, rep, provenance);
  man.record("report-" + o.detector, "report/report_" + o.detector + ".csv",
             {{"delta", dcfg.delta}, {"mode", to_string(dcfg.mode)}, {"scale", spec.scale}, {"seed", o.seed}});
  man.save();

  out << "report: " << dir << " (detector " << o.detector << ", mode " << to_string(dcfg.mode) << ", delta "
      << format_double(dcfg.delta) << ")\n";
  for (const auto& r : rep.rows)
    out << "  " << r.name << " = " << (r.value ? format_double(*r.value) : "-") << (r.notice.empty() ? "" : "  # ")
        << r.notice << "\n";
  return kExitOk;
}

struct ReportSummary {
  std::string provenance;
  std::map<std::string, std::map<std::string, std::string>> values;  // detector -> metric -> value text
};

/// Reads every report_<detector>.csv in `dir`; refuses mixed provenance.
inline ReportSummary read_reports(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw ConfigError("report directory " + dir + " does not exist");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    if (name.rfind("report_", 0) == 0 && e.path().extension() == ".csv") files.push_back(e.path());
  }
  if (files.empty()) throw ConfigError("no report_*.csv files in " + dir + "; run evaluate first");
  std::sort(files.begin(), files.end());
  ReportSummary s;
  for (const auto& f : files) {
    std::istringstream in(read_file(f.string()));
    std::string line;
    std::getline(in, line);
    const auto pos = line.find("provenance=");
    if (line.rfind("# detector=", 0) != 0 || pos == std::string::npos)
      throw FormatError(f.string() + ": missing report header");
    const std::string prov = line.substr(pos + 11);
    if (s.provenance.empty())
      s.provenance = prov;
    else if (s.provenance != prov)
      throw IntegrityError("reports in " + dir + " come from different pipelines (" + s.provenance + " vs " + prov + ")");
    std::string det = f.stem().string().substr(7);
    auto& row = s.values[det];
    while (std::getline(in, line)) {
      if (line.empty() || line[0] == '#' || line.rfind("metric,", 0) == 0) continue;
      const auto comma = line.find(',');
      const auto comma2 = line.find(',', comma + 1);
      row[line.substr(0, comma)] = line.substr(comma + 1, comma2 - comma - 1);
    }
  }
  return s;
}

inline int cmd_report(const CliOptions& o, std::ostream& out) {
  const std::string dir = (std::filesystem::path(o.out) / "report").string();
  const auto s = read_reports(dir);
  // COTD and the baseline always get a row, other detectors when present
  std::vector<std::string> dets{"cotd", "pedm"};
  for (const auto& [d, v] : s.values)
    if (d != "cotd" && d != "pedm") dets.push_back(d);

  std::ostringstream table, csv;
  csv << "# provenance=" << s.provenance << "\n";
  csv << "detector";
  table << "provenance " << s.provenance << "\n";
  table << std::left << std::setw(10) << "detector";
  for (const auto& [key, title] : summary_columns()) {
    table << std::right << std::setw(10) << title;
    csv << "," << title;
  }
  table << "\n";
  csv << "\n";
  for (const auto& d : dets) {
    table << std::left << std::setw(10) << d;
    csv << d;
    const auto it = s.values.find(d);
    for (const auto& [key, title] : summary_columns()) {
      std::string v = "-";
      if (it != s.values.end()) {
        const auto m = it->second.find(key);
        if (m != it->second.end() && !m->second.empty()) v = m->second;
      }
      if (v != "-") {
        std::ostringstream fixed;
        fixed << std::fixed << std::setprecision(3) << std::stod(v);
        table << std::right << std::setw(10) << fixed.str();
      } else {
        table << std::right << std::setw(10) << v;
      }
      csv << "," << (v == "-" ? "" : v);
    }
    table << "\n";
    csv << "\n";
  }
  write_file_atomic((std::filesystem::path(dir) / "summary.csv").string(), csv.str());

  // gnuplot data for every detector's ROC curves in one file
  std::ostringstream plot;
  plot << "# provenance=" << s.provenance << "\n";
  bool first = true;
  for (const auto& d : dets) {
    const auto f = std::filesystem::path(dir) / ("roc_" + d + ".dat");
    if (!std::filesystem::exists(f)) continue;
    std::istringstream in(read_file(f.string()));
    std::string line;
    std::getline(in, line);  // per-file header
    if (!first) plot << "\n\n";
    first = false;
    plot << "# detector " << d << "\n" << in.rdbuf();
  }
  write_file_atomic((std::filesystem::path(dir) / "summary_roc.dat").string(), plot.str());
  out << table.str();
  return kExitOk;
}

// -------------------------------------------------------------------- main

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Conformal OOD detection pipeline for RL transitions"};
  app.require_subcommand(1);
  CliOptions o;
  std::string mode;
  double delta = 0.0, scale = 0.0;
  std::size_t ensemble_size = 0, calib_steps = 0;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "INI config file")->check(CLI::ExistingFile);
    sub->add_option("--out", o.out, "pipeline directory holding manifest.json and artifacts");
    sub->add_option("--seed", o.seed, "root seed");
  };
  auto* train_agent_cmd = app.add_subcommand("train-agent", "train the A2C policy");
  common(train_agent_cmd);
  auto* train_det_cmd = app.add_subcommand("train-detector", "train the CVAE ensemble (or the PEDM baseline)");
  common(train_det_cmd);
  auto* calibrate_cmd = app.add_subcommand("calibrate", "build the calibration set");
  common(calibrate_cmd);
  auto* evaluate_cmd = app.add_subcommand("evaluate", "run the labeled experiment suite");
  common(evaluate_cmd);
  auto* report_cmd = app.add_subcommand("report", "print the AUC summary of all evaluated detectors");
  report_cmd->add_option("--out", o.out, "pipeline directory");

  for (auto* sub : {train_det_cmd, calibrate_cmd, evaluate_cmd})
    sub->add_option("--detector", o.detector, "cotd | pedm (| oracle | constant for evaluate)");
  CLI::Option* ens_opt = train_det_cmd->add_option("--ensemble-size", ensemble_size, "ensemble size N (default 5)");
  CLI::Option* calib_opt = calibrate_cmd->add_option("--calib-steps", calib_steps, "calibration transitions M");
  CLI::Option* delta_opt = evaluate_cmd->add_option("--delta", delta, "significance level in (0, 1)");
  CLI::Option* mode_opt = evaluate_cmd->add_option("--mode", mode, "paper-literal | validity");
  CLI::Option* scale_opt = evaluate_cmd->add_option("--scale", scale, "episode-count scale factor");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }
  if (*ens_opt) o.ensemble_size = ensemble_size;
  if (*calib_opt) o.calib_steps = calib_steps;
  if (*delta_opt) o.delta = delta;
  if (*mode_opt) o.mode = mode;
  if (*scale_opt) o.scale = scale;

  try {
    if (*train_agent_cmd) return cmd_train_agent(o, out);
    if (*train_det_cmd) return cmd_train_detector(o, out);
    if (*calibrate_cmd) return cmd_calibrate(o, out);
    if (*evaluate_cmd) return cmd_evaluate(o, out);
    return cmd_report(o, out);
  } catch (const IntegrityError& e) {
    err << "integrity error: " << e.what() << "\n";
    return kExitIntegrity;
  } catch (const FormatError& e) {
    err << "integrity error: " << e.what() << "\n";
    return kExitIntegrity;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ContractError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const TrainingError& e) {
    err << "training failed: " << e.what() << "\n";
    return kExitFailure;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

}  // namespace cotd
