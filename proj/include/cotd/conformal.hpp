#pragma once

// Inductive conformal calibration over CVAE reconstruction errors and the
// ensemble set-prediction OOD verdict.

#include "cotd/agent.hpp"
#include "cotd/checkpoint.hpp"
#include "cotd/cvae.hpp"
#include "cotd/envs.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

namespace cotd {

/// Artifacts that do not belong together (wrong ensemble, wrong env).
class IntegrityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ThresholdMode { PaperLiteral, Validity };

inline std::string to_string(ThresholdMode m) { return m == ThresholdMode::PaperLiteral ? "paper-literal" : "validity"; }

inline ThresholdMode threshold_mode_from_string(const std::string& s) {
  if (s == "paper-literal") return ThresholdMode::PaperLiteral;
  if (s == "validity") return ThresholdMode::Validity;
  throw ConfigError("unknown threshold mode '" + s + "' (expected paper-literal or validity)");
}

struct DetectorConfig {
  double delta = 0.05;
  ThresholdMode mode = ThresholdMode::Validity;
  /// Calibrate each model against its own M scores instead of the pooled set.
  bool per_model = false;
};

struct Provenance {
  std::uint64_t env_checksum = 0;       // training env config
  std::uint64_t ensemble_checksum = 0;
  bool operator==(const Provenance&) const = default;
};

struct CalibrationSet {
  std::vector<double> scores;                 // pooled, ascending, size m * n
  std::vector<std::vector<double>> per_model; // n columns, each ascending, size m
  std::size_t m = 0;
  std::size_t n = 0;
  Provenance provenance;

  /// rows[i][k] = model k's score on calibration transition i.
  static CalibrationSet from_scores(const std::vector<std::vector<double>>& rows, Provenance prov) {
    CalibrationSet c;
    c.m = rows.size();
    c.n = rows.empty() ? 0 : rows.front().size();
    c.provenance = prov;
    c.per_model.assign(c.n, {});
    for (const auto& r : rows) {
      if (r.size() != c.n) throw ContractError("calibration: ragged score matrix");
      for (std::size_t k = 0; k < c.n; ++k) {
        if (!(r[k] >= 0.0) || !std::isfinite(r[k])) throw ContractError("calibration: scores must be finite and >= 0");
        c.per_model[k].push_back(r[k]);
        c.scores.push_back(r[k]);
      }
    }
    std::sort(c.scores.begin(), c.scores.end());
    for (auto& col : c.per_model) std::sort(col.begin(), col.end());
    return c;
  }

  void validate() const {
    if (scores.size() != m * n) throw ContractError("calibration: expected m*n scores");
    if (!std::is_sorted(scores.begin(), scores.end())) throw ContractError("calibration: scores not sorted");
    if (!scores.empty() && scores.front() < 0.0) throw ContractError("calibration: negative score");
  }
};

/// 1-indexed rank of the threshold among `total` sorted scores.
/// paper-literal: floor(delta * total); validity: ceil((1 - delta)(total + 1)).
inline std::size_t threshold_rank(std::size_t total, double delta, ThresholdMode mode) {
  if (!(delta > 0.0 && delta < 1.0)) throw ConfigError("delta must lie strictly inside (0, 1)");
  // the 1e-9 guards keep exact products such as 0.95 * 101 from rounding the wrong way
  const double t = static_cast<double>(total);
  const double raw = mode == ThresholdMode::PaperLiteral ? std::floor(delta * t + 1e-9)
                                                         : std::ceil((1.0 - delta) * (t + 1.0) - 1e-9);
  if (raw < 1.0 || raw > t)
    throw ConfigError(to_string(mode) + " threshold rank " + format_double(raw) + " outside [1, " +
                      std::to_string(total) + "] for delta " + format_double(delta));
  return static_cast<std::size_t>(raw);
}

inline double threshold_from_sorted(const std::vector<double>& sorted, const DetectorConfig& cfg) {
  return sorted[threshold_rank(sorted.size(), cfg.delta, cfg.mode) - 1];
}

/// Pooled threshold (the per-model option is served by model_thresholds).
inline double conformal_threshold(const CalibrationSet& cal, const DetectorConfig& cfg) {
  cal.validate();
  return threshold_from_sorted(cal.scores, cfg);
}

/// One threshold per model: identical pooled thresholds unless cfg.per_model.
inline std::vector<double> model_thresholds(const CalibrationSet& cal, const DetectorConfig& cfg) {
  if (!cfg.per_model) return std::vector<double>(cal.n, conformal_threshold(cal, cfg));
  std::vector<double> out;
  for (const auto& col : cal.per_model) out.push_back(threshold_from_sorted(col, cfg));
  return out;
}

struct Verdict {
  bool is_ood = false;
  std::vector<std::size_t> conforming;  // indices of models with score < threshold
  double min = 0.0, mean = 0.0, max = 0.0;
  double threshold = 0.0;
};

/// Gamma = {i : errors[i] < thresholds[i]}; OOD iff Gamma is empty.
inline Verdict detect_ood(const std::vector<double>& errors, const std::vector<double>& thresholds) {
  if (errors.empty() || errors.size() != thresholds.size())
    throw ContractError("detect_ood: expected " + std::to_string(thresholds.size()) + " scores, got " +
                        std::to_string(errors.size()));
  Verdict v;
  v.min = *std::min_element(errors.begin(), errors.end());
  v.max = *std::max_element(errors.begin(), errors.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < errors.size(); ++i) {
    sum += errors[i];
    if (errors[i] < thresholds[i]) v.conforming.push_back(i);
  }
  v.mean = sum / static_cast<double>(errors.size());
  v.threshold = *std::max_element(thresholds.begin(), thresholds.end());
  v.is_ood = v.conforming.empty();
  return v;
}

inline Verdict detect_ood(const std::vector<double>& errors, double threshold, std::size_t n) {
  if (errors.size() != n)
    throw ContractError("detect_ood: expected " + std::to_string(n) + " scores, got " + std::to_string(errors.size()));
  return detect_ood(errors, std::vector<double>(n, threshold));
}

enum class Aggregation { Mean, Min };

inline double continuous_score(const std::vector<double>& errors, Aggregation agg = Aggregation::Mean) {
  if (errors.empty()) throw ContractError("continuous_score: no scores");
  if (agg == Aggregation::Min) return *std::min_element(errors.begin(), errors.end());
  double s = 0.0;
  for (double e : errors) s += e;
  return s / static_cast<double>(errors.size());
}

inline Provenance provenance_of(const CvaeEnsemble& ens) {
  return {hash_string(ens.config_ini), ens.checksum()};
}

/// Refuses a calibration set produced with another ensemble or env config.
inline void verify_provenance(const CalibrationSet& cal, const CvaeEnsemble& ens) {
  const Provenance p = provenance_of(ens);
  if (cal.provenance.ensemble_checksum != p.ensemble_checksum)
    throw IntegrityError("calibration set was built for ensemble " + hex64(cal.provenance.ensemble_checksum) +
                         ", not " + hex64(p.ensemble_checksum));
  if (cal.provenance.env_checksum != p.env_checksum)
    throw IntegrityError("calibration set was built for env config " + hex64(cal.provenance.env_checksum) +
                         ", not " + hex64(p.env_checksum));
}

inline constexpr std::size_t kMinCalibrationSize = 100;

/// Scores M fresh on-policy transitions (seed stream disjoint from detector
/// training) with every model and pools them. With stride k only every k-th
/// transition of the rollouts is kept, spreading the sample over more episodes.
inline CalibrationSet build_calibration_set(const PolicyNet& policy, const CvaeEnsemble& ens, const EnvConfig& config,
                                            std::size_t m, std::uint64_t seed, std::size_t stride = 1) {
  if (m < kMinCalibrationSize)
    throw ConfigError("calibration needs M >= " + std::to_string(kMinCalibrationSize) + " transitions, got " +
                      std::to_string(m));
  if (config.is_altered()) throw ContractError("calibration requires the unaltered training config");
  if (policy.checksum() != ens.policy_checksum) throw IntegrityError("calibration: policy does not match ensemble");
  if (config.checksum() != hash_string(ens.config_ini))
    throw IntegrityError("calibration: env config does not match the one the ensemble was trained on");
  if (stride == 0) throw ConfigError("calibration stride must be >= 1");
  const auto stream = collect_transitions(policy, config, m * stride, seed, "calibration");
  std::vector<StateVector> s1, s2;
  for (std::size_t i = 0; i < stream.size(); i += stride) {
    s1.push_back(stream[i].s1);
    s2.push_back(stream[i].s2);
  }
  return CalibrationSet::from_scores(reconstruction_errors(ens, s1, s2), provenance_of(ens));
}

// ------------------------------------------------------------ persistence

inline Checkpoint calibration_checkpoint(const CalibrationSet& cal) {
  Checkpoint c;
  c.metadata["kind"] = "calibration";
  c.metadata["m"] = cal.m;
  c.metadata["n"] = cal.n;
  c.metadata["env_checksum"] = hex64(cal.provenance.env_checksum);
  c.metadata["ensemble_checksum"] = hex64(cal.provenance.ensemble_checksum);
  c.add("scores", Tensor::vector(cal.scores));
  Tensor cols(Shape{cal.n, cal.m});
  for (std::size_t k = 0; k < cal.n; ++k)
    for (std::size_t i = 0; i < cal.m; ++i) cols.at(k, i) = cal.per_model[k][i];
  c.add("per_model", std::move(cols));
  return c;
}

inline CalibrationSet calibration_from_checkpoint(const Checkpoint& c) {
  if (c.metadata.value("kind", "") != "calibration") throw FormatError("checkpoint is not a calibration set");
  CalibrationSet cal;
  cal.m = c.metadata.at("m").get<std::size_t>();
  cal.n = c.metadata.at("n").get<std::size_t>();
  cal.provenance.env_checksum = std::stoull(c.metadata.at("env_checksum").get<std::string>(), nullptr, 16);
  cal.provenance.ensemble_checksum = std::stoull(c.metadata.at("ensemble_checksum").get<std::string>(), nullptr, 16);
  cal.scores = c.get("scores").values();
  const Tensor& cols = c.get("per_model");
  if (cols.shape() != Shape{cal.n, cal.m}) throw FormatError("calibration: per-model block has wrong shape");
  for (std::size_t k = 0; k < cal.n; ++k) {
    std::vector<double> col(cal.m);
    for (std::size_t i = 0; i < cal.m; ++i) col[i] = cols.at(k, i);
    cal.per_model.push_back(std::move(col));
  }
  try {
    cal.validate();
  } catch (const ContractError& e) {
    throw FormatError(e.what());
  }
  return cal;
}

/// rank,score (1-indexed, ascending)
inline std::string calibration_csv(const CalibrationSet& cal) {
  std::ostringstream out;
  out << "# m=" << cal.m << " n=" << cal.n << " ensemble=" << hex64(cal.provenance.ensemble_checksum)
      << " env=" << hex64(cal.provenance.env_checksum) << "\n";
  out << "rank,score\n";
  for (std::size_t i = 0; i < cal.scores.size(); ++i) out << i + 1 << "," << format_double(cal.scores[i]) << "\n";
  return out.str();
}

}  // namespace cotd
