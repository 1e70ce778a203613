#pragma once

// Closed-form MDP environments: CartPole, Pendulum and a stochastic
// gridworld with exact transition kernel. Environment parameters carry their
// training values and alteration ranges; EnvConfig::is_altered() is the
// environment-based ground-truth label.

#include "cotd/hash.hpp"
#include "cotd/rng.hpp"
#include "cotd/tensor.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <cmath>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace cotd {

using StateVector = std::vector<double>;

enum class EnvId { CartPole, Pendulum, Gridworld };

inline std::string to_string(EnvId id) {
  switch (id) {
    case EnvId::CartPole: return "cartpole";
    case EnvId::Pendulum: return "pendulum";
    default: return "gridworld";
  }
}

/// Bad configuration value (unknown key, malformed file, out-of-range number).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A parameter value outside its alteration range.
class RangeError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

inline EnvId env_id_from_string(const std::string& s) {
  if (s == "cartpole") return EnvId::CartPole;
  if (s == "pendulum") return EnvId::Pendulum;
  if (s == "gridworld") return EnvId::Gridworld;
  throw ConfigError("unknown environment '" + s + "' (expected cartpole, pendulum or gridworld)");
}

/// Shortest round-trip decimal form; stable across runs.
inline std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc{}) throw std::runtime_error("format_double failed");
  return std::string(buf, end);
}

struct ParamSpec {
  std::string name;
  double training;
  double lo;
  double hi;
};

/// Training values and alteration ranges of the tunable physical parameters.
inline const std::vector<ParamSpec>& param_table(EnvId id) {
  static const std::vector<ParamSpec> pendulum{
      {"gravity", 10.0, 0.1, 50.0},
      {"mass", 1.0, 0.1, 10.0},
      {"length", 1.0, 0.1, 5.0},
      {"max_velocity", 8.0, 1.0, 20.0},
  };
  static const std::vector<ParamSpec> cartpole{
      {"gravity", 10.0, 0.1, 50.0},
      {"cart_mass", 1.0, 0.1, 10.0},
      {"pole_length", 0.5, 0.1, 5.0},
      {"pole_mass", 0.1, 0.01, 1.0},
  };
  static const std::vector<ParamSpec> none;
  switch (id) {
    case EnvId::Pendulum: return pendulum;
    case EnvId::CartPole: return cartpole;
    default: return none;
  }
}

struct Perturbation {
  double action_sigma = 0.0;  // continuous: additive Gaussian std
  double flip_prob = 0.0;     // discrete: probability of resampling another action

  bool active() const { return action_sigma > 0.0 || flip_prob > 0.0; }
  bool operator==(const Perturbation&) const = default;
};

struct GridworldLayout {
  std::size_t rows = 6;
  std::size_t cols = 6;
  /// Rows whose cells ignore the chosen action and move uniformly in one of
  /// the four directions.
  std::vector<std::size_t> slippery_rows{2};
  double step_reward = -0.01;
  double goal_reward = 1.0;

  bool operator==(const GridworldLayout&) const = default;
};

struct EnvConfig {
  EnvId id = EnvId::CartPole;
  std::map<std::string, double> params;
  Perturbation perturbation;
  double dt = 0.02;
  int max_steps = 500;
  std::uint64_t seed = 0;
  GridworldLayout grid;

  /// Unaltered configuration with the default timestep and episode cap.
  static EnvConfig training(EnvId id) {
    EnvConfig c;
    c.id = id;
    for (const auto& p : param_table(id)) c.params[p.name] = p.training;
    switch (id) {
      case EnvId::CartPole: c.dt = 0.02; c.max_steps = 500; break;
      case EnvId::Pendulum: c.dt = 0.05; c.max_steps = 200; break;
      case EnvId::Gridworld: c.dt = 1.0; c.max_steps = 100; break;
    }
    return c;
  }

  double param(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) throw ConfigError("missing parameter '" + name + "' for " + to_string(id));
    return it->second;
  }

  /// Environment-based ground truth: any physical parameter differs from its
  /// training value, or actions are perturbed.
  bool is_altered() const {
    for (const auto& p : param_table(id))
      if (param(p.name) != p.training) return true;
    return perturbation.active();
  }

  void validate() const {
    for (const auto& [name, v] : params) {
      const ParamSpec* spec = nullptr;
      for (const auto& p : param_table(id))
        if (p.name == name) spec = &p;
      if (!spec) throw ConfigError("unknown parameter '" + name + "' for " + to_string(id));
      if (!(v >= spec->lo && v <= spec->hi))
        throw RangeError(name + "=" + format_double(v) + " outside alteration range [" + format_double(spec->lo) +
                         ", " + format_double(spec->hi) + "]");
    }
    for (const auto& p : param_table(id))
      if (!params.contains(p.name)) throw ConfigError("missing parameter '" + p.name + "'");
    if (perturbation.action_sigma < 0.0) throw ConfigError("perturbation.action_sigma must be >= 0");
    if (perturbation.flip_prob < 0.0 || perturbation.flip_prob > 1.0)
      throw ConfigError("perturbation.flip_prob must lie in [0, 1]");
    if (!(dt > 0.0)) throw ConfigError("env.dt must be positive");
    if (max_steps <= 0) throw ConfigError("env.max_steps must be positive");
    if (id == EnvId::Gridworld) {
      if (grid.rows < 2 || grid.cols < 2) throw ConfigError("gridworld needs at least 2x2 cells");
      for (auto r : grid.slippery_rows)
        if (r >= grid.rows) throw ConfigError("gridworld slippery row out of range");
    }
  }

  boost::property_tree::ptree to_ptree() const;
  static EnvConfig from_ptree(const boost::property_tree::ptree& pt);

  /// Canonical INI text, used as the provenance echo.
  std::string to_ini() const {
    std::ostringstream os;
    boost::property_tree::write_ini(os, to_ptree());
    return os.str();
  }
  std::uint64_t checksum() const { return hash_string(to_ini()); }

  bool operator==(const EnvConfig&) const = default;
};

/// Returns `base` with the given parameters replaced, validated against the
/// alteration ranges.
inline EnvConfig make_altered_config(const EnvConfig& base, const std::map<std::string, double>& alterations) {
  if (base.is_altered()) throw ConfigError("make_altered_config: base must be a training config");
  EnvConfig c = base;
  for (const auto& [name, v] : alterations) {
    if (!c.params.contains(name)) throw ConfigError("unknown parameter '" + name + "' for " + to_string(c.id));
    c.params[name] = v;
  }
  c.validate();
  return c;
}

struct ActionValue {
  enum class Kind { Discrete, Continuous };
  Kind kind = Kind::Discrete;
  int index = 0;
  double value = 0.0;

  static ActionValue discrete(int i) { return {Kind::Discrete, i, 0.0}; }
  static ActionValue continuous(double v) { return {Kind::Continuous, 0, v}; }
  bool is_discrete() const { return kind == Kind::Discrete; }
  bool operator==(const ActionValue&) const = default;
};

struct ActionSpace {
  bool discrete = true;
  int arity = 2;
  double lo = 0.0;
  double hi = 0.0;
};

inline std::size_t state_dim(EnvId id) {
  switch (id) {
    case EnvId::CartPole: return 4;
    case EnvId::Pendulum: return 3;
    default: return 2;
  }
}

inline ActionSpace action_space(EnvId id) {
  switch (id) {
    case EnvId::CartPole: return {true, 2, 0.0, 0.0};
    case EnvId::Pendulum: return {false, 0, -2.0, 2.0};
    default: return {true, 4, 0.0, 0.0};
  }
}

// ---------------------------------------------------------------- gridworld

enum GridAction : int { kUp = 0, kDown = 1, kLeft = 2, kRight = 3 };

/// Exact transition kernel of the gridworld. Cells are indexed row-major.
struct GridworldSpec {
  std::size_t rows = 0, cols = 0;
  std::size_t start = 0;
  std::size_t goal = 0;
  /// kernel[cell][action] = dense successor distribution over cells.
  std::vector<std::vector<std::vector<double>>> kernel;
  std::vector<bool> high_entropy;
  /// Reward received on entering each cell.
  std::vector<double> reward;
  std::vector<bool> terminal;

  std::size_t cells() const { return rows * cols; }
  std::size_t cell(std::size_t r, std::size_t c) const { return r * cols + c; }

  static GridworldSpec from_layout(const GridworldLayout& l) {
    GridworldSpec s;
    s.rows = l.rows;
    s.cols = l.cols;
    s.start = s.cell(l.rows - 1, 0);
    s.goal = s.cell(0, l.cols - 1);
    const std::size_t n = s.cells();
    s.high_entropy.assign(n, false);
    s.terminal.assign(n, false);
    s.terminal[s.goal] = true;
    s.reward.assign(n, l.step_reward);
    s.reward[s.goal] = l.goal_reward;
    for (auto r : l.slippery_rows)
      for (std::size_t c = 0; c < l.cols; ++c) s.high_entropy[s.cell(r, c)] = true;

    s.kernel.assign(n, std::vector<std::vector<double>>(4, std::vector<double>(n, 0.0)));
    for (std::size_t cell = 0; cell < n; ++cell) {
      for (int a = 0; a < 4; ++a) {
        auto& dist = s.kernel[cell][static_cast<std::size_t>(a)];
        if (s.terminal[cell]) {
          dist[cell] = 1.0;
        } else if (s.high_entropy[cell]) {
          for (int m = 0; m < 4; ++m) dist[s.move(cell, m)] += 0.25;
        } else {
          dist[s.move(cell, a)] = 1.0;
        }
      }
    }
    return s;
  }

  /// Deterministic successor of moving in direction `a`; walls keep the agent in place.
  std::size_t move(std::size_t cell, int a) const {
    std::size_t r = cell / cols, c = cell % cols;
    switch (a) {
      case kUp: if (r > 0) --r; break;
      case kDown: if (r + 1 < rows) ++r; break;
      case kLeft: if (c > 0) --c; break;
      case kRight: if (c + 1 < cols) ++c; break;
      default: throw ContractError("gridworld: action " + std::to_string(a) + " out of range");
    }
    return this->cell(r, c);
  }

  StateVector state_of(std::size_t cell) const {
    return {static_cast<double>(cell / cols) / static_cast<double>(rows - 1),
            static_cast<double>(cell % cols) / static_cast<double>(cols - 1)};
  }

  std::size_t cell_of(const StateVector& s) const {
    if (s.size() != 2) throw ContractError("gridworld: state must have 2 coordinates");
    const double r = std::round(s[0] * static_cast<double>(rows - 1));
    const double c = std::round(s[1] * static_cast<double>(cols - 1));
    if (r < 0 || c < 0 || r >= static_cast<double>(rows) || c >= static_cast<double>(cols))
      throw ContractError("gridworld: state outside grid");
    return cell(static_cast<std::size_t>(r), static_cast<std::size_t>(c));
  }
};

/// Kernel for `layout`, cached per thread.
inline const GridworldSpec& gridworld_spec(const GridworldLayout& layout) {
  thread_local std::optional<std::pair<GridworldLayout, GridworldSpec>> cache;
  if (!cache || !(cache->first == layout)) cache.emplace(layout, GridworldSpec::from_layout(layout));
  return cache->second;
}

/// Shannon entropy (nats) of the successor distribution of (cell, action).
inline double gridworld_entropy(const GridworldSpec& spec, std::size_t cell, int action) {
  if (cell >= spec.cells() || action < 0 || action > 3) throw ContractError("gridworld_entropy: bad cell/action");
  double h = 0.0;
  for (double p : spec.kernel[cell][static_cast<std::size_t>(action)])
    if (p > 0.0) h -= p * std::log(p);
  return h;
}

// --------------------------------------------------------------- dynamics

struct StepResult {
  StateVector next;
  double reward = 0.0;
  bool terminated = false;
};

namespace detail {

inline double angle_normalize(double x) {
  constexpr double pi = std::numbers::pi;
  return std::fmod(std::fmod(x + pi, 2 * pi) + 2 * pi, 2 * pi) - pi;
}

inline void check_action(const EnvConfig& c, const ActionValue& a) {
  const auto space = action_space(c.id);
  if (space.discrete != a.is_discrete())
    throw ContractError(to_string(c.id) + ": wrong action kind");
  if (space.discrete && (a.index < 0 || a.index >= space.arity))
    throw ContractError(to_string(c.id) + ": action index " + std::to_string(a.index) + " outside arity " +
                        std::to_string(space.arity));
  if (!space.discrete && !std::isfinite(a.value)) throw ContractError(to_string(c.id) + ": non-finite action");
}

inline void check_state(const EnvConfig& c, const StateVector& s) {
  if (s.size() != state_dim(c.id))
    throw ContractError(to_string(c.id) + ": state has " + std::to_string(s.size()) + " values, expected " +
                        std::to_string(state_dim(c.id)));
}

}  // namespace detail

inline constexpr double kCartPoleForce = 10.0;
inline constexpr double kCartPoleAngleLimit = 12.0 * 2.0 * std::numbers::pi / 360.0;
inline constexpr double kCartPolePositionLimit = 2.4;
inline constexpr double kPendulumMaxTorque = 2.0;

/// Initial state from the environment's standard start distribution.
inline StateVector env_reset(const EnvConfig& config, std::uint64_t seed) {
  Rng rng(seed);
  switch (config.id) {
    case EnvId::CartPole: {
      StateVector s(4);
      for (double& v : s) v = uniform(rng, -0.05, 0.05);
      return s;
    }
    case EnvId::Pendulum: {
      const double th = uniform(rng, -std::numbers::pi, std::numbers::pi);
      const double w = uniform(rng, -1.0, 1.0);
      return {std::cos(th), std::sin(th), w};
    }
    case EnvId::Gridworld: {
      const auto& spec = gridworld_spec(config.grid);
      return spec.state_of(spec.start);
    }
  }
  return {};
}

/// One transition. Step caps are the episode's concern (see Environment).
inline StepResult env_step(const EnvConfig& config, const StateVector& state, const ActionValue& action, Rng& rng) {
  detail::check_state(config, state);
  detail::check_action(config, action);
  StepResult out;
  switch (config.id) {
    case EnvId::CartPole: {
      const double g = config.param("gravity");
      const double mc = config.param("cart_mass");
      const double mp = config.param("pole_mass");
      const double l = config.param("pole_length");
      const double total = mc + mp;
      const double pml = mp * l;
      const double force = action.index == 1 ? kCartPoleForce : -kCartPoleForce;
      double x = state[0], x_dot = state[1], th = state[2], th_dot = state[3];
      const double ct = std::cos(th), st = std::sin(th);
      const double temp = (force + pml * th_dot * th_dot * st) / total;
      const double th_acc = (g * st - ct * temp) / (l * (4.0 / 3.0 - mp * ct * ct / total));
      const double x_acc = temp - pml * th_acc * ct / total;
      // semi-implicit Euler
      x_dot += config.dt * x_acc;
      x += config.dt * x_dot;
      th_dot += config.dt * th_acc;
      th += config.dt * th_dot;
      out.next = {x, x_dot, th, th_dot};
      out.terminated = std::abs(x) > kCartPolePositionLimit || std::abs(th) > kCartPoleAngleLimit;
      out.reward = 1.0;
      return out;
    }
    case EnvId::Pendulum: {
      const double g = config.param("gravity");
      const double m = config.param("mass");
      const double l = config.param("length");
      const double vmax = config.param("max_velocity");
      const double th = std::atan2(state[1], state[0]);
      const double w = state[2];
      const double u = std::clamp(action.value, -kPendulumMaxTorque, kPendulumMaxTorque);
      const double a = detail::angle_normalize(th);
      out.reward = -(a * a + 0.1 * w * w + 0.001 * u * u);
      double w2 = w + (3.0 * g / (2.0 * l) * std::sin(th) + 3.0 / (m * l * l) * u) * config.dt;
      w2 = std::clamp(w2, -vmax, vmax);
      const double th2 = th + w2 * config.dt;
      out.next = {std::cos(th2), std::sin(th2), w2};
      return out;
    }
    case EnvId::Gridworld: {
      const auto& spec = gridworld_spec(config.grid);
      const std::size_t cell = spec.cell_of(state);
      const auto& dist = spec.kernel[cell][static_cast<std::size_t>(action.index)];
      double u = uniform(rng, 0.0, 1.0);
      std::size_t next = cell;
      for (std::size_t k = 0; k < dist.size(); ++k) {
        if (dist[k] <= 0.0) continue;
        next = k;
        if (u < dist[k]) break;
        u -= dist[k];
      }
      out.next = spec.state_of(next);
      out.reward = spec.reward[next];
      out.terminated = spec.terminal[next];
      return out;
    }
  }
  return out;
}

/// Action perturbation: Gaussian noise then clipping for continuous actions,
/// resampling among the other actions with probability p for discrete ones.
inline ActionValue perturb_action(const ActionValue& action, const EnvConfig& config, Rng& rng) {
  const auto space = action_space(config.id);
  if (action.is_discrete()) {
    if (config.perturbation.flip_prob <= 0.0 || space.arity < 2) return action;
    if (uniform(rng, 0.0, 1.0) >= config.perturbation.flip_prob) return action;
    const int k = static_cast<int>(rng() % static_cast<std::uint64_t>(space.arity - 1));
    return ActionValue::discrete(k >= action.index ? k + 1 : k);
  }
  if (config.perturbation.action_sigma <= 0.0) return action;
  const double v = action.value + normal(rng, 0.0, config.perturbation.action_sigma);
  return ActionValue::continuous(std::clamp(v, space.lo, space.hi));
}

/// An episode in progress: owns its config, rng stream and step counter.
class Environment {
 public:
  Environment(EnvConfig config, std::uint64_t seed)
      : config_(std::move(config)), rng_(splitmix64(seed)), state_(env_reset(config_, seed)) {}

  struct Step {
    StateVector prev;
    ActionValue action;  // as executed, after any perturbation
    StateVector next;
    double reward = 0.0;
    bool terminated = false;
    bool truncated = false;
    bool done() const { return terminated || truncated; }
  };

  const StateVector& state() const { return state_; }
  const EnvConfig& config() const { return config_; }
  int steps() const { return steps_; }

  /// Applies the configured action perturbation, then steps the dynamics.
  Step step(const ActionValue& chosen) {
    Step s;
    s.prev = state_;
    s.action = config_.perturbation.active() ? perturb_action(chosen, config_, rng_) : chosen;
    auto r = env_step(config_, state_, s.action, rng_);
    ++steps_;
    s.next = r.next;
    s.reward = r.reward;
    s.terminated = r.terminated;
    s.truncated = !r.terminated && steps_ >= config_.max_steps;
    state_ = std::move(r.next);
    return s;
  }

 private:
  EnvConfig config_;
  Rng rng_;
  StateVector state_;
  int steps_ = 0;
};

// ---------------------------------------------------------- serialization

inline boost::property_tree::ptree EnvConfig::to_ptree() const {
  boost::property_tree::ptree pt;
  pt.put("env.id", to_string(id));
  pt.put("env.dt", format_double(dt));
  pt.put("env.max_steps", max_steps);
  pt.put("env.seed", seed);
  for (const auto& p : param_table(id)) pt.put("params." + p.name, format_double(param(p.name)));
  pt.put("perturbation.action_sigma", format_double(perturbation.action_sigma));
  pt.put("perturbation.flip_prob", format_double(perturbation.flip_prob));
  if (id == EnvId::Gridworld) {
    pt.put("gridworld.rows", grid.rows);
    pt.put("gridworld.cols", grid.cols);
    std::string rows;
    for (std::size_t i = 0; i < grid.slippery_rows.size(); ++i)
      rows += (i ? "," : "") + std::to_string(grid.slippery_rows[i]);
    pt.put("gridworld.slippery_rows", rows);
    pt.put("gridworld.step_reward", format_double(grid.step_reward));
    pt.put("gridworld.goal_reward", format_double(grid.goal_reward));
  }
  return pt;
}

namespace detail {

template <class T>
T get_or(const boost::property_tree::ptree& pt, const std::string& key, T fallback) {
  auto v = pt.get_optional<std::string>(key);
  if (!v) return fallback;
  std::istringstream is(*v);
  T out{};
  is >> out;
  if (!is || !(is >> std::ws).eof()) throw ConfigError("config key '" + key + "': cannot parse '" + *v + "'");
  return out;
}

}  // namespace detail

inline EnvConfig EnvConfig::from_ptree(const boost::property_tree::ptree& pt) {
  auto id_str = pt.get_optional<std::string>("env.id");
  if (!id_str) throw ConfigError("config: missing env.id");
  EnvConfig c = training(env_id_from_string(*id_str));
  c.dt = detail::get_or(pt, "env.dt", c.dt);
  c.max_steps = detail::get_or(pt, "env.max_steps", c.max_steps);
  c.seed = detail::get_or<std::uint64_t>(pt, "env.seed", c.seed);
  if (auto params = pt.get_child_optional("params")) {
    for (const auto& [key, node] : *params) {
      if (!c.params.contains(key)) throw ConfigError("unknown parameter '" + key + "' for " + *id_str);
      c.params[key] = detail::get_or(pt, "params." + key, 0.0);
    }
  }
  c.perturbation.action_sigma = detail::get_or(pt, "perturbation.action_sigma", 0.0);
  c.perturbation.flip_prob = detail::get_or(pt, "perturbation.flip_prob", 0.0);
  c.grid.rows = detail::get_or<std::size_t>(pt, "gridworld.rows", c.grid.rows);
  c.grid.cols = detail::get_or<std::size_t>(pt, "gridworld.cols", c.grid.cols);
  if (auto rows = pt.get_optional<std::string>("gridworld.slippery_rows")) {
    c.grid.slippery_rows.clear();
    std::stringstream ss(*rows);
    std::string item;
    while (std::getline(ss, item, ','))
      if (!item.empty()) c.grid.slippery_rows.push_back(static_cast<std::size_t>(std::stoul(item)));
  }
  c.grid.step_reward = detail::get_or(pt, "gridworld.step_reward", c.grid.step_reward);
  c.grid.goal_reward = detail::get_or(pt, "gridworld.goal_reward", c.grid.goal_reward);
  c.validate();
  return c;
}

}  // namespace cotd
