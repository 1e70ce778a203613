#pragma once

#include "cotd/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace cotd {

struct AdamHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Moment accumulators mirror the parameter list they were created for.
struct AdamState {
  AdamHyper hyper;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::uint64_t t = 0;

  AdamState() = default;
  /// `params` is any range of (const) Tensor pointers.
  template <class Params>
  AdamState(const Params& params, AdamHyper h) : hyper(h) {
    for (const auto* p : params) {
      m.emplace_back(p->shape(), 0.0);
      v.emplace_back(p->shape(), 0.0);
    }
  }
};

namespace detail {
inline void check_aligned(std::span<Tensor* const> params, std::span<const Tensor> grads, std::size_t slots,
                          const char* who) {
  if (params.size() != grads.size() || params.size() != slots)
    throw DimensionError(std::string(who) + ": " + std::to_string(params.size()) + " params, " +
                         std::to_string(grads.size()) + " grads, " + std::to_string(slots) + " state slots");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (params[i]->shape() != grads[i].shape())
      throw DimensionError(std::string(who) + ": param " + std::to_string(i) + " shape " +
                           shape_str(params[i]->shape()) + " vs grad " + shape_str(grads[i].shape()));
}
}  // namespace detail

/// Bias-corrected Adam update, in place.
inline void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state) {
  detail::check_aligned(params, grads, state.m.size(), "adam_step");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (state.m[i].shape() != params[i]->shape())
      throw DimensionError("adam_step: state slot " + std::to_string(i) + " shape mismatch");
  state.t += 1;
  const auto& h = state.hyper;
  const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i]->data();
    auto g = grads[i].data();
    auto m = state.m[i].data();
    auto v = state.v[i].data();
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = h.beta1 * m[k] + (1.0 - h.beta1) * g[k];
      v[k] = h.beta2 * v[k] + (1.0 - h.beta2) * g[k] * g[k];
      const double mhat = m[k] / bc1;
      const double vhat = v[k] / bc2;
      p[k] -= h.lr * mhat / (std::sqrt(vhat) + h.eps);
    }
  }
}

inline void sgd_step(std::span<Tensor* const> params, std::span<const Tensor> grads, double lr) {
  detail::check_aligned(params, grads, params.size(), "sgd_step");
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i]->data();
    auto g = grads[i].data();
    for (std::size_t k = 0; k < p.size(); ++k) p[k] -= lr * g[k];
  }
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
inline double clip_global_norm(std::span<Tensor> grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads)
    for (double x : g.values()) sq += x * x;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double s = max_norm / norm;
    for (auto& g : grads)
      for (double& x : g.values()) x *= s;
  }
  return norm;
}

/// Throws TrainingError naming `what` if any parameter is NaN/Inf.
inline void ensure_finite(std::span<Tensor* const> params, const std::string& what) {
  for (const auto* p : params)
    if (!p->all_finite()) throw TrainingError(what + ": non-finite parameter after update");
}

inline constexpr double kGradClipNorm = 5.0;

}  // namespace cotd
