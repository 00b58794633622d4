#pragma once

// AdamW with decoupled weight decay, sharpness-aware minimization around it,
// and the per-epoch warmup + cosine learning-rate schedule.

#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <string>

#include "guie/error.hpp"
#include "guie/tensor.hpp"

namespace guie {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.1;

  void validate() const {
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("beta1 must lie in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("beta2 must lie in [0, 1)");
    if (!(epsilon > 0.0)) throw ConfigError("adam epsilon must be positive");
    if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) throw ConfigError("weight decay must be >= 0");
  }
};

template <class T>
struct AdamWState {
  TensorList<T> m;
  TensorList<T> v;
  std::uint64_t step_count = 0;
  AdamWConfig config;

  static AdamWState for_params(const TensorList<T>& params, AdamWConfig cfg = {}) {
    cfg.validate();
    return {zeros_like(params), zeros_like(params), 0, cfg};
  }
};

namespace detail {

template <class T>
void require_same_shapes(const TensorList<T>& a, const TensorList<T>& b, const char* what) {
  bool ok = a.size() == b.size();
  for (std::size_t i = 0; ok && i < a.size(); ++i) ok = a[i].rows() == b[i].rows() && a[i].cols() == b[i].cols();
  if (!ok) throw DomainError(std::string(what) + ": tensor shapes differ from parameters");
}

}  // namespace detail

/// One AdamW update in place:
///   m ← β1 m + (1−β1) g,  v ← β2 v + (1−β2) g²
///   p ← p (1 − lr λ) − lr m̂ / (√v̂ + ε)
/// A non-finite gradient throws OptimizerError before anything is touched.
template <class T>
void adamw_step(TensorList<T>& params, const TensorList<T>& grads, AdamWState<T>& state, double lr) {
  detail::require_same_shapes(params, grads, "adamw_step");
  detail::require_same_shapes(params, state.m, "adamw_step state");
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw DomainError("adamw_step: learning rate must be finite and >= 0");
  if (!all_finite(grads)) throw OptimizerError("non-finite gradient");

  const auto& c = state.config;
  const std::uint64_t t = state.step_count + 1;
  const T b1 = static_cast<T>(c.beta1), b2 = static_cast<T>(c.beta2);
  const T bc1 = static_cast<T>(1.0 - std::pow(c.beta1, static_cast<double>(t)));
  const T bc2 = static_cast<T>(1.0 - std::pow(c.beta2, static_cast<double>(t)));
  const T decay = static_cast<T>(1.0 - lr * c.weight_decay);
  const T step = static_cast<T>(lr);
  const T eps = static_cast<T>(c.epsilon);

  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& m = state.m[k];
    auto& v = state.v[k];
    const auto& g = grads[k];
    m = b1 * m + (T(1) - b1) * g;
    v = b2 * v + (T(1) - b2) * g.cwiseProduct(g);
    const auto update = (m.array() / bc1) / ((v.array() / bc2).sqrt() + eps);
    params[k] = (params[k].array() * decay - step * update).matrix();
  }
  state.step_count = t;
}

struct SamConfig {
  double rho = 0.05;
  double grad_norm_floor = 1e-12;

  void validate() const {
    if (!(rho > 0.0) || !std::isfinite(rho)) throw ConfigError("sam rho must be positive and finite");
    if (!(grad_norm_floor >= 0.0)) throw ConfigError("sam grad_norm_floor must be >= 0");
  }
};

/// Global L2 norm over every tensor, accumulated in double.
template <class T>
double global_norm(const TensorList<T>& ts) {
  double sq = 0.0;
  for (const auto& t : ts) sq += t.template cast<double>().squaredNorm();
  return std::sqrt(sq);
}

/// ρ g / ‖g‖ with the global norm.
template <class T>
TensorList<T> sam_perturbation(const TensorList<T>& grads, double rho) {
  const double scale = rho / global_norm(grads);
  TensorList<T> e;
  e.reserve(grads.size());
  for (const auto& g : grads) e.push_back((g.template cast<double>() * scale).template cast<T>());
  return e;
}

template <class T>
using GradientFn = std::function<TensorList<T>(const TensorList<T>&)>;

struct SamStepInfo {
  double first_grad_norm = 0.0;
  bool fallback = false;  // gradient norm under the floor, plain AdamW taken
};

/// SAM around AdamW: g₁ = ∇f(p); if ‖g₁‖ < floor take AdamW on g₁, else
/// g₂ = ∇f(p + ρ g₁/‖g₁‖) and take AdamW at p with g₂. If `grad_eval`
/// throws, params and state are unchanged.
template <class T>
SamStepInfo sam_step(TensorList<T>& params, const GradientFn<T>& grad_eval, AdamWState<T>& state,
                     const SamConfig& cfg, double lr) {
  cfg.validate();
  SamStepInfo info;
  const TensorList<T> g1 = grad_eval(params);
  detail::require_same_shapes(params, g1, "sam_step");
  if (!all_finite(g1)) throw OptimizerError("non-finite gradient");
  info.first_grad_norm = global_norm(g1);
  if (info.first_grad_norm < cfg.grad_norm_floor) {
    info.fallback = true;
    adamw_step(params, g1, state, lr);
    return info;
  }
  TensorList<T> perturbed = params;
  const auto eps = sam_perturbation(g1, cfg.rho);
  for (std::size_t k = 0; k < params.size(); ++k) perturbed[k] += eps[k];
  const TensorList<T> g2 = grad_eval(perturbed);
  adamw_step(params, g2, state, lr);
  return info;
}

struct ScheduleSpec {
  double lr_max = 1e-2;
  double lr_min = 1e-4;
  std::uint32_t warmup_epochs = 3;
  std::uint32_t total_epochs = 1000;

  void validate() const {
    if (!(lr_min > 0.0 && lr_min <= lr_max) || !std::isfinite(lr_max))
      throw ConfigError("schedule needs 0 < lr_min <= lr_max");
    if (!(warmup_epochs < total_epochs)) throw ConfigError("schedule needs warmup_epochs < total_epochs");
  }
};

/// Linear warmup lr_min → lr_max over epochs [0, W), then cosine from lr_max
/// at epoch W down to lr_min at the final epoch. With a single cosine epoch
/// that epoch gets lr_max.
inline double lr_at(std::uint32_t epoch, const ScheduleSpec& spec) {
  spec.validate();
  if (epoch >= spec.total_epochs)
    throw DomainError("lr_at: epoch " + std::to_string(epoch) + " is past the last epoch");
  const double span = spec.lr_max - spec.lr_min;
  const std::uint32_t w = spec.warmup_epochs;
  if (epoch < w) return spec.lr_min + span * static_cast<double>(epoch) / static_cast<double>(w);
  const std::uint32_t cosine_epochs = spec.total_epochs - w;
  if (cosine_epochs == 1) return spec.lr_max;
  const double tau = static_cast<double>(epoch - w);
  const double frac = tau / static_cast<double>(cosine_epochs - 1);
  if (epoch + 1 == spec.total_epochs) return spec.lr_min;
  return spec.lr_min + 0.5 * span * (1.0 + std::cos(std::numbers::pi * frac));
}

}  // namespace guie
