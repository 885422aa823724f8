#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include "panopix/common.hpp"
#include "panopix/encoder.hpp"
#include "panopix/tensor.hpp"

// Optimizers and learning-rate schedules. All updates are in place on
// path-keyed tensor maps; velocity state lives outside the parameters so a
// training run owns exactly one OptimState per optimized parameter set.

namespace panopix {

enum class OptimKind { SgdMomentum, Lars };
enum class LrSchedule { CosineRestarts, Step, Constant };

struct OptimConfig {
  OptimKind kind = OptimKind::SgdMomentum;
  double base_lr = 1e-2;
  double momentum = 0.9;
  double weight_decay = 0.0;
  double trust_coefficient = 1e-3;  // LARS only
  LrSchedule schedule = LrSchedule::Constant;
  int64_t restart_period = 10;  // epochs between cosine restarts
  std::vector<int64_t> step_milestones;
  double step_factor = 0.1;
  double min_lr = 0.0;

  void validate() const {
    // Zero is allowed: a zero-rate run is the standard stationarity probe.
    if (!(base_lr >= 0)) throw DataError("OptimConfig: base_lr must be non-negative");
    if (!(momentum >= 0.0 && momentum < 1.0))
      throw DataError("OptimConfig: momentum must be in [0, 1)");
    if (!(weight_decay >= 0)) throw DataError("OptimConfig: weight_decay must be non-negative");
    if (!(trust_coefficient >= 0))
      throw DataError("OptimConfig: trust_coefficient must be non-negative");
    if (schedule == LrSchedule::CosineRestarts && restart_period < 1)
      throw DataError("OptimConfig: restart_period must be at least 1");
    if (!(step_factor > 0)) throw DataError("OptimConfig: step_factor must be positive");
    if (!(min_lr >= 0) || min_lr > base_lr)
      throw DataError("OptimConfig: min_lr must be in [0, base_lr]");
    for (size_t i = 1; i < step_milestones.size(); ++i)
      if (step_milestones[i] <= step_milestones[i - 1])
        throw DataError("OptimConfig: step_milestones must be strictly ascending");
  }
};

struct EmaConfig {
  double beta = 0.99;

  void validate() const {
    if (!(beta >= 0.0 && beta <= 1.0)) throw DataError("EmaConfig: beta must be in [0, 1]");
  }
};

// Cosine annealing with warm restarts. Exactly base_lr at every multiple of
// the period, decaying toward min_lr within each period.
inline double cosine_restart_lr(double base_lr, double min_lr, int64_t t,
                                int64_t steps_per_period) {
  if (steps_per_period < 1) throw DataError("cosine_restart_lr: period must be at least 1");
  if (t < 0) throw DataError("cosine_restart_lr: negative step");
  const int64_t p = t % steps_per_period;
  if (p == 0) return base_lr;
  const double frac = static_cast<double>(p) / static_cast<double>(steps_per_period);
  return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + std::cos(std::numbers::pi_v<double> * frac));
}

// Piecewise-constant decay: one factor per milestone at or below t.
inline double step_schedule_lr(double base_lr, int64_t t, const std::vector<int64_t>& milestones,
                               double factor) {
  for (size_t i = 1; i < milestones.size(); ++i)
    if (milestones[i] <= milestones[i - 1])
      throw DataError("step_schedule_lr: milestones must be strictly ascending");
  double lr = base_lr;
  for (int64_t m : milestones)
    if (t >= m) lr *= factor;
  return lr;
}

template <typename T>
struct OptimState {
  std::map<std::string, Tensor<T>> velocity;
};

namespace detail {

template <typename T>
const Tensor<T>& find_grad(const std::map<std::string, Tensor<T>>& grads, const Tensor<T>& param,
                           const std::string& path, const char* who) {
  auto it = grads.find(path);
  if (it == grads.end())
    throw ShapeError(std::string(who) + ": missing gradient for " + path);
  if (it->second.shape != param.shape)
    throw ShapeError(std::string(who) + ": gradient shape mismatch for " + path + ", " +
                     it->second.shape_str() + " vs " + param.shape_str());
  return it->second;
}

template <typename T>
Tensor<T>& velocity_for(OptimState<T>& state, const std::string& path, const Tensor<T>& param,
                        const char* who) {
  auto [it, inserted] = state.velocity.try_emplace(path, param.shape);
  if (!inserted && it->second.shape != param.shape)
    throw ShapeError(std::string(who) + ": velocity shape mismatch for " + path);
  return it->second;
}

// v <- momentum*v + (g + wd*w); w <- w - lr*v
template <typename T>
void momentum_tensor_step(Tensor<T>& param, const Tensor<T>& grad, Tensor<T>& vel, double lr,
                          double momentum, double weight_decay) {
  for (size_t i = 0; i < param.data.size(); ++i) {
    const T v = static_cast<T>(momentum * vel.data[i] +
                               (grad.data[i] + weight_decay * param.data[i]));
    vel.data[i] = v;
    param.data[i] -= static_cast<T>(lr * v);
  }
}

template <typename T>
double l2_norm(const Tensor<T>& t) {
  double s = 0.0;
  for (T v : t.data) s += static_cast<double>(v) * static_cast<double>(v);
  return std::sqrt(s);
}

}  // namespace detail

template <typename T>
void sgd_momentum_step(std::map<std::string, Tensor<T>>& params,
                       const std::map<std::string, Tensor<T>>& grads, OptimState<T>& state,
                       double lr, double momentum, double weight_decay) {
  if (!(momentum >= 0.0 && momentum < 1.0))
    throw DataError("sgd_momentum_step: momentum must be in [0, 1)");
  for (auto& [path, w] : params) {
    const Tensor<T>& g = detail::find_grad(grads, w, path, "sgd_momentum_step");
    Tensor<T>& v = detail::velocity_for(state, path, w, "sgd_momentum_step");
    detail::momentum_tensor_step(w, g, v, lr, momentum, weight_decay);
  }
}

// Layer-wise trust scaling. Biases and batch-norm parameters skip both the
// trust ratio and weight decay; everything else scales its step by
// trust*|w| / (|g| + wd*|w| + 1e-9), falling back to 1 when either norm
// vanishes.
template <typename T>
void lars_step(std::map<std::string, Tensor<T>>& params,
               const std::map<std::string, Tensor<T>>& grads, OptimState<T>& state, double lr,
               double momentum, double weight_decay, double trust) {
  if (!(momentum >= 0.0 && momentum < 1.0))
    throw DataError("lars_step: momentum must be in [0, 1)");
  if (!(trust >= 0)) throw DataError("lars_step: trust coefficient must be non-negative");
  for (auto& [path, w] : params) {
    const Tensor<T>& g = detail::find_grad(grads, w, path, "lars_step");
    Tensor<T>& v = detail::velocity_for(state, path, w, "lars_step");
    if (is_no_decay_path(path)) {
      detail::momentum_tensor_step(w, g, v, lr, momentum, 0.0);
      continue;
    }
    const double wn = detail::l2_norm(w);
    const double gn = detail::l2_norm(g);
    double local = 1.0;
    if (wn > 0.0 && gn > 0.0) local = trust * wn / (gn + weight_decay * wn + 1e-9);
    detail::momentum_tensor_step(w, g, v, lr * local, momentum, weight_decay);
  }
}

// Single entry point for the training loops: dispatch on the configured kind.
template <typename T>
void optimizer_step(const OptimConfig& cfg, double lr, std::map<std::string, Tensor<T>>& params,
                    const std::map<std::string, Tensor<T>>& grads, OptimState<T>& state) {
  if (cfg.kind == OptimKind::Lars)
    lars_step(params, grads, state, lr, cfg.momentum, cfg.weight_decay, cfg.trust_coefficient);
  else
    sgd_momentum_step(params, grads, state, lr, cfg.momentum, cfg.weight_decay);
}

// Learning rate at global step t. The restart period is stored in epochs, so
// callers supply the steps-per-epoch conversion.
inline double schedule_lr(const OptimConfig& cfg, int64_t t, int64_t steps_per_epoch) {
  switch (cfg.schedule) {
    case LrSchedule::CosineRestarts:
      return cosine_restart_lr(cfg.base_lr, cfg.min_lr, t, cfg.restart_period * steps_per_epoch);
    case LrSchedule::Step:
      return step_schedule_lr(cfg.base_lr, t, cfg.step_milestones, cfg.step_factor);
    default:
      return cfg.base_lr;
  }
}

// EMA of the online encoder. beta 1 freezes the momentum encoder, beta 0
// copies the online weights. Batch-norm running statistics are not blended:
// the momentum encoder always normalizes with the online statistics.
template <typename T>
NetworkParams<T> momentum_update(const NetworkParams<T>& theta_prev,
                                 const NetworkParams<T>& theta_enc, double beta) {
  if (!(beta >= 0.0 && beta <= 1.0)) throw DataError("momentum_update: beta must be in [0, 1]");
  auto check_keys = [](const std::map<std::string, Tensor<T>>& a,
                       const std::map<std::string, Tensor<T>>& b, const char* which) {
    if (a.size() != b.size())
      throw DataError(std::string("momentum_update: ") + which + " key sets differ");
    for (const auto& [path, t] : a) {
      auto it = b.find(path);
      if (it == b.end())
        throw DataError("momentum_update: missing " + std::string(which) + " " + path);
      if (it->second.shape != t.shape)
        throw ShapeError("momentum_update: shape mismatch for " + path);
    }
  };
  check_keys(theta_prev.tensors, theta_enc.tensors, "tensor");
  check_keys(theta_prev.stats, theta_enc.stats, "stat");

  NetworkParams<T> out;
  if (beta == 1.0) {
    out.tensors = theta_prev.tensors;
  } else if (beta == 0.0) {
    out.tensors = theta_enc.tensors;
  } else {
    out.tensors = theta_prev.tensors;
    for (auto& [path, t] : out.tensors) {
      const Tensor<T>& e = theta_enc.tensors.at(path);
      for (size_t i = 0; i < t.data.size(); ++i)
        t.data[i] = static_cast<T>(beta * t.data[i] + (1.0 - beta) * e.data[i]);
    }
  }
  out.stats = theta_enc.stats;
  return out;
}

}  // namespace panopix
