#pragma once

#include <cmath>
#include <map>
#include <numbers>
#include <string>

#include "findrec/params.hpp"

namespace findrec {

struct OptimState {
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;
  std::uint64_t step = 0;
};

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// Linear warmup 0 -> lr_peak over `warmup` steps, then cosine decay to 0 at
// `total_steps`.
inline double lr_schedule(std::uint64_t step, std::uint64_t warmup, std::uint64_t total_steps, double lr_peak) {
  if (step < warmup) return lr_peak * static_cast<double>(step) / static_cast<double>(warmup);
  if (total_steps <= warmup) return lr_peak;
  double progress = static_cast<double>(step - warmup) / static_cast<double>(total_steps - warmup);
  progress = std::min(progress, 1.0);
  return lr_peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

inline double global_grad_norm(const ParamStore& store) {
  double sq = 0.0;
  for (const auto& p : store.params()) {
    if (!p.var.has_grad()) continue;
    for (double g : p.var.node()->grad.data()) sq += g * g;
  }
  return std::sqrt(sq);
}

// Rescales all gradients so their global L2 norm is at most max_norm.
// Returns the norm before clipping.
inline double clip_gradients(ParamStore& store, double max_norm) {
  if (!(max_norm > 0.0)) throw ConfigError("clip norm must be > 0");
  const double norm = global_grad_norm(store);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& p : store.params()) {
      if (!p.var.has_grad()) continue;
      for (double& g : p.var.node()->grad.data()) g *= s;
    }
  }
  return norm;
}

// Decoupled weight decay followed by the bias-corrected Adam update. The
// padding row of row-0-frozen tables is left untouched.
inline void adamw_step(ParamStore& store, OptimState& state, double lr, const AdamWConfig& cfg) {
  for (const auto& p : store.params()) {
    if (p.var.has_grad() && !p.var.node()->grad.all_finite()) {
      throw NumericalError("non-finite gradient for parameter '" + p.name + "'");
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  const double decay = 1.0 - lr * cfg.weight_decay;
  for (auto& p : store.params()) {
    Tensor& w = p.var.mutable_value();
    auto [mit, m_new] = state.m.try_emplace(p.name, w.shape(), 0.0);
    auto [vit, v_new] = state.v.try_emplace(p.name, w.shape(), 0.0);
    Tensor& m = mit->second;
    Tensor& v = vit->second;
    const Tensor g = p.var.grad();
    const std::size_t skip = p.frozen_row0 ? w.dim(-1) : 0;
    for (std::size_t i = skip; i < w.numel(); ++i) {
      w[i] *= decay;
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

}  // namespace findrec
