#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "tdlm/error.hpp"
#include "tdlm/model.hpp"

namespace tdlm {

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-9;
  double weight_decay = 0.02;
  double clip_norm = 1.0;  // <= 0 disables clipping
  int warmup = 250;
  int total_steps = 5000;
  double final_fraction = 0.1;
};

// Linear warmup from 0, then cosine decay to final_fraction * lr at total_steps.
inline double learning_rate(const AdamConfig& c, long long step) {
  if (step < c.warmup) return c.lr * static_cast<double>(step) / static_cast<double>(c.warmup);
  const double span = std::max(1, c.total_steps - c.warmup);
  const double p = std::min(1.0, static_cast<double>(step - c.warmup) / span);
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * p));
  return c.lr * (c.final_fraction + (1.0 - c.final_fraction) * cosine);
}

template <class T>
struct AdamState {
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  long long step = 0;
};

template <class T>
AdamState<T> make_adam_state(const std::vector<Tensor<T>>& params) {
  AdamState<T> s;
  s.m = params;
  for (auto& t : s.m) std::fill(t.data.begin(), t.data.end(), T(0));
  s.v = s.m;
  return s;
}

template <class T>
double global_norm(const std::vector<Tensor<T>>& grads) {
  double s = 0;
  for (const auto& g : grads)
    for (T v : g.data) s += static_cast<double>(v) * static_cast<double>(v);
  return std::sqrt(s);
}

// One AdamW update at state.step; decay applies to matrices only. Returns the
// pre-clip gradient norm.
template <class T>
double optimizer_step(std::vector<Tensor<T>>& params, std::vector<Tensor<T>>& grads, AdamState<T>& state,
                      const AdamConfig& c) {
  if (params.size() != grads.size() || params.size() != state.m.size()) {
    throw ContractViolation("optimizer: parameter and gradient lists differ");
  }
  const double norm = global_norm(grads);
  const double clip = (c.clip_norm > 0 && norm > c.clip_norm) ? c.clip_norm / norm : 1.0;
  const double lr = learning_rate(c, state.step);
  const long long k = state.step + 1;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(k));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(k));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i].data;
    auto& g = grads[i].data;
    auto& m = state.m[i].data;
    auto& v = state.v[i].data;
    if (p.size() != g.size()) throw ContractViolation("optimizer: shape mismatch for " + params[i].name);
    const double wd = params[i].dims.size() == 2 ? c.weight_decay : 0.0;
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = static_cast<double>(g[j]) * clip;
      const double mj = c.beta1 * static_cast<double>(m[j]) + (1.0 - c.beta1) * gj;
      const double vj = c.beta2 * static_cast<double>(v[j]) + (1.0 - c.beta2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double update = (mj / bc1) / (std::sqrt(vj / bc2) + c.eps) + wd * static_cast<double>(p[j]);
      p[j] = static_cast<T>(static_cast<double>(p[j]) - lr * update);
    }
  }
  state.step = k;
  return norm;
}

}  // namespace tdlm
