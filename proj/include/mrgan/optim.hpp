#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "mrgan/tensor.hpp"

namespace mrgan {

/// Adam moments for an ordered parameter list. `t` counts completed steps.
template <class T>
struct AdamState {
  double lr = 5e-6;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
  long t = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
};

template <class T>
AdamState<T> make_adam(const std::vector<Tensor<T>>& params, double lr, double weight_decay = 1e-4) {
  require(lr >= 0.0 && std::isfinite(lr), ErrorCode::invalid_argument, "learning rate must be finite and >= 0");
  AdamState<T> state;
  state.lr = lr;
  state.weight_decay = weight_decay;
  for (const auto& p : params) {
    state.m.emplace_back(p.numel(), T(0));
    state.v.emplace_back(p.numel(), T(0));
  }
  return state;
}

/// One Adam step with bias correction, reading each parameter's accumulated
/// grad. Weight decay is decoupled: p <- p - lr*wd*p happens before the
/// moment-based update and never enters m or v.
template <class T>
void adam_step(std::vector<Tensor<T>>& params, AdamState<T>& state) {
  require(state.beta1 > 0.0 && state.beta1 < 1.0 && state.beta2 > 0.0 && state.beta2 < 1.0,
          ErrorCode::invalid_argument, "Adam betas must lie in (0,1)");
  require(state.m.size() == params.size() && state.v.size() == params.size(),
          ErrorCode::shape_mismatch, "Adam state does not match the parameter list");
  const long t = state.t + 1;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(t));
  const T b1 = static_cast<T>(state.beta1), b2 = static_cast<T>(state.beta2);
  const T lr = static_cast<T>(state.lr);
  const T decay = static_cast<T>(state.lr * state.weight_decay);
  const T eps = static_cast<T>(state.eps);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    auto& m = state.m[k];
    auto& v = state.v[k];
    require(m.size() == p.numel() && v.size() == p.numel(), ErrorCode::shape_mismatch,
            "Adam moment size differs from parameter " + std::to_string(k));
    auto values = p.mutable_data();
    const auto g = p.grad();
    for (std::size_t i = 0; i < values.size(); ++i) {
      values[i] -= decay * values[i];
      m[i] = b1 * m[i] + (T(1) - b1) * g[i];
      v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
      const T mhat = m[i] / static_cast<T>(c1);
      const T vhat = v[i] / static_cast<T>(c2);
      values[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
  state.t = t;
}

template <class T>
void zero_grad(std::vector<Tensor<T>>& params) {
  for (auto& p : params) p.zero_grad();
}

}  // namespace mrgan
