#pragma once

#include <map>
#include <string>

#include "capsamc/tensor.hpp"

namespace capsamc {

template <typename T>
using ParamMap = std::map<std::string, Tensor<T>>;

/// SGD with momentum. Velocities are created as zeros on first use.
template <typename T>
struct OptimizerState {
  ParamMap<T> velocity;
  double momentum = 0.9;
  double learning_rate = 0.01;
};

/// v <- momentum * v - learning_rate * g;  p <- p + v, for every parameter.
/// Every gradient is validated before any parameter changes; a non-finite
/// gradient rejects the whole step with a ValueError naming the parameter.
template <typename T>
void sgdm_step(ParamMap<T>& params, const ParamMap<T>& grads, OptimizerState<T>& state) {
  if (!(state.momentum >= 0.0 && state.momentum < 1.0)) {
    throw ValueError("momentum must lie in [0, 1)");
  }
  if (!(state.learning_rate > 0.0)) throw ValueError("learning rate must be positive");
  for (const auto& [name, param] : params) {
    auto it = grads.find(name);
    if (it == grads.end()) throw ValueError("missing gradient for parameter " + name);
    if (it->second.shape() != param.shape()) {
      throw ShapeError("gradient shape " + shape_str(it->second.shape()) + " for parameter " +
                       name + " does not match " + shape_str(param.shape()));
    }
    if (!it->second.all_finite()) throw ValueError("non-finite gradient for parameter " + name);
    auto v = state.velocity.find(name);
    if (v != state.velocity.end() && v->second.shape() != param.shape()) {
      throw ShapeError("velocity shape mismatch for parameter " + name);
    }
  }
  const T mu = static_cast<T>(state.momentum);
  const T lr = static_cast<T>(state.learning_rate);
  for (auto& [name, param] : params) {
    const Tensor<T>& grad = grads.at(name);
    auto [v, inserted] = state.velocity.try_emplace(name, param.shape());
    Tensor<T>& vel = v->second;
    for (std::size_t i = 0; i < param.size(); ++i) {
      vel[i] = mu * vel[i] - lr * grad[i];
      param[i] += vel[i];
    }
  }
}

}  // namespace capsamc
