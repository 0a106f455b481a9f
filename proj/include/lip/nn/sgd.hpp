#pragma once

// SGD with vanilla (non-Nesterov) momentum and L2 weight decay folded into
// the gradient:  g' = grad + wd * param;  v = mu * v + g';  param -= lr * v.

#include <span>
#include <string>
#include <vector>

#include "lip/tensor.hpp"

namespace lip {

/// A learnable buffer and its gradient, addressed by a hierarchical path
/// such as "block2.residual.conv1.weight".
template <typename T>
struct ParamRef {
  std::string path;
  Shape4 shape;
  std::span<T> value;
  std::span<T> grad;
};

template <typename T>
struct SgdState {
  T lr = T(0.1);
  T momentum = T(0.9);
  T weight_decay = T(1e-4);
  std::vector<std::vector<T>> velocity;  // one buffer per parameter, created on first step

  void validate() const {
    if (!(lr > T{0})) throw std::invalid_argument("sgd: lr must be positive");
    if (!(momentum >= T{0} && momentum < T{1}))
      throw std::invalid_argument("sgd: momentum must lie in [0, 1)");
    if (!(weight_decay >= T{0})) throw std::invalid_argument("sgd: weight decay must be >= 0");
  }
};

template <typename T>
void sgd_update(std::span<T> param, std::span<const T> grad, std::span<T> velocity, T lr,
                T momentum, T weight_decay) {
  if (param.size() != grad.size() || param.size() != velocity.size())
    throw ShapeError("sgd_step: parameter, gradient and velocity sizes differ");
  for (std::size_t i = 0; i < param.size(); ++i) {
    const T step = grad[i] + weight_decay * param[i];
    velocity[i] = momentum * velocity[i] + step;
    param[i] -= lr * velocity[i];
  }
}

/// One step over a parameter list. Velocity buffers mirror the parameters
/// in order and are zero-initialized on the first call.
template <typename T>
void sgd_step(std::span<const ParamRef<T>> params, SgdState<T>& state) {
  state.validate();
  if (state.velocity.empty())
    for (const auto& p : params) state.velocity.emplace_back(p.value.size(), T{0});
  if (state.velocity.size() != params.size())
    throw ShapeError("sgd_step: velocity count does not match parameter count");
  for (std::size_t i = 0; i < params.size(); ++i)
    sgd_update<T>(params[i].value, params[i].grad, state.velocity[i], state.lr, state.momentum,
                  state.weight_decay);
}

/// Tensor form: params[i] is updated with grads[i].
template <typename T>
void sgd_step(std::span<Tensor4<T>* const> params, std::span<const Tensor4<T>* const> grads,
              SgdState<T>& state) {
  state.validate();
  if (params.size() != grads.size()) throw ShapeError("sgd_step: params/grads count mismatch");
  if (state.velocity.empty())
    for (const auto* p : params) state.velocity.emplace_back(p->numel(), T{0});
  if (state.velocity.size() != params.size())
    throw ShapeError("sgd_step: velocity count does not match parameter count");
  for (std::size_t i = 0; i < params.size(); ++i) {
    require_same_shape(*params[i], *grads[i], "sgd_step");
    sgd_update<T>(params[i]->span(), grads[i]->span(), state.velocity[i], state.lr,
                  state.momentum, state.weight_decay);
  }
}

}  // namespace lip
