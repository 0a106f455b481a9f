#pragma once

#include <cmath>

#include <Eigen/Core>

#include "lip/tensor.hpp"

namespace lip {

/// Amplification of the logit-module top: logits live in (0, 12).
inline constexpr double kLogitAmplification = 12.0;

template <typename T>
T sigmoid(T x) {
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

namespace detail {

template <typename T>
using ArrayMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using ConstArrayMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

}  // namespace detail

template <typename T>
Tensor4<T> relu_forward(const Tensor4<T>& x) {
  return map_elementwise(x, T{0}, [](T v, T) { return v > T{0} ? v : T{0}; });
}

template <typename T>
Tensor4<T> relu_backward(const Tensor4<T>& grad_out, const Tensor4<T>& x) {
  return map_elementwise(grad_out, x, [](T g, T v) { return v > T{0} ? g : T{0}; });
}

/// A * sigmoid(x), vectorized. exp(-x) may overflow to inf for very
/// negative x, which still yields the correct limit 0.
template <typename T>
Tensor4<T> sigmoid_amplified(const Tensor4<T>& x, T amplification) {
  if (!(amplification > T{0})) throw std::invalid_argument("amplification must be positive");
  auto y = Tensor4<T>::uninitialized(x.shape());
  const auto n = static_cast<Eigen::Index>(x.numel());
  detail::ConstArrayMap<T> in(x.data(), n);
  detail::ArrayMap<T>(y.data(), n) = amplification / (T{1} + (-in).exp());
  return y;
}

/// d/dx A*sigmoid(x) = A * e / (1 + e)^2 with e = exp(-|x|), which avoids
/// the cancellation in s * (1 - s) for large |x|.
template <typename T>
Tensor4<T> sigmoid_amplified_backward(const Tensor4<T>& grad_out, const Tensor4<T>& x,
                                      T amplification) {
  if (!(amplification > T{0})) throw std::invalid_argument("amplification must be positive");
  require_same_shape(grad_out, x, "sigmoid_amplified_backward");
  auto gx = Tensor4<T>::uninitialized(x.shape());
  const auto n = static_cast<Eigen::Index>(x.numel());
  detail::ConstArrayMap<T> in(x.data(), n), go(grad_out.data(), n);
  const auto e = (-in.abs()).exp();
  detail::ArrayMap<T>(gx.data(), n) = amplification * go * e / (T{1} + e).square();
  return gx;
}

}  // namespace lip
