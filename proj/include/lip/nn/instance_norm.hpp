#pragma once

// Affine instance normalization: per (sample, channel) standardization over
// the spatial plane, then a learned per-channel scale and shift.

#include <cmath>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "lip/tensor.hpp"

namespace lip {

template <typename T>
struct InstanceNormParams {
  std::vector<T> gamma;
  std::vector<T> beta;
  T eps = T(1e-5);

  explicit InstanceNormParams(std::size_t channels = 0)
      : gamma(channels, T{1}), beta(channels, T{0}) {}

  std::size_t channels() const { return gamma.size(); }

  void validate(std::size_t c) const {
    if (!(eps > T{0})) throw std::invalid_argument("instance norm eps must be positive");
    if (gamma.size() != c || beta.size() != c)
      throw ShapeError("instance norm affine parameters do not match channel count " +
                       std::to_string(c));
  }
};

template <typename T>
struct InstanceNormGrads {
  Tensor4<T> grad_x;
  std::vector<T> grad_gamma;
  std::vector<T> grad_beta;
};

namespace detail {

/// Standardized plane and 1/sqrt(var + eps). An exactly constant plane
/// standardizes to exact zeros. Two-pass mean and variance.
template <typename T>
T standardize_plane(std::span<const T> in, std::span<T> xhat, T eps) {
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  const auto count = static_cast<Eigen::Index>(in.size());
  Eigen::Map<const Arr> v(in.data(), count);
  Eigen::Map<Arr> out(xhat.data(), count);
  if ((v == in[0]).all()) {
    out.setZero();
    return T{1} / std::sqrt(eps);
  }
  const T mean = v.sum() / static_cast<T>(count);
  const T var = (v - mean).square().sum() / static_cast<T>(count);
  const T inv_std = T{1} / std::sqrt(var + eps);
  out = (v - mean) * inv_std;
  return inv_std;
}

}  // namespace detail

template <typename T>
Tensor4<T> instance_norm_forward(const Tensor4<T>& x, const InstanceNormParams<T>& p) {
  const Shape4& s = x.shape();
  p.validate(s.c);
  auto out = Tensor4<T>::uninitialized(s);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      auto dst = out.plane(n, c);
      detail::standardize_plane<T>(x.plane(n, c), dst, p.eps);
      for (T& v : dst) v = p.gamma[c] * v + p.beta[c];
    }
  }
  return out;
}

/// Backward of the eps-stabilized formula. For a constant plane the
/// standardized values are zero and the input gradient reduces to
/// gamma * (g - mean(g)) / sqrt(eps), so gradients still flow at init.
template <typename T>
InstanceNormGrads<T> instance_norm_backward(const Tensor4<T>& grad_out, const Tensor4<T>& x,
                                            const InstanceNormParams<T>& p) {
  const Shape4& s = x.shape();
  p.validate(s.c);
  require_same_shape(grad_out, x, "instance_norm_backward");
  InstanceNormGrads<T> g{Tensor4<T>::uninitialized(s), std::vector<T>(s.c, T{0}), std::vector<T>(s.c, T{0})};
  const std::size_t count = s.plane();
  Buffer<T> xhat(count);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const T inv_std = detail::standardize_plane<T>(x.plane(n, c), xhat, p.eps);
      auto go = grad_out.plane(n, c);
      T sum_g = 0, sum_gx = 0;
      for (std::size_t i = 0; i < count; ++i) {
        sum_g += go[i];
        sum_gx += go[i] * xhat[i];
      }
      g.grad_beta[c] += sum_g;
      g.grad_gamma[c] += sum_gx;
      const T mean_g = sum_g / static_cast<T>(count);
      const T mean_gx = sum_gx / static_cast<T>(count);
      const T scale = p.gamma[c] * inv_std;
      auto gx = g.grad_x.plane(n, c);
      for (std::size_t i = 0; i < count; ++i)
        gx[i] = scale * (go[i] - mean_g - xhat[i] * mean_gx);
    }
  }
  return g;
}

}  // namespace lip
