#pragma once

// Local importance-based pooling: LAN pooling with F = exp(logit), where the
// logit map is produced per channel by a learned logit module.

#include <cmath>
#include <limits>

#include "lip/lan.hpp"

namespace lip {

/// Pool geometry with the LIP requirement kernel >= stride on both axes.
/// Defaults to the in-network 3x3 / stride 2 / pad 1 window.
struct LipGeometry {
  PoolGeometry geom = PoolGeometry::square(3, 2, 1);

  LipGeometry() = default;
  explicit LipGeometry(const PoolGeometry& g) : geom(g) { validate(); }
  LipGeometry(std::size_t kernel, std::size_t stride, std::size_t pad)
      : LipGeometry(PoolGeometry::square(kernel, stride, pad)) {}

  void validate() const {
    geom.validate();
    if (geom.kh < geom.sh || geom.kw < geom.sw)
      throw GeometryError("LIP window must not be smaller than its stride");
  }
};

using LipMode = ExpMode;

template <typename T>
Tensor4<T> lip2d_forward(const Tensor4<T>& x, const Tensor4<T>& logit, const LipGeometry& g,
                         LipMode mode = LipMode::stabilized) {
  g.validate();
  return lan_pool_log(x, logit, g.geom, mode);
}

template <typename T>
struct LipGrads {
  Tensor4<T> grad_x;
  Tensor4<T> grad_logit;
};

/// Analytic backward, always in the stabilized domain. With window weights
/// w_i = softmax(logit)_i and output O:
///   dx_i     += grad_out * w_i
///   dlogit_i += grad_out * w_i * (x_i - O)
template <typename T>
LipGrads<T> lip2d_backward(const Tensor4<T>& grad_out, const Tensor4<T>& x,
                           const Tensor4<T>& logit, const LipGeometry& g) {
  g.validate();
  require_same_shape(x, logit, "lip2d_backward");
  const Shape4& s = x.shape();
  const Shape4 os = g.geom.output_shape(s);
  if (grad_out.shape() != os)
    throw ShapeError("lip2d_backward: grad_out shape " + grad_out.shape().str() +
                     " does not match forward output " + os.str());
  if (!detail::all_finite(logit.data(), logit.numel())) throw NumericError("logit must be finite");

  LipGrads<T> grads{Tensor4<T>::uninitialized(s), Tensor4<T>::uninitialized(s)};
  const detail::WindowRanges ranges(g.geom, s.h, s.w);
  Buffer<T> e(s.plane()), ex(s.plane()), a(s.plane()), bsum(s.plane());
  Buffer<T> r(os.plane()), q(os.plane()), hs(s.h * os.w);
  std::vector<T> w(g.geom.window_size());
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      const T* xi = x.data() + x.offset(n, c, 0, 0);
      const T* li = logit.data() + logit.offset(n, c, 0, 0);
      const T* go = grad_out.data() + grad_out.offset(n, c, 0, 0);
      T* gx = grads.grad_x.data() + grads.grad_x.offset(n, c, 0, 0);
      T* gl = grads.grad_logit.data() + grads.grad_logit.offset(n, c, 0, 0);
      if (detail::shifted_exp_plane(li, s.plane(), e.data())) {
        // Shared exponentials: with r = g / den per window, accumulate
        // A_i = sum r and B_i = sum r * O over the windows holding i; then
        // dx_i = e_i * A_i and dlogit_i = e_i * (x_i * A_i - B_i).
        for (std::size_t i = 0; i < s.plane(); ++i) ex[i] = e[i] * xi[i];
        detail::window_sum(ranges, ex.data(), q.data(), hs.data());
        detail::window_sum(ranges, e.data(), r.data(), hs.data());
        for (std::size_t k = 0; k < os.plane(); ++k) {
          const T den = r[k];
          const T out = q[k] / den;
          r[k] = go[k] / den;
          q[k] = r[k] * out;
        }
        std::fill(a.begin(), a.end(), T{0});
        std::fill(bsum.begin(), bsum.end(), T{0});
        detail::window_scatter(ranges, r.data(), a.data(), hs.data());
        detail::window_scatter(ranges, q.data(), bsum.data(), hs.data());
        for (std::size_t i = 0; i < s.plane(); ++i) {
          gx[i] = e[i] * a[i];
          gl[i] = e[i] * (xi[i] * a[i] - bsum[i]);
        }
        continue;
      }
      std::fill(gx, gx + s.plane(), T{0});
      std::fill(gl, gl + s.plane(), T{0});
      for (std::size_t oy = 0; oy < os.h; ++oy)
        for (std::size_t ox = 0; ox < os.w; ++ox) {
          const WindowBounds b = window_bounds(g.geom, s.h, s.w, oy, ox);
          T m = -std::numeric_limits<T>::infinity();
          for (std::size_t y = b.ys; y < b.ye; ++y)
            for (std::size_t xx = b.xs; xx < b.xe; ++xx) m = std::max(m, li[y * s.w + xx]);
          T den = 0, num = 0;
          std::size_t k = 0;
          for (std::size_t y = b.ys; y < b.ye; ++y)
            for (std::size_t xx = b.xs; xx < b.xe; ++xx, ++k) {
              w[k] = std::exp(li[y * s.w + xx] - m);
              den += w[k];
              num += w[k] * xi[y * s.w + xx];
            }
          const T out = num / den;
          const T scale = go[oy * os.w + ox] / den;
          k = 0;
          for (std::size_t y = b.ys; y < b.ye; ++y)
            for (std::size_t xx = b.xs; xx < b.xe; ++xx, ++k) {
              const T gw = scale * w[k];
              gx[y * s.w + xx] += gw;
              gl[y * s.w + xx] += gw * (xi[y * s.w + xx] - out);
            }
        }
    }
  return grads;
}

}  // namespace lip
