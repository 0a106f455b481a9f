#pragma once

// Local aggregation and normalization: every pooling operator here is
//
//     O = sum_window(F * I) / sum_window(F)
//
// for a nonnegative importance map F with the same shape as the input I.
// Padded positions contribute to neither sum.

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "lip/nn/window_sum.hpp"
#include "lip/tensor.hpp"

namespace lip {

template <typename T>
struct ImportanceMap {
  Tensor4<T> values;

  ImportanceMap() = default;
  explicit ImportanceMap(Tensor4<T> v) : values(std::move(v)) {
    for (T f : values.values())
      if (!(f >= T{0}) || !std::isfinite(f))
        throw NumericError("importance values must be finite and nonnegative");
  }

  const Shape4& shape() const { return values.shape(); }
};

/// Normalized weights of one window, aligned with WindowView::values.
template <typename T>
struct LocalWeights {
  std::vector<T> weights;
  std::vector<bool> mask;
};

namespace detail {

inline std::string window_name(std::size_t n, std::size_t c, std::size_t oy, std::size_t ox) {
  return "(n=" + std::to_string(n) + ", c=" + std::to_string(c) + ", y'=" + std::to_string(oy) +
         ", x'=" + std::to_string(ox) + ")";
}

}  // namespace detail

template <typename T>
Tensor4<T> lan_pool(const Tensor4<T>& x, const ImportanceMap<T>& f, const PoolGeometry& geom) {
  require_same_shape(x, f.values, "lan_pool");
  const Shape4& s = x.shape();
  const Shape4 os = geom.output_shape(s);
  auto out = Tensor4<T>::uninitialized(os);
  const detail::WindowRanges ranges(geom, s.h, s.w);
  Buffer<T> fx(s.plane()), num(os.plane()), den(os.plane()), hs(s.h * os.w);
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      const T* xi = x.data() + x.offset(n, c, 0, 0);
      const T* fi = f.values.data() + f.values.offset(n, c, 0, 0);
      T* o = out.data() + out.offset(n, c, 0, 0);
      for (std::size_t i = 0; i < s.plane(); ++i) fx[i] = fi[i] * xi[i];
      detail::window_sum(ranges, fx.data(), num.data(), hs.data());
      detail::window_sum(ranges, fi, den.data(), hs.data());
      for (std::size_t k = 0; k < os.plane(); ++k) {
        if (!(den[k] > T{0}))
          throw DegenerateWindowError("zero importance in window " +
                                      detail::window_name(n, c, k / os.w, k % os.w));
        o[k] = num[k] / den[k];
      }
    }
  return out;
}

template <typename T>
LocalWeights<T> local_weights(const ImportanceMap<T>& f, const PoolGeometry& geom, std::size_t n,
                              std::size_t c, std::size_t out_x, std::size_t out_y) {
  const WindowView<T> view = window_extract(f.values, n, c, geom, out_x, out_y);
  T sum = 0;
  for (T v : view.values) sum += v;
  if (!(sum > T{0}))
    throw DegenerateWindowError("zero importance in window " +
                                detail::window_name(n, c, out_y, out_x));
  LocalWeights<T> lw{view.values, view.mask};
  for (T& w : lw.weights) w /= sum;
  return lw;
}

template <typename T>
ImportanceMap<T> importance_uniform(const Tensor4<T>& x) {
  return ImportanceMap<T>(Tensor4<T>(x.shape(), T{1}));
}

/// exp(beta * x), evaluated directly. Large beta * x overflows; use
/// lan_pool_exp with the stabilized mode for those.
template <typename T>
ImportanceMap<T> importance_exp_beta(const Tensor4<T>& x, T beta) {
  if (!std::isfinite(beta)) throw NumericError("beta must be finite");
  return ImportanceMap<T>(map_elementwise(x, beta, [](T v, T b) { return std::exp(b * v); }));
}

/// Indicator of the stride lattice: 1 where both coordinates of the padded
/// frame, (y + ph, x + pw), are multiples of `stride`, else 0.
template <typename T>
ImportanceMap<T> importance_strided(const Tensor4<T>& x, std::size_t stride, std::size_t pad_h = 0,
                                    std::size_t pad_w = 0) {
  if (stride == 0) throw GeometryError("stride must be >= 1");
  const Shape4& s = x.shape();
  Tensor4<T> f(s);
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t y = 0; y < s.h; ++y)
        for (std::size_t xx = 0; xx < s.w; ++xx)
          f(n, c, y, xx) = ((y + pad_h) % stride == 0 && (xx + pad_w) % stride == 0) ? T{1} : T{0};
  return ImportanceMap<T>(std::move(f));
}

enum class ExpMode {
  naive,       // exp once per element, then window sums
  stabilized,  // per-window max of the log-importance subtracted before exp
};

namespace detail {

/// Largest logit range within one plane for which exp(l - plane max) stays
/// a normal number.
template <typename T>
constexpr T plane_shift_range() {
  return std::is_same_v<T, float> ? T(60) : T(600);
}

template <typename T>
bool all_finite(const T* p, std::size_t n) {
  return Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>(p, static_cast<Eigen::Index>(n)).allFinite();
}

/// e[i] = exp(l[i] - max(l)) when the plane's range allows it. Shifting by
/// a constant cancels in every window ratio, so this equals shifting by the
/// window max up to rounding. Returns false when the range is too wide.
template <typename T>
bool shifted_exp_plane(const T* l, std::size_t n, T* e) {
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  Eigen::Map<const Arr> in(l, static_cast<Eigen::Index>(n));
  Eigen::Map<Arr> out(e, static_cast<Eigen::Index>(n));
  const T hi = in.maxCoeff();
  if (hi - in.minCoeff() > plane_shift_range<T>()) return false;
  out = (in - hi).exp();
  return true;
}

}  // namespace detail

/// Pooling with F = exp(log_importance). Both modes mask padding; the
/// stabilized mode never overflows.
template <typename T>
Tensor4<T> lan_pool_log(const Tensor4<T>& x, const Tensor4<T>& log_importance,
                        const PoolGeometry& geom, ExpMode mode) {
  require_same_shape(x, log_importance, "lan_pool_log");
  const Shape4& s = x.shape();
  const Shape4 os = geom.output_shape(s);
  if (!detail::all_finite(log_importance.data(), log_importance.numel()))
    throw NumericError("log-importance must be finite");
  auto out = Tensor4<T>::uninitialized(os);
  const detail::WindowRanges ranges(geom, s.h, s.w);
  Buffer<T> e(s.plane()), ex(s.plane()), num(os.plane()), den(os.plane()), hs(s.h * os.w);
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      const T* xi = x.data() + x.offset(n, c, 0, 0);
      const T* li = log_importance.data() + log_importance.offset(n, c, 0, 0);
      T* o = out.data() + out.offset(n, c, 0, 0);
      bool shared = true;
      if (mode == ExpMode::naive)
        for (std::size_t i = 0; i < s.plane(); ++i) e[i] = std::exp(li[i]);
      else
        shared = detail::shifted_exp_plane(li, s.plane(), e.data());
      if (shared) {
        for (std::size_t i = 0; i < s.plane(); ++i) ex[i] = e[i] * xi[i];
        detail::window_sum(ranges, ex.data(), num.data(), hs.data());
        detail::window_sum(ranges, e.data(), den.data(), hs.data());
        for (std::size_t k = 0; k < os.plane(); ++k) {
          if (mode == ExpMode::naive) {
            if (!std::isfinite(den[k]) || !std::isfinite(num[k]))
              throw NumericError("exp overflow in naive pooling at window " +
                                 detail::window_name(n, c, k / os.w, k % os.w));
            if (!(den[k] > T{0}))
              throw DegenerateWindowError("importance underflow in window " +
                                          detail::window_name(n, c, k / os.w, k % os.w));
          }
          o[k] = num[k] / den[k];
        }
        continue;
      }
      for (std::size_t oy = 0; oy < os.h; ++oy)
        for (std::size_t ox = 0; ox < os.w; ++ox) {
          const WindowBounds b = window_bounds(geom, s.h, s.w, oy, ox);
          T m = -std::numeric_limits<T>::infinity();
          for (std::size_t y = b.ys; y < b.ye; ++y)
            for (std::size_t xx = b.xs; xx < b.xe; ++xx) m = std::max(m, li[y * s.w + xx]);
          T nu = 0, de = 0;
          for (std::size_t y = b.ys; y < b.ye; ++y)
            for (std::size_t xx = b.xs; xx < b.xe; ++xx) {
              const T w = std::exp(li[y * s.w + xx] - m);
              nu += w * xi[y * s.w + xx];
              de += w;
            }
          o[oy * os.w + ox] = nu / de;
        }
    }
  return out;
}

/// Pooling with F = exp(beta * x): beta = 0 is average pooling and large
/// beta approaches max pooling.
template <typename T>
Tensor4<T> lan_pool_exp_beta(const Tensor4<T>& x, T beta, const PoolGeometry& geom,
                             ExpMode mode = ExpMode::stabilized) {
  if (!std::isfinite(beta)) throw NumericError("beta must be finite");
  return lan_pool_log(x, map_elementwise(x, beta, [](T v, T b) { return b * v; }), geom, mode);
}

}  // namespace lip
