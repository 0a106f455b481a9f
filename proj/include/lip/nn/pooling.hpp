#pragma once

// Average and max pooling over in-bounds window positions only. Average
// pooling divides by the in-bounds count; max pooling routes the gradient to
// the first maximum in row-major window order.

#include "lip/nn/window_sum.hpp"
#include "lip/tensor.hpp"

namespace lip {

template <typename T>
Tensor4<T> avg_pool2d_forward(const Tensor4<T>& x, const PoolGeometry& g) {
  const Shape4 os = g.output_shape(x.shape());
  const Shape4& s = x.shape();
  auto out = Tensor4<T>::uninitialized(os);
  const detail::WindowRanges r(g, s.h, s.w);
  Buffer<T> hs(s.h * os.w);
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      T* o = out.data() + out.offset(n, c, 0, 0);
      detail::window_sum(r, x.data() + x.offset(n, c, 0, 0), o, hs.data());
      for (std::size_t oy = 0; oy < os.h; ++oy)
        for (std::size_t ox = 0; ox < os.w; ++ox)
          o[oy * os.w + ox] /= static_cast<T>((r.ye[oy] - r.ys[oy]) * (r.xe[ox] - r.xs[ox]));
    }
  return out;
}

template <typename T>
Tensor4<T> avg_pool2d_backward(const Tensor4<T>& grad_out, const Shape4& in_shape,
                               const PoolGeometry& g) {
  const Shape4 os = g.output_shape(in_shape);
  if (grad_out.shape() != os) throw ShapeError("avg_pool2d_backward: grad_out shape mismatch");
  Tensor4<T> gx(in_shape);
  const detail::WindowRanges r(g, in_shape.h, in_shape.w);
  Buffer<T> share(os.plane()), hs(in_shape.h * os.w);
  for (std::size_t n = 0; n < in_shape.n; ++n)
    for (std::size_t c = 0; c < in_shape.c; ++c) {
      const T* go = grad_out.data() + grad_out.offset(n, c, 0, 0);
      for (std::size_t oy = 0; oy < os.h; ++oy)
        for (std::size_t ox = 0; ox < os.w; ++ox)
          share[oy * os.w + ox] =
              go[oy * os.w + ox] / static_cast<T>((r.ye[oy] - r.ys[oy]) * (r.xe[ox] - r.xs[ox]));
      detail::window_scatter(r, share.data(), gx.data() + gx.offset(n, c, 0, 0), hs.data());
    }
  return gx;
}

namespace detail {

/// Offset (within the plane) of the first maximum of a window.
template <typename T>
std::size_t window_argmax(const T* in, std::size_t w, const WindowBounds& b) {
  std::size_t best = b.ys * w + b.xs;
  for (std::size_t y = b.ys; y < b.ye; ++y)
    for (std::size_t xx = b.xs; xx < b.xe; ++xx)
      if (in[y * w + xx] > in[best]) best = y * w + xx;
  return best;
}

}  // namespace detail

template <typename T>
Tensor4<T> max_pool2d_forward(const Tensor4<T>& x, const PoolGeometry& g) {
  const Shape4 os = g.output_shape(x.shape());
  const Shape4& s = x.shape();
  auto out = Tensor4<T>::uninitialized(os);
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      const T* in = x.data() + x.offset(n, c, 0, 0);
      T* o = out.data() + out.offset(n, c, 0, 0);
      for (std::size_t oy = 0; oy < os.h; ++oy)
        for (std::size_t ox = 0; ox < os.w; ++ox)
          o[oy * os.w + ox] = in[detail::window_argmax(in, s.w, window_bounds(g, s.h, s.w, oy, ox))];
    }
  return out;
}

template <typename T>
Tensor4<T> max_pool2d_backward(const Tensor4<T>& grad_out, const Tensor4<T>& x,
                               const PoolGeometry& g) {
  const Shape4 os = g.output_shape(x.shape());
  if (grad_out.shape() != os) throw ShapeError("max_pool2d_backward: grad_out shape mismatch");
  const Shape4& s = x.shape();
  Tensor4<T> gx(s);
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      const T* in = x.data() + x.offset(n, c, 0, 0);
      T* gi = gx.data() + gx.offset(n, c, 0, 0);
      const T* go = grad_out.data() + grad_out.offset(n, c, 0, 0);
      for (std::size_t oy = 0; oy < os.h; ++oy)
        for (std::size_t ox = 0; ox < os.w; ++ox)
          gi[detail::window_argmax(in, s.w, window_bounds(g, s.h, s.w, oy, ox))] +=
              go[oy * os.w + ox];
    }
  return gx;
}

}  // namespace lip
