#pragma once

// Separable window sums over one plane: horizontal sums per row, then
// vertical sums of those. Shared by average and LIP pooling so both add
// window elements in the same order.

#include <algorithm>
#include <vector>

#include "lip/tensor.hpp"

namespace lip::detail {

/// In-bounds row and column ranges of every window, computed once per
/// plane shape. Columns [x_lo, x_hi) of the output have windows lying fully
/// inside the plane horizontally.
struct WindowRanges {
  PoolGeometry g;
  std::size_t h, w, oh, ow, x_lo = 0, x_hi = 0;
  std::vector<std::size_t> ys, ye, xs, xe;

  WindowRanges(const PoolGeometry& geom, std::size_t height, std::size_t width)
      : g(geom), h(height), w(width) {
    const Shape4 os = g.output_shape(Shape4{1, 1, h, w});
    oh = os.h;
    ow = os.w;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      const WindowBounds b = window_bounds(g, h, w, oy, 0);
      ys.push_back(b.ys);
      ye.push_back(b.ye);
    }
    for (std::size_t ox = 0; ox < ow; ++ox) {
      const WindowBounds b = window_bounds(g, h, w, 0, ox);
      xs.push_back(b.xs);
      xe.push_back(b.xe);
    }
    x_lo = ow;
    for (std::size_t ox = 0; ox < ow; ++ox)
      if (xe[ox] - xs[ox] == g.kw) {
        x_lo = std::min(x_lo, ox);
        x_hi = ox + 1;
      }
    if (x_lo == ow) x_lo = x_hi = 0;
  }
};

/// out[k] = sum_{t < KW} src[k * S + t] for k < n.
template <std::size_t KW, std::size_t S, typename T>
void taps_fixed(const T* src, T* out, std::size_t n) {
  for (std::size_t k = 0; k < n; ++k) {
    T acc = src[k * S];
    for (std::size_t t = 1; t < KW; ++t) acc += src[k * S + t];
    out[k] = acc;
  }
}

/// dst[k * S + t] += in[k] for k < n, t < KW.
template <std::size_t KW, std::size_t S, typename T>
void scatter_fixed(const T* in, T* dst, std::size_t n) {
  for (std::size_t t = 0; t < KW; ++t)
    for (std::size_t k = 0; k < n; ++k) dst[k * S + t] += in[k];
}

/// Horizontal window sums of every row: hs[y * ow + ox].
template <typename T>
void row_sums(const WindowRanges& r, const T* a, T* hs) {
  const bool fast = r.g.kw == 3 && r.g.sw == 2;
  const std::size_t n = r.x_hi - r.x_lo;
  for (std::size_t y = 0; y < r.h; ++y) {
    const T* row = a + y * r.w;
    T* out = hs + y * r.ow;
    auto edge = [&](std::size_t ox) {
      T acc = 0;
      for (std::size_t x = r.xs[ox]; x < r.xe[ox]; ++x) acc += row[x];
      out[ox] = acc;
    };
    for (std::size_t ox = 0; ox < r.x_lo; ++ox) edge(ox);
    if (n > 0) {
      const T* src = row + r.x_lo * r.g.sw - r.g.pw;
      if (fast) {
        taps_fixed<3, 2>(src, out + r.x_lo, n);
      } else {
        for (std::size_t k = 0; k < n; ++k) {
          T acc = 0;
          for (std::size_t t = 0; t < r.g.kw; ++t) acc += src[k * r.g.sw + t];
          out[r.x_lo + k] = acc;
        }
      }
    }
    for (std::size_t ox = std::max(r.x_hi, r.x_lo); ox < r.ow; ++ox) edge(ox);
  }
}

/// Transpose of row_sums: adds hs[y * ow + ox] to every column of window ox.
template <typename T>
void row_scatter(const WindowRanges& r, const T* hs, T* a) {
  const bool fast = r.g.kw == 3 && r.g.sw == 2;
  const std::size_t n = r.x_hi - r.x_lo;
  for (std::size_t y = 0; y < r.h; ++y) {
    T* row = a + y * r.w;
    const T* in = hs + y * r.ow;
    auto edge = [&](std::size_t ox) {
      for (std::size_t x = r.xs[ox]; x < r.xe[ox]; ++x) row[x] += in[ox];
    };
    for (std::size_t ox = 0; ox < r.x_lo; ++ox) edge(ox);
    if (n > 0) {
      T* dst = row + r.x_lo * r.g.sw - r.g.pw;
      if (fast) {
        scatter_fixed<3, 2>(in + r.x_lo, dst, n);
      } else {
        for (std::size_t t = 0; t < r.g.kw; ++t)
          for (std::size_t k = 0; k < n; ++k) dst[k * r.g.sw + t] += in[r.x_lo + k];
      }
    }
    for (std::size_t ox = std::max(r.x_hi, r.x_lo); ox < r.ow; ++ox) edge(ox);
  }
}

/// Window sums over a plane: s[oy * ow + ox] = sum of a over the window.
/// `hs` is scratch of h * ow elements.
template <typename T>
void window_sum(const WindowRanges& r, const T* a, T* s, T* hs) {
  row_sums(r, a, hs);
  for (std::size_t oy = 0; oy < r.oh; ++oy) {
    T* out = s + oy * r.ow;
    std::fill(out, out + r.ow, T{0});
    for (std::size_t y = r.ys[oy]; y < r.ye[oy]; ++y) {
      const T* in = hs + y * r.ow;
      for (std::size_t ox = 0; ox < r.ow; ++ox) out[ox] += in[ox];
    }
  }
}

/// Transpose of window_sum: adds s[o] to each in-bounds position of window
/// o in a. `hs` is scratch of h * ow elements.
template <typename T>
void window_scatter(const WindowRanges& r, const T* s, T* a, T* hs) {
  std::fill(hs, hs + r.h * r.ow, T{0});
  for (std::size_t oy = 0; oy < r.oh; ++oy) {
    const T* in = s + oy * r.ow;
    for (std::size_t y = r.ys[oy]; y < r.ye[oy]; ++y) {
      T* out = hs + y * r.ow;
      for (std::size_t ox = 0; ox < r.ow; ++ox) out[ox] += in[ox];
    }
  }
  row_scatter(r, hs, a);
}

}  // namespace lip::detail
