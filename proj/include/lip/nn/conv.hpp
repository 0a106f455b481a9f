#pragma once

// 2-D cross-correlation with zero padding. Lowered to GEMM through im2col;
// 1x1 stride-1 unpadded convolutions skip the lowering.

#include <vector>

#include <Eigen/Core>

#include "lip/tensor.hpp"

namespace lip {

template <typename T>
struct ConvParams {
  Tensor4<T> weights;     // (out_c, in_c, kh, kw)
  std::vector<T> bias;    // empty when the convolution has no bias
  PoolGeometry geometry;  // kernel extent mirrors the weight dims

  std::size_t out_channels() const { return weights.shape().n; }
  std::size_t in_channels() const { return weights.shape().c; }
  bool has_bias() const { return !bias.empty(); }

  void validate() const {
    const Shape4& w = weights.shape();
    if (w.numel() == 0) throw ShapeError("convolution weights are empty");
    if (geometry.kh != w.h || geometry.kw != w.w)
      throw ShapeError("convolution geometry kernel does not match weight dims");
    if (has_bias() && bias.size() != w.n) throw ShapeError("bias length must equal out_c");
    geometry.validate();
  }
};

/// Conv parameters with the given shape, zero weights and optional zero bias.
template <typename T>
ConvParams<T> make_conv(std::size_t in_c, std::size_t out_c, std::size_t kernel,
                        std::size_t stride = 1, std::size_t pad = 0, bool bias = false) {
  ConvParams<T> p;
  p.weights = Tensor4<T>({out_c, in_c, kernel, kernel});
  if (bias) p.bias.assign(out_c, T{0});
  p.geometry = PoolGeometry::square(kernel, stride, pad);
  return p;
}

template <typename T>
struct ConvGrads {
  Tensor4<T> grad_x;
  Tensor4<T> grad_weights;
  std::vector<T> grad_bias;  // empty when the convolution has no bias
};

namespace detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

inline bool is_pointwise(const PoolGeometry& g) {
  return g.kh == 1 && g.kw == 1 && g.sh == 1 && g.sw == 1 && g.ph == 0 && g.pw == 0;
}

/// Lowers sample n of x into a (in_c*kh*kw) x (oh*ow) column matrix.
template <typename T>
void im2col(const Tensor4<T>& x, std::size_t n, const PoolGeometry& g, std::size_t oh,
            std::size_t ow, T* cols) {
  const Shape4& s = x.shape();
  const std::size_t positions = oh * ow;
  std::size_t row = 0;
  for (std::size_t c = 0; c < s.c; ++c) {
    const T* plane = x.data() + x.offset(n, c, 0, 0);
    for (std::size_t dy = 0; dy < g.kh; ++dy) {
      for (std::size_t dx = 0; dx < g.kw; ++dx, ++row) {
        T* dst = cols + row * positions;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * g.sh + dy) -
                                   static_cast<std::ptrdiff_t>(g.ph);
          T* drow = dst + oy * ow;
          if (y < 0 || y >= static_cast<std::ptrdiff_t>(s.h)) {
            std::fill(drow, drow + ow, T{0});
            continue;
          }
          const T* srow = plane + static_cast<std::size_t>(y) * s.w;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const std::ptrdiff_t xx = static_cast<std::ptrdiff_t>(ox * g.sw + dx) -
                                      static_cast<std::ptrdiff_t>(g.pw);
            drow[ox] = (xx < 0 || xx >= static_cast<std::ptrdiff_t>(s.w))
                           ? T{0}
                           : srow[static_cast<std::size_t>(xx)];
          }
        }
      }
    }
  }
}

/// Scatter-adds a column matrix back into sample n of grad_x.
template <typename T>
void col2im(const T* cols, const PoolGeometry& g, std::size_t oh, std::size_t ow,
            Tensor4<T>& grad_x, std::size_t n) {
  const Shape4& s = grad_x.shape();
  const std::size_t positions = oh * ow;
  std::size_t row = 0;
  for (std::size_t c = 0; c < s.c; ++c) {
    T* plane = grad_x.data() + grad_x.offset(n, c, 0, 0);
    for (std::size_t dy = 0; dy < g.kh; ++dy) {
      for (std::size_t dx = 0; dx < g.kw; ++dx, ++row) {
        const T* src = cols + row * positions;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * g.sh + dy) -
                                   static_cast<std::ptrdiff_t>(g.ph);
          if (y < 0 || y >= static_cast<std::ptrdiff_t>(s.h)) continue;
          T* drow = plane + static_cast<std::size_t>(y) * s.w;
          const T* srow = src + oy * ow;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const std::ptrdiff_t xx = static_cast<std::ptrdiff_t>(ox * g.sw + dx) -
                                      static_cast<std::ptrdiff_t>(g.pw);
            if (xx < 0 || xx >= static_cast<std::ptrdiff_t>(s.w)) continue;
            drow[static_cast<std::size_t>(xx)] += srow[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

template <typename T>
Shape4 conv2d_output_shape(const Shape4& in, const ConvParams<T>& p) {
  p.validate();
  if (in.c != p.in_channels())
    throw ShapeError("conv2d: input has " + std::to_string(in.c) + " channels, weights expect " +
                     std::to_string(p.in_channels()));
  const Shape4 pooled = p.geometry.output_shape(in);
  return {in.n, p.out_channels(), pooled.h, pooled.w};
}

template <typename T>
Tensor4<T> conv2d_forward(const Tensor4<T>& x, const ConvParams<T>& p) {
  const Shape4 os = conv2d_output_shape(x.shape(), p);
  const std::size_t positions = os.h * os.w;
  const std::size_t k = p.in_channels() * p.geometry.kh * p.geometry.kw;
  auto out = Tensor4<T>::uninitialized(os);
  detail::ConstMatMap<T> wmat(p.weights.data(), static_cast<Eigen::Index>(os.c),
                              static_cast<Eigen::Index>(k));
  const bool pointwise = detail::is_pointwise(p.geometry);
  Buffer<T> cols(pointwise ? 0 : k * positions);
  for (std::size_t n = 0; n < os.n; ++n) {
    const T* colptr = x.data() + x.offset(n, 0, 0, 0);
    if (!pointwise) {
      detail::im2col(x, n, p.geometry, os.h, os.w, cols.data());
      colptr = cols.data();
    }
    detail::ConstMatMap<T> cmat(colptr, static_cast<Eigen::Index>(k),
                                static_cast<Eigen::Index>(positions));
    detail::MatMap<T> omat(out.data() + out.offset(n, 0, 0, 0), static_cast<Eigen::Index>(os.c),
                           static_cast<Eigen::Index>(positions));
    omat.noalias() = wmat * cmat;
    if (p.has_bias())
      for (std::size_t oc = 0; oc < os.c; ++oc) omat.row(static_cast<Eigen::Index>(oc)).array() += p.bias[oc];
  }
  return out;
}

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor4<T>& grad_out, const Tensor4<T>& x,
                             const ConvParams<T>& p) {
  const Shape4 os = conv2d_output_shape(x.shape(), p);
  if (grad_out.shape() != os)
    throw ShapeError("conv2d_backward: grad_out shape " + grad_out.shape().str() +
                     " does not match forward output " + os.str());
  const std::size_t positions = os.h * os.w;
  const std::size_t k = p.in_channels() * p.geometry.kh * p.geometry.kw;
  const bool pointwise = detail::is_pointwise(p.geometry);
  ConvGrads<T> g{pointwise ? Tensor4<T>::uninitialized(x.shape()) : Tensor4<T>(x.shape()),
                 Tensor4<T>(p.weights.shape()), {}};
  if (p.has_bias()) g.grad_bias.assign(os.c, T{0});

  detail::ConstMatMap<T> wmat(p.weights.data(), static_cast<Eigen::Index>(os.c),
                              static_cast<Eigen::Index>(k));
  detail::MatMap<T> gw(g.grad_weights.data(), static_cast<Eigen::Index>(os.c),
                       static_cast<Eigen::Index>(k));
  Buffer<T> cols(pointwise ? 0 : k * positions);
  Buffer<T> gcols(pointwise ? 0 : k * positions);
  for (std::size_t n = 0; n < os.n; ++n) {
    detail::ConstMatMap<T> gmat(grad_out.data() + grad_out.offset(n, 0, 0, 0),
                                static_cast<Eigen::Index>(os.c),
                                static_cast<Eigen::Index>(positions));
    if (p.has_bias())
      for (std::size_t oc = 0; oc < os.c; ++oc) g.grad_bias[oc] += gmat.row(static_cast<Eigen::Index>(oc)).sum();
    if (pointwise) {
      detail::ConstMatMap<T> cmat(x.data() + x.offset(n, 0, 0, 0), static_cast<Eigen::Index>(k),
                                  static_cast<Eigen::Index>(positions));
      gw.noalias() += gmat * cmat.transpose();
      detail::MatMap<T> gx(g.grad_x.data() + g.grad_x.offset(n, 0, 0, 0),
                           static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(positions));
      gx.noalias() = wmat.transpose() * gmat;
      continue;
    }
    detail::im2col(x, n, p.geometry, os.h, os.w, cols.data());
    detail::ConstMatMap<T> cmat(cols.data(), static_cast<Eigen::Index>(k),
                                static_cast<Eigen::Index>(positions));
    gw.noalias() += gmat * cmat.transpose();
    detail::MatMap<T> gc(gcols.data(), static_cast<Eigen::Index>(k),
                         static_cast<Eigen::Index>(positions));
    gc.noalias() = wmat.transpose() * gmat;
    detail::col2im(gcols.data(), p.geometry, os.h, os.w, g.grad_x, n);
  }
  return g;
}

/// Multiply-accumulates of one forward pass.
inline std::uint64_t conv2d_macs(const Shape4& out, std::size_t in_c, std::size_t kh,
                                 std::size_t kw) {
  return static_cast<std::uint64_t>(out.n) * out.c * out.h * out.w * in_c * kh * kw;
}

}  // namespace lip
