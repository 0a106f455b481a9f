#pragma once

// Dense 4-D tensors in (batch, channel, row, col) order plus the sliding
// window geometry every pooling operator in the library shares.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <new>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "lip/errors.hpp"
#include "lip/rng.hpp"

namespace lip {

/// Allocator with 64-byte alignment. Vectorized kernels treat unaligned
/// leading elements differently, so a fixed alignment keeps results
/// reproducible from run to run.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }

  // Sized construction leaves scalars uninitialized; fills stay explicit.
  template <typename U>
  void construct(U* p) noexcept(std::is_nothrow_default_constructible_v<U>) {
    ::new (static_cast<void*>(p)) U;
  }
  template <typename U, typename... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

struct Shape4 {
  std::size_t n = 0;
  std::size_t c = 0;
  std::size_t h = 0;
  std::size_t w = 0;

  std::size_t numel() const { return n * c * h * w; }
  std::size_t plane() const { return h * w; }
  bool operator==(const Shape4&) const = default;

  std::string str() const {
    std::ostringstream os;
    os << '(' << n << ',' << c << ',' << h << ',' << w << ')';
    return os.str();
  }
};

/// Throws ShapeError unless every dim is >= 1 and the element count fits.
inline void validate_shape(const Shape4& s) {
  const std::size_t dims[4] = {s.n, s.c, s.h, s.w};
  std::size_t total = 1;
  for (std::size_t d : dims) {
    if (d == 0) throw ShapeError("tensor dims must be >= 1, got " + s.str());
    if (total > std::numeric_limits<std::size_t>::max() / d)
      throw ShapeError("tensor element count overflows for shape " + s.str());
    total *= d;
  }
  // Keep byte counts representable too.
  if (total > std::numeric_limits<std::size_t>::max() / sizeof(double))
    throw ShapeError("tensor byte size overflows for shape " + s.str());
}

/// Kernel extent, stride and symmetric padding of a sliding window.
struct PoolGeometry {
  std::size_t kh = 1, kw = 1;
  std::size_t sh = 1, sw = 1;
  std::size_t ph = 0, pw = 0;

  static PoolGeometry square(std::size_t kernel, std::size_t stride, std::size_t pad = 0) {
    return {kernel, kernel, stride, stride, pad, pad};
  }

  bool operator==(const PoolGeometry&) const = default;

  std::size_t window_size() const { return kh * kw; }

  /// Rejects zero extents and padding that would allow a window lying fully
  /// in the padded border.
  void validate() const {
    if (kh == 0 || kw == 0 || sh == 0 || sw == 0)
      throw GeometryError("kernel and stride must be >= 1");
    if (ph >= kh || pw >= kw)
      throw GeometryError("padding must be smaller than the kernel extent");
  }

  std::size_t out_h(std::size_t h) const { return out_extent(h, kh, sh, ph); }
  std::size_t out_w(std::size_t w) const { return out_extent(w, kw, sw, pw); }

  Shape4 output_shape(const Shape4& in) const {
    validate();
    return {in.n, in.c, out_h(in.h), out_w(in.w)};
  }

 private:
  static std::size_t out_extent(std::size_t size, std::size_t k, std::size_t s, std::size_t p) {
    if (size + 2 * p < k) {
      std::ostringstream os;
      os << "window of extent " << k << " does not fit input extent " << size << " with padding "
         << p;
      throw GeometryError(os.str());
    }
    return (size + 2 * p - k) / s + 1;
  }
};

template <typename T>
class Tensor4 {
  static_assert(std::is_floating_point_v<T>, "Tensor4 holds real scalars");

 public:
  using value_type = T;

  /// Empty placeholder (numel 0). Every other constructor validates dims.
  Tensor4() = default;

  explicit Tensor4(const Shape4& shape, T fill = T{}) : shape_(shape) {
    validate_shape(shape_);
    data_ = Buffer<T>(shape_.numel(), fill);
  }

  /// Storage with unspecified contents, for kernels that write every element.
  static Tensor4 uninitialized(const Shape4& shape) {
    validate_shape(shape);
    Tensor4 t;
    t.shape_ = shape;
    t.data_ = Buffer<T>(shape.numel());
    return t;
  }

  Tensor4(const Shape4& shape, const std::vector<T>& values)
      : shape_(shape), data_(values.begin(), values.end()) {
    validate_shape(shape_);
    if (data_.size() != shape_.numel())
      throw ShapeError("buffer length does not match shape " + shape_.str());
  }

  const Shape4& shape() const { return shape_; }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t offset(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    return ((n * shape_.c + c) * shape_.h + y) * shape_.w + x;
  }

  T& operator()(std::size_t n, std::size_t c, std::size_t y, std::size_t x) {
    return data_[offset(n, c, y, x)];
  }
  const T& operator()(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    return data_[offset(n, c, y, x)];
  }

  T& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) {
    check_index(n, c, y, x);
    return (*this)(n, c, y, x);
  }
  const T& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    check_index(n, c, y, x);
    return (*this)(n, c, y, x);
  }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> span() { return data_; }
  std::span<const T> span() const { return data_; }
  Buffer<T>& values() { return data_; }
  const Buffer<T>& values() const { return data_; }

  /// One (n, c) spatial plane.
  std::span<T> plane(std::size_t n, std::size_t c) {
    return {data_.data() + offset(n, c, 0, 0), shape_.plane()};
  }
  std::span<const T> plane(std::size_t n, std::size_t c) const {
    return {data_.data() + offset(n, c, 0, 0), shape_.plane()};
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <typename U>
  Tensor4<U> cast() const {
    Tensor4<U> out(shape_);
    std::transform(data_.begin(), data_.end(), out.data(), [](T v) { return static_cast<U>(v); });
    return out;
  }

  bool operator==(const Tensor4&) const = default;

 private:
  void check_index(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    if (n >= shape_.n || c >= shape_.c || y >= shape_.h || x >= shape_.w)
      throw IndexError("tensor index out of range for shape " + shape_.str());
  }

  Shape4 shape_{};
  Buffer<T> data_;
};

template <typename T>
void require_same_shape(const Tensor4<T>& a, const Tensor4<T>& b, const char* what) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(what) + ": shape mismatch " + a.shape().str() + " vs " +
                     b.shape().str());
}

/// Constant-filled tensor.
template <typename T>
Tensor4<T> tensor_new(const Shape4& shape, T fill) {
  return Tensor4<T>(shape, fill);
}

/// Tensor filled in linear order from a generator `T gen()`.
template <typename T, typename Gen>
  requires std::is_invocable_r_v<T, Gen&>
Tensor4<T> tensor_new(const Shape4& shape, Gen&& gen) {
  Tensor4<T> t(shape);
  for (auto& v : t.values()) v = gen();
  return t;
}

/// Uniform [lo, hi) entries from a fresh generator seeded with `seed`.
template <typename T>
Tensor4<T> random_uniform(const Shape4& shape, std::uint64_t seed, double lo = 0.0,
                          double hi = 1.0) {
  Rng rng(seed);
  return tensor_new<T>(shape, [&] { return static_cast<T>(rng.uniform(lo, hi)); });
}

template <typename T>
Tensor4<T> random_normal(const Shape4& shape, std::uint64_t seed, double mean = 0.0,
                         double stddev = 1.0) {
  Rng rng(seed);
  return tensor_new<T>(shape, [&] { return static_cast<T>(rng.normal(mean, stddev)); });
}

/// The in-bounds part of one sliding window. `mask` has one flag per kernel
/// offset in row-major order; `values` holds only the in-bounds entries.
template <typename T>
struct WindowView {
  std::vector<T> values;
  std::vector<bool> mask;
  std::ptrdiff_t origin_x = 0;
  std::ptrdiff_t origin_y = 0;

  std::size_t valid_count() const { return values.size(); }
  std::size_t masked_count() const { return mask.size() - values.size(); }
};

/// Clipped row/column range of one window. All pooling kernels iterate with
/// this so padding is never materialized.
struct WindowBounds {
  std::ptrdiff_t y0, x0;     // origin in input coordinates (may be negative)
  std::size_t ys, ye, xs, xe;  // in-bounds half-open ranges

  std::size_t count() const { return (ye - ys) * (xe - xs); }
};

inline WindowBounds window_bounds(const PoolGeometry& g, std::size_t h, std::size_t w,
                                  std::size_t oy, std::size_t ox) {
  WindowBounds b{};
  b.y0 = static_cast<std::ptrdiff_t>(oy * g.sh) - static_cast<std::ptrdiff_t>(g.ph);
  b.x0 = static_cast<std::ptrdiff_t>(ox * g.sw) - static_cast<std::ptrdiff_t>(g.pw);
  const std::ptrdiff_t y1 = b.y0 + static_cast<std::ptrdiff_t>(g.kh);
  const std::ptrdiff_t x1 = b.x0 + static_cast<std::ptrdiff_t>(g.kw);
  b.ys = static_cast<std::size_t>(std::max<std::ptrdiff_t>(b.y0, 0));
  b.xs = static_cast<std::size_t>(std::max<std::ptrdiff_t>(b.x0, 0));
  b.ye = static_cast<std::size_t>(std::min<std::ptrdiff_t>(y1, static_cast<std::ptrdiff_t>(h)));
  b.xe = static_cast<std::size_t>(std::min<std::ptrdiff_t>(x1, static_cast<std::ptrdiff_t>(w)));
  return b;
}

template <typename T>
WindowView<T> window_extract(const Tensor4<T>& t, std::size_t n, std::size_t c,
                             const PoolGeometry& geom, std::size_t out_x, std::size_t out_y) {
  const Shape4 out = geom.output_shape(t.shape());
  if (n >= t.shape().n || c >= t.shape().c) throw IndexError("window_extract: bad (n, c)");
  if (out_x >= out.w || out_y >= out.h) throw IndexError("window_extract: output position out of range");
  const WindowBounds b = window_bounds(geom, t.shape().h, t.shape().w, out_y, out_x);

  WindowView<T> view;
  view.origin_x = b.x0;
  view.origin_y = b.y0;
  view.mask.assign(geom.window_size(), false);
  view.values.reserve(b.count());
  for (std::size_t dy = 0; dy < geom.kh; ++dy) {
    const std::ptrdiff_t y = b.y0 + static_cast<std::ptrdiff_t>(dy);
    if (y < 0 || y >= static_cast<std::ptrdiff_t>(t.shape().h)) continue;
    for (std::size_t dx = 0; dx < geom.kw; ++dx) {
      const std::ptrdiff_t x = b.x0 + static_cast<std::ptrdiff_t>(dx);
      if (x < 0 || x >= static_cast<std::ptrdiff_t>(t.shape().w)) continue;
      view.mask[dy * geom.kw + dx] = true;
      view.values.push_back(t(n, c, static_cast<std::size_t>(y), static_cast<std::size_t>(x)));
    }
  }
  return view;
}

template <typename T, typename F>
Tensor4<T> map_elementwise(const Tensor4<T>& a, const Tensor4<T>& b, F&& f) {
  require_same_shape(a, b, "map_elementwise");
  auto out = Tensor4<T>::uninitialized(a.shape());
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  for (std::size_t i = 0; i < a.numel(); ++i) po[i] = f(pa[i], pb[i]);
  return out;
}

template <typename T, typename F>
Tensor4<T> map_elementwise(const Tensor4<T>& a, T b, F&& f) {
  auto out = Tensor4<T>::uninitialized(a.shape());
  const T* pa = a.data();
  T* po = out.data();
  for (std::size_t i = 0; i < a.numel(); ++i) po[i] = f(pa[i], b);
  return out;
}

enum class SpatialStat { mean, variance };

/// Per-(n, c) mean or population variance over the spatial plane, returned
/// as an (n, c, 1, 1) tensor. Variance is computed in two passes.
template <typename T>
Tensor4<T> reduce_spatial(const Tensor4<T>& t, SpatialStat stat) {
  const Shape4& s = t.shape();
  Tensor4<T> out({s.n, s.c, 1, 1});
  const T count = static_cast<T>(s.plane());
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      auto p = t.plane(n, c);
      T sum = 0;
      for (T v : p) sum += v;
      const T mean = sum / count;
      if (stat == SpatialStat::mean) {
        out(n, c, 0, 0) = mean;
        continue;
      }
      T sq = 0;
      for (T v : p) sq += (v - mean) * (v - mean);
      out(n, c, 0, 0) = sq / count;
    }
  }
  return out;
}

}  // namespace lip
