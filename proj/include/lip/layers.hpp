#pragma once

// Stateful layers built on the stateless kernels. A layer caches what its
// backward needs during forward, accumulates parameter gradients in
// backward, and reports its output shape and multiply-accumulate cost for a
// given input shape so graphs can be counted without being executed.

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "lip/nn/activation.hpp"
#include "lip/nn/conv.hpp"
#include "lip/nn/instance_norm.hpp"
#include "lip/nn/pooling.hpp"
#include "lip/nn/sgd.hpp"

namespace lip {

/// FNV-1a, used to derive per-parameter init seeds from parameter paths so
/// identically named parameters initialize identically across variants.
inline std::uint64_t path_hash(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string join_path(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

inline nlohmann::json shape_json(const Shape4& s) { return {s.n, s.c, s.h, s.w}; }

inline std::uint64_t elements(const Shape4& s) { return static_cast<std::uint64_t>(s.numel()); }

template <typename T>
class LipLayer;

template <typename T>
using LipVisitor = std::function<void(const std::string& path, LipLayer<T>& lip)>;

template <typename T>
class Layer {
 public:
  virtual ~Layer() = default;

  virtual std::string kind() const = 0;
  /// Throws ShapeError / GeometryError when the input shape is not accepted.
  virtual Shape4 output_shape(const Shape4& in) const = 0;
  virtual Tensor4<T> forward(const Tensor4<T>& x) = 0;
  /// Gradient w.r.t. the input of the last forward; parameter gradients
  /// are accumulated.
  virtual Tensor4<T> backward(const Tensor4<T>& grad_out) = 0;
  virtual std::uint64_t macs(const Shape4& in) const = 0;

  virtual void collect_params(const std::string& /*prefix*/, std::vector<ParamRef<T>>& /*out*/) {}
  /// Re-initializes parameters from (seed, parameter path).
  virtual void init_params(const std::string& /*prefix*/, std::uint64_t /*seed*/) {}
  /// Appends one manifest record per leaf layer.
  virtual void describe(const std::string& prefix, const Shape4& in, nlohmann::json& out) const {
    out.push_back({{"path", prefix},
                   {"kind", kind()},
                   {"input", shape_json(in)},
                   {"output", shape_json(output_shape(in))}});
  }

  /// Cached ReLU inputs of the last forward, i.e. where the network has kinks.
  virtual void relu_inputs(std::vector<const Tensor4<T>*>& /*out*/) const {}
  /// Calls fn(path, lip) for every LIP in the tree.
  virtual void visit_lips(const std::string& /*prefix*/, const LipVisitor<T>& /*fn*/) {}

  std::vector<ParamRef<T>> parameters(const std::string& prefix = "") {
    std::vector<ParamRef<T>> out;
    collect_params(prefix, out);
    return out;
  }

  void zero_grad() {
    for (auto& p : parameters()) std::fill(p.grad.begin(), p.grad.end(), T{0});
  }
};

template <typename T>
using LayerPtr = std::unique_ptr<Layer<T>>;

/// He-normal fill: zero mean, variance 2 / fan_in.
template <typename T>
void he_normal(std::span<T> w, std::size_t fan_in, std::uint64_t seed) {
  Rng rng(seed);
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (T& v : w) v = static_cast<T>(rng.normal(0.0, stddev));
}

template <typename T>
class Conv2d : public Layer<T> {
 public:
  Conv2d(std::size_t in_c, std::size_t out_c, std::size_t kernel, std::size_t stride = 1,
         std::size_t pad = 0, bool bias = false)
      : params_(make_conv<T>(in_c, out_c, kernel, stride, pad, bias)),
        grad_w_(params_.weights.shape()),
        grad_b_(params_.bias.size(), T{0}) {}

  std::string kind() const override { return "conv2d"; }
  Shape4 output_shape(const Shape4& in) const override { return conv2d_output_shape(in, params_); }

  Tensor4<T> forward(const Tensor4<T>& x) override {
    input_ = x;
    return conv2d_forward(x, params_);
  }

  Tensor4<T> backward(const Tensor4<T>& grad_out) override {
    ConvGrads<T> g = conv2d_backward(grad_out, input_, params_);
    for (std::size_t i = 0; i < grad_w_.numel(); ++i) grad_w_.data()[i] += g.grad_weights.data()[i];
    for (std::size_t i = 0; i < grad_b_.size(); ++i) grad_b_[i] += g.grad_bias[i];
    return std::move(g.grad_x);
  }

  std::uint64_t macs(const Shape4& in) const override {
    return conv2d_macs(output_shape(in), params_.in_channels(), params_.geometry.kh,
                       params_.geometry.kw);
  }

  void collect_params(const std::string& prefix, std::vector<ParamRef<T>>& out) override {
    out.push_back({join_path(prefix, "weight"), params_.weights.shape(), params_.weights.span(),
                   grad_w_.span()});
    if (params_.has_bias())
      out.push_back({join_path(prefix, "bias"), {params_.bias.size(), 1, 1, 1},
                     std::span<T>(params_.bias), std::span<T>(grad_b_)});
  }

  void init_params(const std::string& prefix, std::uint64_t seed) override {
    if (zero_init_) {
      zero();
      return;
    }
    const std::size_t fan_in = params_.in_channels() * params_.geometry.kh * params_.geometry.kw;
    he_normal(params_.weights.span(), fan_in, derive_seed(seed, path_hash(join_path(prefix, "weight"))));
    std::fill(params_.bias.begin(), params_.bias.end(), T{0});
  }

  void describe(const std::string& prefix, const Shape4& in, nlohmann::json& out) const override {
    Layer<T>::describe(prefix, in, out);
    const PoolGeometry& g = params_.geometry;
    out.back()["kernel"] = {g.kh, g.kw};
    out.back()["stride"] = {g.sh, g.sw};
    out.back()["padding"] = {g.ph, g.pw};
    out.back()["bias"] = params_.has_bias();
  }

  /// Zeroes weights and bias; with `keep` set, later init_params calls keep
  /// them at zero.
  void zero(bool keep = false) {
    params_.weights.fill(T{0});
    std::fill(params_.bias.begin(), params_.bias.end(), T{0});
    if (keep) zero_init_ = true;
  }

  ConvParams<T>& params() { return params_; }
  const ConvParams<T>& params() const { return params_; }

 private:
  ConvParams<T> params_;
  Tensor4<T> grad_w_;
  std::vector<T> grad_b_;
  Tensor4<T> input_;
  bool zero_init_ = false;
};

template <typename T>
class InstanceNorm2d : public Layer<T> {
 public:
  explicit InstanceNorm2d(std::size_t channels)
      : params_(channels), grad_gamma_(channels, T{0}), grad_beta_(channels, T{0}) {}

  std::string kind() const override { return "instance_norm"; }
  Shape4 output_shape(const Shape4& in) const override {
    params_.validate(in.c);
    return in;
  }
  Tensor4<T> forward(const Tensor4<T>& x) override {
    input_ = x;
    return instance_norm_forward(x, params_);
  }
  Tensor4<T> backward(const Tensor4<T>& grad_out) override {
    InstanceNormGrads<T> g = instance_norm_backward(grad_out, input_, params_);
    for (std::size_t c = 0; c < grad_gamma_.size(); ++c) {
      grad_gamma_[c] += g.grad_gamma[c];
      grad_beta_[c] += g.grad_beta[c];
    }
    return std::move(g.grad_x);
  }
  std::uint64_t macs(const Shape4& in) const override { return elements(in); }

  void collect_params(const std::string& prefix, std::vector<ParamRef<T>>& out) override {
    const Shape4 s{params_.channels(), 1, 1, 1};
    out.push_back({join_path(prefix, "gamma"), s, std::span<T>(params_.gamma), std::span<T>(grad_gamma_)});
    out.push_back({join_path(prefix, "beta"), s, std::span<T>(params_.beta), std::span<T>(grad_beta_)});
  }
  void init_params(const std::string&, std::uint64_t) override {
    std::fill(params_.gamma.begin(), params_.gamma.end(), T{1});
    std::fill(params_.beta.begin(), params_.beta.end(), T{0});
  }

  InstanceNormParams<T>& params() { return params_; }

 private:
  InstanceNormParams<T> params_;
  std::vector<T> grad_gamma_, grad_beta_;
  Tensor4<T> input_;
};

/// Per-channel scale and shift. Stands in for batch normalization in the
/// full-size graphs that are only counted, never trained.
template <typename T>
class ChannelAffine : public Layer<T> {
 public:
  explicit ChannelAffine(std::size_t channels)
      : gamma_(channels, T{1}), beta_(channels, T{0}), grad_gamma_(channels, T{0}),
        grad_beta_(channels, T{0}) {}

  std::string kind() const override { return "channel_affine"; }
  Shape4 output_shape(const Shape4& in) const override {
    if (in.c != gamma_.size()) throw ShapeError("channel_affine: channel mismatch");
    return in;
  }
  Tensor4<T> forward(const Tensor4<T>& x) override {
    output_shape(x.shape());
    input_ = x;
    auto y = Tensor4<T>::uninitialized(x.shape());
    for (std::size_t n = 0; n < x.shape().n; ++n)
      for (std::size_t c = 0; c < x.shape().c; ++c) {
        auto src = x.plane(n, c);
        auto dst = y.plane(n, c);
        for (std::size_t i = 0; i < src.size(); ++i) dst[i] = gamma_[c] * src[i] + beta_[c];
      }
    return y;
  }
  Tensor4<T> backward(const Tensor4<T>& grad_out) override {
    auto gx = Tensor4<T>::uninitialized(input_.shape());
    for (std::size_t n = 0; n < gx.shape().n; ++n)
      for (std::size_t c = 0; c < gx.shape().c; ++c) {
        auto go = grad_out.plane(n, c);
        auto xi = input_.plane(n, c);
        auto gi = gx.plane(n, c);
        for (std::size_t i = 0; i < go.size(); ++i) {
          grad_gamma_[c] += go[i] * xi[i];
          grad_beta_[c] += go[i];
          gi[i] = gamma_[c] * go[i];
        }
      }
    return gx;
  }
  std::uint64_t macs(const Shape4& in) const override { return elements(in); }
  void collect_params(const std::string& prefix, std::vector<ParamRef<T>>& out) override {
    const Shape4 s{gamma_.size(), 1, 1, 1};
    out.push_back({join_path(prefix, "gamma"), s, std::span<T>(gamma_), std::span<T>(grad_gamma_)});
    out.push_back({join_path(prefix, "beta"), s, std::span<T>(beta_), std::span<T>(grad_beta_)});
  }
  void init_params(const std::string&, std::uint64_t) override {
    std::fill(gamma_.begin(), gamma_.end(), T{1});
    std::fill(beta_.begin(), beta_.end(), T{0});
  }

 private:
  std::vector<T> gamma_, beta_, grad_gamma_, grad_beta_;
  Tensor4<T> input_;
};

template <typename T>
class ReLU : public Layer<T> {
 public:
  std::string kind() const override { return "relu"; }
  Shape4 output_shape(const Shape4& in) const override { return in; }
  Tensor4<T> forward(const Tensor4<T>& x) override {
    input_ = x;
    return relu_forward(x);
  }
  Tensor4<T> backward(const Tensor4<T>& grad_out) override { return relu_backward(grad_out, input_); }
  std::uint64_t macs(const Shape4& in) const override { return elements(in); }
  void relu_inputs(std::vector<const Tensor4<T>*>& out) const override { out.push_back(&input_); }

 private:
  Tensor4<T> input_;
};

template <typename T>
class AmplifiedSigmoid : public Layer<T> {
 public:
  explicit AmplifiedSigmoid(T amplification = T(kLogitAmplification)) : a_(amplification) {}
  std::string kind() const override { return "amplified_sigmoid"; }
  Shape4 output_shape(const Shape4& in) const override { return in; }
  Tensor4<T> forward(const Tensor4<T>& x) override {
    input_ = x;
    return sigmoid_amplified(x, a_);
  }
  Tensor4<T> backward(const Tensor4<T>& grad_out) override {
    return sigmoid_amplified_backward(grad_out, input_, a_);
  }
  std::uint64_t macs(const Shape4& in) const override { return elements(in); }
  T amplification() const { return a_; }

 private:
  T a_;
  Tensor4<T> input_;
};

template <typename T>
class AvgPool2d : public Layer<T> {
 public:
  explicit AvgPool2d(const PoolGeometry& g) : g_(g) { g_.validate(); }
  std::string kind() const override { return "avg_pool"; }
  Shape4 output_shape(const Shape4& in) const override { return g_.output_shape(in); }
  Tensor4<T> forward(const Tensor4<T>& x) override {
    in_shape_ = x.shape();
    return avg_pool2d_forward(x, g_);
  }
  Tensor4<T> backward(const Tensor4<T>& grad_out) override {
    return avg_pool2d_backward(grad_out, in_shape_, g_);
  }
  std::uint64_t macs(const Shape4& in) const override {
    return elements(output_shape(in)) * g_.window_size();
  }
  void describe(const std::string& prefix, const Shape4& in, nlohmann::json& out) const override {
    Layer<T>::describe(prefix, in, out);
    out.back()["kernel"] = {g_.kh, g_.kw};
    out.back()["stride"] = {g_.sh, g_.sw};
    out.back()["padding"] = {g_.ph, g_.pw};
  }

 private:
  PoolGeometry g_;
  Shape4 in_shape_{};
};

template <typename T>
class MaxPool2d : public Layer<T> {
 public:
  explicit MaxPool2d(const PoolGeometry& g) : g_(g) { g_.validate(); }
  std::string kind() const override { return "max_pool"; }
  Shape4 output_shape(const Shape4& in) const override { return g_.output_shape(in); }
  Tensor4<T> forward(const Tensor4<T>& x) override {
    input_ = x;
    return max_pool2d_forward(x, g_);
  }
  Tensor4<T> backward(const Tensor4<T>& grad_out) override {
    return max_pool2d_backward(grad_out, input_, g_);
  }
  std::uint64_t macs(const Shape4& in) const override {
    return elements(output_shape(in)) * g_.window_size();
  }
  void describe(const std::string& prefix, const Shape4& in, nlohmann::json& out) const override {
    Layer<T>::describe(prefix, in, out);
    out.back()["kernel"] = {g_.kh, g_.kw};
    out.back()["stride"] = {g_.sh, g_.sw};
    out.back()["padding"] = {g_.ph, g_.pw};
  }

 private:
  PoolGeometry g_;
  Tensor4<T> input_;
};

template <typename T>
class GlobalAvgPool : public Layer<T> {
 public:
  std::string kind() const override { return "global_avg_pool"; }
  Shape4 output_shape(const Shape4& in) const override { return {in.n, in.c, 1, 1}; }
  Tensor4<T> forward(const Tensor4<T>& x) override {
    in_shape_ = x.shape();
    return reduce_spatial(x, SpatialStat::mean);
  }
  Tensor4<T> backward(const Tensor4<T>& grad_out) override {
    auto gx = Tensor4<T>::uninitialized(in_shape_);
    const T inv = T{1} / static_cast<T>(in_shape_.plane());
    for (std::size_t n = 0; n < in_shape_.n; ++n)
      for (std::size_t c = 0; c < in_shape_.c; ++c) {
        const T g = grad_out(n, c, 0, 0) * inv;
        for (T& v : gx.plane(n, c)) v = g;
      }
    return gx;
  }
  std::uint64_t macs(const Shape4& in) const override { return elements(in); }

 private:
  Shape4 in_shape_{};
};

/// Fully connected layer on (n, features, 1, 1) inputs.
template <typename T>
class Linear : public Layer<T> {
 public:
  Linear(std::size_t in_features, std::size_t out_features, double init_std = 0.01)
      : conv_(in_features, out_features, 1, 1, 0, true), init_std_(init_std) {}

  std::string kind() const override { return "linear"; }
  Shape4 output_shape(const Shape4& in) const override {
    if (in.h != 1 || in.w != 1) throw ShapeError("linear expects (n, features, 1, 1) input");
    return conv_.output_shape(in);
  }
  Tensor4<T> forward(const Tensor4<T>& x) override {
    output_shape(x.shape());
    return conv_.forward(x);
  }
  Tensor4<T> backward(const Tensor4<T>& grad_out) override { return conv_.backward(grad_out); }
  std::uint64_t macs(const Shape4& in) const override { return conv_.macs(in); }
  void collect_params(const std::string& prefix, std::vector<ParamRef<T>>& out) override {
    conv_.collect_params(prefix, out);
  }
  void init_params(const std::string& prefix, std::uint64_t seed) override {
    Rng rng(derive_seed(seed, path_hash(join_path(prefix, "weight"))));
    for (T& v : conv_.params().weights.values()) v = static_cast<T>(rng.normal(0.0, init_std_));
    std::fill(conv_.params().bias.begin(), conv_.params().bias.end(), T{0});
  }

 private:
  Conv2d<T> conv_;
  double init_std_;
};

/// Named layers applied in order.
template <typename T>
class Sequential : public Layer<T> {
 public:
  Sequential() = default;

  template <typename L>
  L& add(std::string name, std::unique_ptr<L> layer) {
    L& ref = *layer;
    layers_.emplace_back(std::move(name), std::move(layer));
    return ref;
  }

  template <typename L, typename... Args>
  L& emplace(std::string name, Args&&... args) {
    return add(std::move(name), std::make_unique<L>(std::forward<Args>(args)...));
  }

  std::string kind() const override { return "sequential"; }

  Shape4 output_shape(const Shape4& in) const override {
    Shape4 s = in;
    for (const auto& [name, layer] : layers_) s = layer->output_shape(s);
    return s;
  }

  Tensor4<T> forward(const Tensor4<T>& x) override {
    if (layers_.empty()) return x;
    Tensor4<T> h = layers_.front().second->forward(x);
    for (std::size_t i = 1; i < layers_.size(); ++i) h = layers_[i].second->forward(h);
    return h;
  }

  Tensor4<T> backward(const Tensor4<T>& grad_out) override {
    if (layers_.empty()) return grad_out;
    Tensor4<T> g = layers_.back().second->backward(grad_out);
    for (std::size_t i = layers_.size() - 1; i-- > 0;) g = layers_[i].second->backward(g);
    return g;
  }

  std::uint64_t macs(const Shape4& in) const override {
    std::uint64_t total = 0;
    Shape4 s = in;
    for (const auto& [name, layer] : layers_) {
      total += layer->macs(s);
      s = layer->output_shape(s);
    }
    return total;
  }

  void collect_params(const std::string& prefix, std::vector<ParamRef<T>>& out) override {
    for (auto& [name, layer] : layers_) layer->collect_params(join_path(prefix, name), out);
  }

  void init_params(const std::string& prefix, std::uint64_t seed) override {
    for (auto& [name, layer] : layers_) layer->init_params(join_path(prefix, name), seed);
  }

  void relu_inputs(std::vector<const Tensor4<T>*>& out) const override {
    for (const auto& [name, layer] : layers_) layer->relu_inputs(out);
  }

  void visit_lips(const std::string& prefix, const LipVisitor<T>& fn) override {
    for (auto& [name, layer] : layers_) layer->visit_lips(join_path(prefix, name), fn);
  }

  void describe(const std::string& prefix, const Shape4& in, nlohmann::json& out) const override {
    Shape4 s = in;
    for (const auto& [name, layer] : layers_) {
      layer->describe(join_path(prefix, name), s, out);
      s = layer->output_shape(s);
    }
  }

  std::size_t size() const { return layers_.size(); }
  bool empty() const { return layers_.empty(); }
  Layer<T>& at(std::size_t i) { return *layers_.at(i).second; }
  const Layer<T>& at(std::size_t i) const { return *layers_.at(i).second; }
  const std::string& name_at(std::size_t i) const { return layers_.at(i).first; }
  Layer<T>& back() { return *layers_.back().second; }

  /// First layer with the given name, or nullptr.
  Layer<T>* find(const std::string& name) {
    for (auto& [n, layer] : layers_)
      if (n == name) return layer.get();
    return nullptr;
  }

 private:
  std::vector<std::pair<std::string, LayerPtr<T>>> layers_;
};

}  // namespace lip
