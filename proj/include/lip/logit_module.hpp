#pragma once

// Logit modules and LIP layers.
//
// A logit module maps a feature map to per-channel logits in (0, 12):
//
//   projection          conv1x1(C->C)                          -> top
//   bottleneck(x)       conv1x1(C->x) IN ReLU conv3x3(x->x) IN ReLU
//                       conv1x1(x->C)                          -> top
//   shared_bottleneck   conv1x1(x->C) on the output of a SharedLogitTrunk
//                       computed once per residual block       -> top
//   conv3x3             conv3x3(C->C), the form used in place of the stem
//                       max pooling                            -> top
//
// where top = affine instance norm followed by 12 * sigmoid.

#include <charconv>
#include <memory>
#include <optional>
#include <string>

#include "lip/layers.hpp"
#include "lip/lip2d.hpp"

namespace lip {

enum class LogitKind { projection, bottleneck, shared_bottleneck, conv3x3 };

struct LogitSpec {
  LogitKind kind = LogitKind::projection;
  std::size_t width = 0;  // inner width x of the bottleneck forms

  static LogitSpec projection() { return {LogitKind::projection, 0}; }
  static LogitSpec bottleneck(std::size_t x) { return {LogitKind::bottleneck, x}; }
  static LogitSpec shared_bottleneck(std::size_t x) { return {LogitKind::shared_bottleneck, x}; }
  static LogitSpec conv3x3() { return {LogitKind::conv3x3, 0}; }

  bool operator==(const LogitSpec&) const = default;

  /// "projection", "conv3x3", "bottleneck:<x>" or "shared:<x>".
  static LogitSpec parse(const std::string& text) {
    if (text == "projection") return projection();
    if (text == "conv3x3") return conv3x3();
    const auto colon = text.find(':');
    if (colon != std::string::npos) {
      const std::string head = text.substr(0, colon);
      std::size_t x = 0;
      const char* first = text.data() + colon + 1;
      const char* last = text.data() + text.size();
      auto [ptr, ec] = std::from_chars(first, last, x);
      if (ec == std::errc{} && ptr == last && x > 0) {
        if (head == "bottleneck") return bottleneck(x);
        if (head == "shared") return shared_bottleneck(x);
      }
    }
    throw BuildError("unknown logit module '" + text +
                     "' (expected projection, conv3x3, bottleneck:<x> or shared:<x>)");
  }

  std::string str() const {
    switch (kind) {
      case LogitKind::projection: return "projection";
      case LogitKind::conv3x3: return "conv3x3";
      case LogitKind::bottleneck: return "bottleneck:" + std::to_string(width);
      case LogitKind::shared_bottleneck: return "shared:" + std::to_string(width);
    }
    return "?";
  }

  bool is_bottleneck() const {
    return kind == LogitKind::bottleneck || kind == LogitKind::shared_bottleneck;
  }
};

/// First two stages of the bottleneck logit module, shared between the
/// residual and shortcut LIPs of one block. Counts its forward calls.
template <typename T>
class SharedLogitTrunk : public Sequential<T> {
 public:
  SharedLogitTrunk(std::size_t in_channels, std::size_t width) : width_(width) {
    this->template emplace<Conv2d<T>>("conv1", in_channels, width, 1);
    this->template emplace<InstanceNorm2d<T>>("norm1", width);
    this->template emplace<ReLU<T>>("relu1");
    this->template emplace<Conv2d<T>>("conv2", width, width, 3, 1, 1);
    this->template emplace<InstanceNorm2d<T>>("norm2", width);
    this->template emplace<ReLU<T>>("relu2");
  }

  std::string kind() const override { return "shared_logit_trunk"; }

  Tensor4<T> forward(const Tensor4<T>& x) override {
    ++calls_;
    return Sequential<T>::forward(x);
  }

  std::size_t width() const { return width_; }
  std::size_t calls() const { return calls_; }
  void reset_calls() { calls_ = 0; }

 private:
  std::size_t width_;
  std::size_t calls_ = 0;
};

template <typename T>
class LogitModule : public Layer<T> {
 public:
  /// `channels` is the channel count of the map being pooled (and of the
  /// logits). Shared-bottleneck heads read the trunk output of width x.
  LogitModule(const LogitSpec& spec, std::size_t channels) : spec_(spec), channels_(channels) {
    if (channels == 0) throw BuildError("logit module needs >= 1 channel");
    if (spec.is_bottleneck() && spec.width == 0) throw BuildError("bottleneck width must be >= 1");
    switch (spec.kind) {
      case LogitKind::projection:
        last_ = &body_.template emplace<Conv2d<T>>("conv", channels, channels, 1);
        break;
      case LogitKind::conv3x3:
        last_ = &body_.template emplace<Conv2d<T>>("conv", channels, channels, 3, 1, 1);
        break;
      case LogitKind::bottleneck:
        body_.template emplace<Conv2d<T>>("conv1", channels, spec.width, 1);
        body_.template emplace<InstanceNorm2d<T>>("norm1", spec.width);
        body_.template emplace<ReLU<T>>("relu1");
        body_.template emplace<Conv2d<T>>("conv2", spec.width, spec.width, 3, 1, 1);
        body_.template emplace<InstanceNorm2d<T>>("norm2", spec.width);
        body_.template emplace<ReLU<T>>("relu2");
        last_ = &body_.template emplace<Conv2d<T>>("conv3", spec.width, channels, 1);
        break;
      case LogitKind::shared_bottleneck:
        last_ = &body_.template emplace<Conv2d<T>>("conv", spec.width, channels, 1);
        break;
    }
    norm_ = &body_.template emplace<InstanceNorm2d<T>>("norm", channels);
    gate_ = &body_.template emplace<AmplifiedSigmoid<T>>("gate", T(kLogitAmplification));
  }

  std::string kind() const override { return "logit_module"; }
  Shape4 output_shape(const Shape4& in) const override { return body_.output_shape(in); }
  Tensor4<T> forward(const Tensor4<T>& x) override { return body_.forward(x); }
  Tensor4<T> backward(const Tensor4<T>& grad_out) override { return body_.backward(grad_out); }
  std::uint64_t macs(const Shape4& in) const override { return body_.macs(in); }
  void collect_params(const std::string& prefix, std::vector<ParamRef<T>>& out) override {
    body_.collect_params(prefix, out);
  }
  void init_params(const std::string& prefix, std::uint64_t seed) override {
    body_.init_params(prefix, seed);
  }
  void relu_inputs(std::vector<const Tensor4<T>*>& out) const override { body_.relu_inputs(out); }
  void describe(const std::string& prefix, const Shape4& in, nlohmann::json& out) const override {
    body_.describe(prefix, in, out);
  }

  const LogitSpec& spec() const { return spec_; }
  std::size_t channels() const { return channels_; }
  Conv2d<T>& last_conv() { return *last_; }
  InstanceNorm2d<T>& top_norm() { return *norm_; }
  T amplification() const { return gate_->amplification(); }

 private:
  LogitSpec spec_;
  std::size_t channels_;
  Sequential<T> body_;
  Conv2d<T>* last_ = nullptr;
  InstanceNorm2d<T>* norm_ = nullptr;
  AmplifiedSigmoid<T>* gate_ = nullptr;
};

template <typename T>
Tensor4<T> logit_forward(LogitModule<T>& m, const Tensor4<T>& x) {
  return m.forward(x);
}

/// Zeroes the last convolution (kept at zero by later init_params calls)
/// and resets the top norm to identity, so the logits are the constant
/// 12 * sigmoid(0) = 6 and LIP pools exactly like average pooling. Other
/// convolutions keep their initialization.
template <typename T>
LogitModule<T>& init_as_average(LogitModule<T>& m) {
  m.last_conv().zero(true);
  m.top_norm().init_params("", 0);
  return m;
}

enum class LogitSource {
  pooled_input,  // the map being pooled feeds the logit module
  block_input,   // the block input feeds a shared trunk
};

/// One LIP: a logit module plus the pooling step.
template <typename T>
class LipLayer {
 public:
  struct Grads {
    Tensor4<T> grad_pooled;
    Tensor4<T> grad_features;  // w.r.t. shared trunk output; empty otherwise
  };

  LipLayer(const LogitSpec& spec, std::size_t channels, LipGeometry geometry = {},
           LipMode mode = LipMode::stabilized)
      : geometry_(geometry), module_(spec, channels), mode_(mode) {
    geometry_.validate();
  }

  LogitSource source() const {
    return module_.spec().kind == LogitKind::shared_bottleneck ? LogitSource::block_input
                                                               : LogitSource::pooled_input;
  }

  /// `features` must be the shared trunk output when the source is
  /// block_input and is ignored otherwise.
  Tensor4<T> forward(const Tensor4<T>& pooled, const Tensor4<T>* features = nullptr) {
    if (source() == LogitSource::block_input && features == nullptr)
      throw ShapeError("shared-bottleneck LIP needs the shared trunk output");
    pooled_ = pooled;
    logit_ = module_.forward(source() == LogitSource::block_input ? *features : pooled);
    if (logit_.shape() != pooled.shape())
      throw ShapeError("logit shape " + logit_.shape().str() + " does not match pooled map " +
                       pooled.shape().str());
    return lip2d_forward(pooled_, logit_, geometry_, mode_);
  }

  Grads backward(const Tensor4<T>& grad_out) {
    LipGrads<T> g = lip2d_backward(grad_out, pooled_, logit_, geometry_);
    Tensor4<T> grad_in = module_.backward(g.grad_logit);
    Grads out;
    if (source() == LogitSource::block_input) {
      out.grad_pooled = std::move(g.grad_x);
      out.grad_features = std::move(grad_in);
    } else {
      out.grad_pooled = map_elementwise(g.grad_x, grad_in, [](T a, T b) { return a + b; });
    }
    return out;
  }

  Shape4 output_shape(const Shape4& pooled) const { return geometry_.geom.output_shape(pooled); }

  /// Logit-module MACs plus (2k^2 + 1) per output window.
  std::uint64_t macs(const Shape4& pooled, const Shape4& module_input) const {
    const std::uint64_t k2 = geometry_.geom.window_size();
    return module_.macs(module_input) + elements(output_shape(pooled)) * (2 * k2 + 1);
  }

  LogitModule<T>& logit_module() { return module_; }
  const LogitModule<T>& logit_module() const { return module_; }
  const LipGeometry& geometry() const { return geometry_; }
  LipMode mode() const { return mode_; }
  void set_mode(LipMode m) { mode_ = m; }
  /// Logits of the last forward.
  const Tensor4<T>& last_logit() const { return logit_; }

 private:
  LipGeometry geometry_;
  LogitModule<T> module_;
  LipMode mode_;
  Tensor4<T> pooled_;
  Tensor4<T> logit_;
};

/// Runs one LIP. For the shared form the trunk is evaluated on the block
/// input here; blocks holding two shared LIPs call the trunk once
/// themselves and pass its output to LipLayer::forward.
template <typename T>
Tensor4<T> lip_layer_forward(LipLayer<T>& layer, const Tensor4<T>& block_input,
                             const Tensor4<T>& pooled_input,
                             SharedLogitTrunk<T>* trunk = nullptr) {
  if (layer.source() == LogitSource::block_input) {
    if (trunk == nullptr) throw ShapeError("shared-bottleneck LIP needs its shared trunk");
    const Tensor4<T> features = trunk->forward(block_input);
    return layer.forward(pooled_input, &features);
  }
  return layer.forward(pooled_input);
}

/// LIP as a sequential layer; the logits come from the pooled input.
template <typename T>
class Lip2d : public Layer<T> {
 public:
  Lip2d(const LogitSpec& spec, std::size_t channels, LipGeometry geometry = {},
        LipMode mode = LipMode::stabilized)
      : lip_(spec, channels, geometry, mode) {
    if (spec.kind == LogitKind::shared_bottleneck)
      throw BuildError("a standalone LIP layer cannot use a shared logit module");
  }

  std::string kind() const override { return "lip"; }
  Shape4 output_shape(const Shape4& in) const override {
    lip_.logit_module().output_shape(in);
    return lip_.output_shape(in);
  }
  Tensor4<T> forward(const Tensor4<T>& x) override { return lip_.forward(x); }
  Tensor4<T> backward(const Tensor4<T>& grad_out) override {
    return std::move(lip_.backward(grad_out).grad_pooled);
  }
  std::uint64_t macs(const Shape4& in) const override { return lip_.macs(in, in); }
  void collect_params(const std::string& prefix, std::vector<ParamRef<T>>& out) override {
    lip_.logit_module().collect_params(join_path(prefix, "logit"), out);
  }
  void init_params(const std::string& prefix, std::uint64_t seed) override {
    lip_.logit_module().init_params(join_path(prefix, "logit"), seed);
  }
  void relu_inputs(std::vector<const Tensor4<T>*>& out) const override {
    lip_.logit_module().relu_inputs(out);
  }
  void visit_lips(const std::string& prefix, const LipVisitor<T>& fn) override { fn(prefix, lip_); }
  void describe(const std::string& prefix, const Shape4& in, nlohmann::json& out) const override {
    Layer<T>::describe(prefix, in, out);
    const PoolGeometry& g = lip_.geometry().geom;
    out.back()["kernel"] = {g.kh, g.kw};
    out.back()["stride"] = {g.sh, g.sw};
    out.back()["padding"] = {g.ph, g.pw};
    out.back()["logit"] = lip_.logit_module().spec().str();
    lip_.logit_module().describe(join_path(prefix, "logit"), in, out);
  }

  LipLayer<T>& lip() { return lip_; }
  const LipLayer<T>& lip() const { return lip_; }

 private:
  LipLayer<T> lip_;
};

}  // namespace lip
