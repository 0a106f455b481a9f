#pragma once

// Residual bottleneck block with a selectable downsampling operator:
//
//   strided_conv   residual 3x3/s2 conv,            shortcut 1x1/s2 conv
//   avgpool_conv   3x3/s2 avg pool then 1x1 conv in both branches
//   lip_conv       3x3/s2 LIP then 1x1 conv in both branches
//
// The residual branch is conv1x1(in->width) -> down -> conv1x1(width->out),
// with an optional per-channel affine (batch-norm stand-in) after each conv
// and ReLU after the first two. Blocks with stride 1 use a plain 3x3 conv.

#include <memory>
#include <string>

#include "lip/layers.hpp"
#include "lip/logit_module.hpp"

namespace lip {

enum class Downsampling { strided_conv, avgpool_conv, lip_conv };

inline std::string to_string(Downsampling d) {
  switch (d) {
    case Downsampling::strided_conv: return "strided";
    case Downsampling::avgpool_conv: return "avgpool";
    case Downsampling::lip_conv: return "lip";
  }
  return "?";
}

inline Downsampling parse_downsampling(const std::string& s) {
  if (s == "strided" || s == "strided_conv") return Downsampling::strided_conv;
  if (s == "avgpool" || s == "avgpool_conv") return Downsampling::avgpool_conv;
  if (s == "lip" || s == "lip_conv") return Downsampling::lip_conv;
  throw BuildError("unknown downsampling variant '" + s + "' (expected strided, avgpool or lip)");
}

/// Layer after each convolution. `affine` stands in for batch norm in the
/// counted backbones; with `none` the convolutions carry biases.
enum class BlockNorm { none, affine, instance };

inline std::string to_string(BlockNorm n) {
  switch (n) {
    case BlockNorm::none: return "none";
    case BlockNorm::affine: return "affine";
    case BlockNorm::instance: return "instance";
  }
  return "?";
}

inline BlockNorm parse_block_norm(const std::string& s) {
  if (s == "none") return BlockNorm::none;
  if (s == "affine") return BlockNorm::affine;
  if (s == "instance") return BlockNorm::instance;
  throw BuildError("unknown block norm '" + s + "' (expected none, affine or instance)");
}

struct BlockSpec {
  Downsampling kind = Downsampling::strided_conv;
  std::size_t in_c = 0;
  std::size_t width = 0;
  std::size_t out_c = 0;
  std::size_t stride = 2;
  LogitSpec logit = LogitSpec::shared_bottleneck(128);
  BlockNorm norm = BlockNorm::affine;
  LipMode lip_mode = LipMode::stabilized;

  void validate() const {
    if (in_c == 0 || width == 0 || out_c == 0) throw BuildError("block channel counts must be >= 1");
    if (stride != 1 && stride != 2) throw BuildError("block stride must be 1 or 2");
    if (kind == Downsampling::lip_conv && stride == 2 && logit.kind == LogitKind::conv3x3)
      throw BuildError("conv3x3 logit modules are reserved for the stem slot");
  }
};

template <typename T>
class BottleneckBlock : public Layer<T> {
 public:
  explicit BottleneckBlock(const BlockSpec& spec) : spec_(spec) {
    spec_.validate();
    const bool bias = spec.norm == BlockNorm::none;
    auto add_norm = [&spec](Sequential<T>& seq, const char* name, std::size_t c) {
      if (spec.norm == BlockNorm::affine) seq.template emplace<ChannelAffine<T>>(name, c);
      if (spec.norm == BlockNorm::instance) seq.template emplace<InstanceNorm2d<T>>(name, c);
    };
    const bool down = spec.stride == 2;
    const PoolGeometry pool = PoolGeometry::square(3, 2, 1);

    if (down && spec.kind == Downsampling::lip_conv &&
        spec.logit.kind == LogitKind::shared_bottleneck)
      trunk_ = std::make_unique<SharedLogitTrunk<T>>(spec.in_c, spec.logit.width);

    pre_.template emplace<Conv2d<T>>("conv1", spec.in_c, spec.width, 1, 1, 0, bias);
    add_norm(pre_, "bn1", spec.width);
    pre_.template emplace<ReLU<T>>("relu1");

    if (!down) {
      post_.template emplace<Conv2d<T>>("conv2", spec.width, spec.width, 3, 1, 1, bias);
    } else if (spec.kind == Downsampling::strided_conv) {
      post_.template emplace<Conv2d<T>>("conv2", spec.width, spec.width, 3, 2, 1, bias);
    } else {
      if (spec.kind == Downsampling::avgpool_conv)
        post_.template emplace<AvgPool2d<T>>("pool", pool);
      else
        res_lip_ = std::make_unique<LipLayer<T>>(spec.logit, spec.width, LipGeometry(pool),
                                                 spec.lip_mode);
      post_.template emplace<Conv2d<T>>("conv2", spec.width, spec.width, 1, 1, 0, bias);
    }
    add_norm(post_, "bn2", spec.width);
    post_.template emplace<ReLU<T>>("relu2");
    post_.template emplace<Conv2d<T>>("conv3", spec.width, spec.out_c, 1, 1, 0, bias);
    add_norm(post_, "bn3", spec.out_c);

    identity_shortcut_ = !down && spec.in_c == spec.out_c;
    if (!identity_shortcut_) {
      if (!down || spec.kind == Downsampling::strided_conv) {
        shortcut_.template emplace<Conv2d<T>>("conv", spec.in_c, spec.out_c, 1, spec.stride, 0, bias);
      } else {
        if (spec.kind == Downsampling::avgpool_conv)
          shortcut_.template emplace<AvgPool2d<T>>("pool", pool);
        else
          sc_lip_ = std::make_unique<LipLayer<T>>(spec.logit, spec.in_c, LipGeometry(pool),
                                                  spec.lip_mode);
        shortcut_.template emplace<Conv2d<T>>("conv", spec.in_c, spec.out_c, 1, 1, 0, bias);
      }
      add_norm(shortcut_, "bn", spec.out_c);
    }
    if (res_lip_) init_as_average(res_lip_->logit_module());
    if (sc_lip_) init_as_average(sc_lip_->logit_module());
  }

  std::string kind() const override { return "bottleneck_block"; }

  Shape4 output_shape(const Shape4& in) const override {
    if (in.c != spec_.in_c)
      throw ShapeError("block expects " + std::to_string(spec_.in_c) + " input channels, got " +
                       std::to_string(in.c));
    Shape4 r = pre_.output_shape(in);
    if (res_lip_) r = res_lip_->output_shape(r);
    r = post_.output_shape(r);
    Shape4 s = in;
    if (sc_lip_) s = sc_lip_->output_shape(s);
    s = shortcut_.output_shape(s);
    if (r != s) throw ShapeError("residual and shortcut shapes differ: " + r.str() + " vs " + s.str());
    return r;
  }

  Tensor4<T> forward(const Tensor4<T>& x) override {
    Tensor4<T> features;
    if (trunk_) features = trunk_->forward(x);
    const Tensor4<T>* shared = trunk_ ? &features : nullptr;

    Tensor4<T> r = pre_.forward(x);
    if (res_lip_) r = res_lip_->forward(r, shared);
    r = post_.forward(r);

    Tensor4<T> s;
    if (identity_shortcut_) {
      s = x;
    } else {
      s = sc_lip_ ? shortcut_.forward(sc_lip_->forward(x, shared)) : shortcut_.forward(x);
    }
    require_same_shape(r, s, "residual add");
    sum_ = map_elementwise(r, s, [](T a, T b) { return a + b; });
    return relu_forward(sum_);
  }

  Tensor4<T> backward(const Tensor4<T>& grad_out) override {
    const Tensor4<T> g = relu_backward(grad_out, sum_);
    Tensor4<T> grad_features;
    auto add_into = [](Tensor4<T>& acc, const Tensor4<T>& v) {
      if (acc.empty())
        acc = v;
      else
        for (std::size_t i = 0; i < acc.numel(); ++i) acc.data()[i] += v.data()[i];
    };

    Tensor4<T> gr = post_.backward(g);
    if (res_lip_) {
      auto lg = res_lip_->backward(gr);
      gr = std::move(lg.grad_pooled);
      if (!lg.grad_features.empty()) add_into(grad_features, lg.grad_features);
    }
    Tensor4<T> gx = pre_.backward(gr);

    if (identity_shortcut_) {
      add_into(gx, g);
    } else {
      Tensor4<T> gs = shortcut_.backward(g);
      if (sc_lip_) {
        auto lg = sc_lip_->backward(gs);
        gs = std::move(lg.grad_pooled);
        if (!lg.grad_features.empty()) add_into(grad_features, lg.grad_features);
      }
      add_into(gx, gs);
    }
    if (trunk_) add_into(gx, trunk_->backward(grad_features));
    return gx;
  }

  std::uint64_t macs(const Shape4& in) const override {
    std::uint64_t total = 0;
    if (trunk_) total += trunk_->macs(in);
    Shape4 r = pre_.output_shape(in);
    total += pre_.macs(in);
    if (res_lip_) {
      total += res_lip_->macs(r, trunk_ ? trunk_->output_shape(in) : r);
      r = res_lip_->output_shape(r);
    }
    total += post_.macs(r);
    if (!identity_shortcut_) {
      Shape4 s = in;
      if (sc_lip_) {
        total += sc_lip_->macs(s, trunk_ ? trunk_->output_shape(in) : s);
        s = sc_lip_->output_shape(s);
      }
      total += shortcut_.macs(s);
    }
    // residual add and ReLU
    return total + 2 * elements(output_shape(in));
  }

  void collect_params(const std::string& prefix, std::vector<ParamRef<T>>& out) override {
    if (trunk_) trunk_->collect_params(join_path(prefix, "logit_trunk"), out);
    const std::string res = join_path(prefix, "residual");
    pre_.collect_params(res, out);
    if (res_lip_) res_lip_->logit_module().collect_params(join_path(res, "lip.logit"), out);
    post_.collect_params(res, out);
    const std::string sc = join_path(prefix, "shortcut");
    if (sc_lip_) sc_lip_->logit_module().collect_params(join_path(sc, "lip.logit"), out);
    shortcut_.collect_params(sc, out);
  }

  void init_params(const std::string& prefix, std::uint64_t seed) override {
    if (trunk_) trunk_->init_params(join_path(prefix, "logit_trunk"), seed);
    const std::string res = join_path(prefix, "residual");
    pre_.init_params(res, seed);
    if (res_lip_) res_lip_->logit_module().init_params(join_path(res, "lip.logit"), seed);
    post_.init_params(res, seed);
    const std::string sc = join_path(prefix, "shortcut");
    if (sc_lip_) sc_lip_->logit_module().init_params(join_path(sc, "lip.logit"), seed);
    shortcut_.init_params(sc, seed);
  }

  void relu_inputs(std::vector<const Tensor4<T>*>& out) const override {
    if (trunk_) trunk_->relu_inputs(out);
    pre_.relu_inputs(out);
    if (res_lip_) res_lip_->logit_module().relu_inputs(out);
    post_.relu_inputs(out);
    if (sc_lip_) sc_lip_->logit_module().relu_inputs(out);
    shortcut_.relu_inputs(out);
    out.push_back(&sum_);
  }

  void visit_lips(const std::string& prefix, const LipVisitor<T>& fn) override {
    if (res_lip_) fn(join_path(prefix, "residual.lip"), *res_lip_);
    if (sc_lip_) fn(join_path(prefix, "shortcut.lip"), *sc_lip_);
  }

  void describe(const std::string& prefix, const Shape4& in, nlohmann::json& out) const override {
    if (trunk_) trunk_->describe(join_path(prefix, "logit_trunk"), in, out);
    const std::string res = join_path(prefix, "residual");
    Shape4 r = pre_.output_shape(in);
    pre_.describe(res, in, out);
    if (res_lip_) describe_lip(*res_lip_, join_path(res, "lip"), r, trunk_ ? trunk_->output_shape(in) : r, out);
    if (res_lip_) r = res_lip_->output_shape(r);
    post_.describe(res, r, out);
    const std::string sc = join_path(prefix, "shortcut");
    if (!identity_shortcut_) {
      Shape4 s = in;
      if (sc_lip_) {
        describe_lip(*sc_lip_, join_path(sc, "lip"), s, trunk_ ? trunk_->output_shape(in) : s, out);
        s = sc_lip_->output_shape(s);
      }
      shortcut_.describe(sc, s, out);
    }
  }

  const BlockSpec& spec() const { return spec_; }
  SharedLogitTrunk<T>* trunk() { return trunk_.get(); }
  LipLayer<T>* residual_lip() { return res_lip_.get(); }
  LipLayer<T>* shortcut_lip() { return sc_lip_.get(); }

 private:
  static void describe_lip(const LipLayer<T>& lip, const std::string& path, const Shape4& pooled,
                           const Shape4& module_in, nlohmann::json& out) {
    const PoolGeometry& g = lip.geometry().geom;
    out.push_back({{"path", path},
                   {"kind", "lip"},
                   {"input", shape_json(pooled)},
                   {"output", shape_json(lip.output_shape(pooled))},
                   {"kernel", {g.kh, g.kw}},
                   {"stride", {g.sh, g.sw}},
                   {"padding", {g.ph, g.pw}},
                   {"logit", lip.logit_module().spec().str()}});
    lip.logit_module().describe(join_path(path, "logit"), module_in, out);
  }

  BlockSpec spec_;
  std::unique_ptr<SharedLogitTrunk<T>> trunk_;
  Sequential<T> pre_;
  std::unique_ptr<LipLayer<T>> res_lip_;
  Sequential<T> post_;
  bool identity_shortcut_ = false;
  std::unique_ptr<LipLayer<T>> sc_lip_;
  Sequential<T> shortcut_;
  Tensor4<T> sum_;
};

}  // namespace lip
