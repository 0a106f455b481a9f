#pragma once

// Full-size (LIP-)ResNet graphs for parameter and MAC accounting. Batch
// norms are per-channel affine layers; weights are allocated but left at
// their construction values unless the caller initializes them.
//
// Seven sites can host LIP: the stem max pool and, for Res3..Res5, the
// residual and shortcut branches of each stage's first block.

#include <array>
#include <memory>
#include <string>

#include "lip/model/block.hpp"
#include "lip/model/graph.hpp"

namespace lip {

enum class Site { baseline, avgpool, lip };

struct SubstitutionPlan {
  std::string name = "E";
  Site stem = Site::baseline;               // max-pool slot
  std::array<Site, 3> stages{};             // Res3, Res4, Res5

  /// LIP layers used by the plan, at most 1 + 3 * 2.
  std::size_t lip_layers() const {
    std::size_t n = stem == Site::lip ? 1 : 0;
    for (Site s : stages) n += s == Site::lip ? 2 : 0;
    return n;
  }

  /// Table-style combinations: A all seven sites, B Res3..Res5, C Res4 and
  /// Res5, D Res5 only, E none.
  static SubstitutionPlan named(char id) {
    const Site L = Site::lip, N = Site::baseline;
    switch (id) {
      case 'A': return {"A", L, {L, L, L}};
      case 'B': return {"B", N, {L, L, L}};
      case 'C': return {"C", N, {N, L, L}};
      case 'D': return {"D", N, {N, N, L}};
      case 'E': return {"E", N, {N, N, N}};
    }
    throw BuildError(std::string("unknown substitution plan '") + id + "' (expected A-E)");
  }

  /// Every LIP site of plan A replaced by 3x3/s2 average pooling.
  static SubstitutionPlan average() {
    const Site V = Site::avgpool;
    return {"avgpool", V, {V, V, V}};
  }
};

/// Logit module used inside downsampling blocks: bottleneck forms share
/// their first two stages between the residual and shortcut branch.
inline LogitSpec block_logit(const LogitSpec& s) {
  if (s.kind == LogitKind::bottleneck) return LogitSpec::shared_bottleneck(s.width);
  if (s.kind == LogitKind::conv3x3) throw BuildError("conv3x3 logits only fit the stem slot");
  return s;
}

/// Logit module in the stem slot: a single 3x3 conv for the bottleneck
/// forms, a 1x1 projection otherwise.
inline LogitSpec stem_logit(const LogitSpec& s) {
  return s.kind == LogitKind::projection ? LogitSpec::projection() : LogitSpec::conv3x3();
}

inline Downsampling site_downsampling(Site s) {
  switch (s) {
    case Site::baseline: return Downsampling::strided_conv;
    case Site::avgpool: return Downsampling::avgpool_conv;
    case Site::lip: return Downsampling::lip_conv;
  }
  return Downsampling::strided_conv;
}

template <typename T>
ModelGraph<T> build_lip_resnet(int depth, const SubstitutionPlan& plan,
                               const LogitSpec& logit = LogitSpec::bottleneck(128),
                               std::size_t classes = 1000) {
  std::array<std::size_t, 4> counts{};
  if (depth == 50)
    counts = {3, 4, 6, 3};
  else if (depth == 101)
    counts = {3, 4, 23, 3};
  else
    throw BuildError("unsupported ResNet depth " + std::to_string(depth) + " (expected 50 or 101)");

  const PoolGeometry pool = PoolGeometry::square(3, 2, 1);
  auto root = std::make_unique<Sequential<T>>();
  root->template emplace<Conv2d<T>>("stem.conv", 3, 64, 7, 2, 3, false);
  root->template emplace<ChannelAffine<T>>("stem.bn", 64);
  root->template emplace<ReLU<T>>("stem.relu");
  switch (plan.stem) {
    case Site::baseline: root->template emplace<MaxPool2d<T>>("stem.pool", pool); break;
    case Site::avgpool: root->template emplace<AvgPool2d<T>>("stem.pool", pool); break;
    case Site::lip:
      root->template emplace<Lip2d<T>>("stem.lip", stem_logit(logit), 64, LipGeometry(pool));
      break;
  }

  std::size_t in_c = 64;
  for (std::size_t stage = 0; stage < 4; ++stage) {
    const std::size_t width = std::size_t{64} << stage;
    for (std::size_t b = 0; b < counts[stage]; ++b) {
      BlockSpec spec;
      spec.in_c = in_c;
      spec.width = width;
      spec.out_c = 4 * width;
      spec.stride = (stage > 0 && b == 0) ? 2 : 1;
      spec.kind = stage > 0 ? site_downsampling(plan.stages[stage - 1]) : Downsampling::strided_conv;
      if (spec.kind == Downsampling::lip_conv) spec.logit = block_logit(logit);
      root->template emplace<BottleneckBlock<T>>(
          "res" + std::to_string(stage + 2) + ".block" + std::to_string(b + 1), spec);
      in_c = spec.out_c;
    }
  }
  root->template emplace<GlobalAvgPool<T>>("gap");
  root->template emplace<Linear<T>>("fc", in_c, classes);

  const std::string name = (plan.lip_layers() > 0 ? "lip-resnet-" : "resnet-") +
                           std::to_string(depth) + "-" + plan.name +
                           (plan.lip_layers() > 0 ? "-" + logit.str() : "");
  nlohmann::json meta = {{"depth", depth}, {"plan", plan.name}, {"logit", logit.str()}};
  return ModelGraph<T>(name, Shape4{1, 3, 224, 224}, std::move(root), meta);
}

}  // namespace lip
