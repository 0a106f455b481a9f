#pragma once

// Small trainable CNN for the synthetic task:
//   stem conv3x3 + ReLU -> 3 downsampling blocks -> global avg pool -> linear
// Variants differ only in the blocks' downsampling operator. Block convs
// are followed by instance norm by default; the stem conv has a bias.

#include <array>
#include <cmath>
#include <memory>

#include "lip/harness/task.hpp"
#include "lip/model/block.hpp"
#include "lip/model/graph.hpp"
#include "lip/model/resnet.hpp"

namespace lip {

struct TinyCnnConfig {
  std::size_t stem = 16;
  std::array<std::size_t, 3> stages{16, 32, 64};
  std::array<std::size_t, 3> widths{8, 16, 32};  // bottleneck width per block
  BlockNorm norm = BlockNorm::instance;
};

template <typename T>
ModelGraph<T> build_tiny_cnn(const SyntheticTaskConfig& task, Downsampling kind,
                             const LogitSpec& logit = LogitSpec::projection(),
                             const TinyCnnConfig& cfg = {}) {
  task.validate();
  auto root = std::make_unique<Sequential<T>>();
  root->template emplace<Conv2d<T>>("stem.conv", task.channels, cfg.stem, 3, 1, 1, true);
  root->template emplace<ReLU<T>>("stem.relu");
  std::size_t in_c = cfg.stem;
  for (std::size_t i = 0; i < 3; ++i) {
    BlockSpec spec;
    spec.kind = kind;
    spec.in_c = in_c;
    spec.width = cfg.widths[i];
    spec.out_c = cfg.stages[i];
    spec.stride = 2;
    spec.norm = cfg.norm;
    spec.logit = block_logit(logit);
    root->template emplace<BottleneckBlock<T>>("block" + std::to_string(i + 1), spec);
    in_c = spec.out_c;
  }
  root->template emplace<GlobalAvgPool<T>>("gap");
  // variance of uniform(+-1/sqrt(in)); keeps the initial loss near ln(classes)
  root->template emplace<Linear<T>>("fc", in_c, task.classes, 1.0 / std::sqrt(3.0 * static_cast<double>(in_c)));

  nlohmann::json meta = {{"variant", to_string(kind)},
                         {"logit", logit.str()},
                         {"stem", cfg.stem},
                         {"stages", cfg.stages},
                         {"widths", cfg.widths},
                         {"norm", to_string(cfg.norm)}};
  return ModelGraph<T>("tiny-cnn-" + to_string(kind), Shape4{1, task.channels, task.image_size, task.image_size},
                       std::move(root), meta);
}

}  // namespace lip
