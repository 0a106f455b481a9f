#include <cmath>

#include <gtest/gtest.h>

#include "lip/lip2d.hpp"
#include "lip/logit_module.hpp"
#include "lip/nn/pooling.hpp"
#include "oracle.hpp"

using namespace lip;

namespace {

const LipGeometry kNet;  // 3x3 / 2 / 1

Tensor4<double> row(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor4<double>({1, 1, 1, n}, std::move(v));
}

}  // namespace

TEST(Lip2d, HandEvaluatedWindows) {
  const LipGeometry four(PoolGeometry{1, 4, 1, 4, 0, 0});
  const double e12 = std::exp(12.0);
  const auto y = lip2d_forward(row({1, 3, 5, 7}), row({0, 0, 0, 12}), four);
  EXPECT_NEAR(y.data()[0], (9 + 7 * e12) / (3 + e12), 1e-13);
  EXPECT_NEAR(y.data()[0], 6.999926, 1e-6);

  const LipGeometry two(PoolGeometry{1, 2, 1, 2, 0, 0});
  EXPECT_NEAR(lip2d_forward(row({2, 4}), row({0, std::log(3.0)}), two).data()[0], 3.5, 1e-15);
}

TEST(Lip2d, RejectsWindowSmallerThanStride) {
  EXPECT_THROW(LipGeometry(2, 3, 0), GeometryError);
  EXPECT_NO_THROW(LipGeometry(3, 3, 0));
}

TEST(Lip2d, NonFiniteLogitThrows) {
  auto l = Tensor4<double>({1, 1, 4, 4}, 1.0);
  l(0, 0, 2, 2) = NAN;
  EXPECT_THROW(lip2d_forward(Tensor4<double>({1, 1, 4, 4}), l, kNet), NumericError);
  EXPECT_THROW(lip2d_forward(Tensor4<double>({1, 1, 4, 4}), l, kNet, LipMode::naive), NumericError);
}

TEST(Lip2d, NaiveOverflowIsReported) {
  const auto x = random_uniform<double>({1, 1, 4, 4}, 1);
  const auto l = Tensor4<double>({1, 1, 4, 4}, 800.0);
  EXPECT_THROW(lip2d_forward(x, l, kNet, LipMode::naive), NumericError);
  EXPECT_EQ(lip2d_forward(x, l, kNet), avg_pool2d_forward(x, kNet.geom));
}

TEST(Lip2d, ConstantLogitIsAveragePooling) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto x = random_normal<double>({2, 3, 7, 8}, seed);
    const double v = Rng(seed).uniform(0.0, 12.0);
    const auto l = Tensor4<double>(x.shape(), v);
    const auto avg = avg_pool2d_forward(x, kNet.geom);
    EXPECT_LE(oracle::max_abs_diff(lip2d_forward(x, l, kNet), avg), 1e-12);
    EXPECT_LE(oracle::max_abs_diff(lip2d_forward(x, l, kNet, LipMode::naive), avg), 1e-12);
    const auto xf = x.cast<float>();
    // signed inputs cancel inside windows, so compare on the input scale
    EXPECT_LE(oracle::max_abs_diff(lip2d_forward(xf, l.cast<float>(), kNet), avg.cast<float>()), 1e-6);
  }
}

TEST(Lip2d, MatchesLongDoubleOracle) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto x = random_normal<double>({1, 2, 9, 6}, seed);
    const auto l = random_uniform<double>(x.shape(), seed + 50, 0.0, 12.0);
    EXPECT_LE(oracle::max_rel_diff(lip2d_forward(x, l, kNet), oracle::lip_pool(x, l, 3, 2, 1)), 1e-12);
  }
}

TEST(Lip2d, NaiveMatchesStabilized) {
  for (std::uint64_t seed = 0; seed < 500; ++seed) {
    const auto x = random_uniform<double>({1, 2, 6, 6}, 2 * seed);
    const auto l = random_uniform<double>(x.shape(), 2 * seed + 1, 0.0, 12.0);
    ASSERT_LE(oracle::max_rel_diff(lip2d_forward(x, l, kNet, LipMode::naive), lip2d_forward(x, l, kNet)), 1e-10);
    const auto xf = x.cast<float>(), lf = l.cast<float>();
    ASSERT_LE(oracle::max_rel_diff(lip2d_forward(xf, lf, kNet, LipMode::naive), lip2d_forward(xf, lf, kNet)), 1e-5);
  }
}

TEST(Lip2d, LogitShiftInvariance) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto x = random_normal<double>({1, 2, 7, 7}, seed);
    const auto l = random_uniform<double>(x.shape(), seed + 9, 0.0, 12.0);
    const double k = Rng(seed).uniform(-20.0, 20.0);
    EXPECT_LE(oracle::max_abs_diff(lip2d_forward(x, map_elementwise(l, k, std::plus<>{}), kNet), lip2d_forward(x, l, kNet)),
              1e-12);
  }
}

TEST(Lip2d, WeightsSumToOne) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto l = random_uniform<double>({1, 1, 6, 7}, seed, 0.0, 12.0);
    const ImportanceMap<double> f(map_elementwise(l, 0.0, [](double v, double) { return std::exp(v); }));
    for (std::size_t oy = 0; oy < 3; ++oy)
      for (std::size_t ox = 0; ox < 4; ++ox) {
        double s = 0;
        for (double w : local_weights(f, kNet.geom, 0, 0, ox, oy).weights) s += w;
        EXPECT_NEAR(s, 1.0, 1e-12);
      }
  }
}

TEST(Lip2d, ConvexHull) {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto x = random_normal<double>({1, 1, 6, 5}, seed);
    const auto l = random_uniform<double>(x.shape(), seed + 1000, 0.0, 12.0);
    const auto y = lip2d_forward(x, l, kNet);
    for (std::size_t oy = 0; oy < y.shape().h; ++oy)
      for (std::size_t ox = 0; ox < y.shape().w; ++ox) {
        const auto v = window_extract(x, 0, 0, kNet.geom, ox, oy).values;
        ASSERT_GE(y(0, 0, oy, ox), *std::min_element(v.begin(), v.end()) - 1e-12);
        ASSERT_LE(y(0, 0, oy, ox), *std::max_element(v.begin(), v.end()) + 1e-12);
      }
  }
}

TEST(Lip2d, TranslationCovariance) {
  // Stride 2, pad 0: moving the input by 2 pixels moves the output by 1.
  // The plane-max shift differs after cropping, so only rounding may differ.
  const LipGeometry g(3, 2, 0);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto x = random_normal<double>({1, 2, 11, 11}, seed);
    const auto l = random_uniform<double>(x.shape(), seed + 7, 0.0, 12.0);
    Tensor4<double> xs({1, 2, 9, 9}), ls({1, 2, 9, 9});
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t y = 0; y < 9; ++y)
        for (std::size_t xx = 0; xx < 9; ++xx) {
          xs(0, c, y, xx) = x(0, c, y + 2, xx + 2);
          ls(0, c, y, xx) = l(0, c, y + 2, xx + 2);
        }
    const auto a = lip2d_forward(x, l, g), b = lip2d_forward(xs, ls, g);
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t oy = 0; oy < b.shape().h; ++oy)
        for (std::size_t ox = 0; ox < b.shape().w; ++ox) ASSERT_NEAR(b(0, c, oy, ox), a(0, c, oy + 1, ox + 1), 1e-12);
  }
}

TEST(Lip2d, MonotoneEmphasis) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    const auto x = random_normal<double>({1, 1, 6, 6}, seed);
    auto l = random_uniform<double>(x.shape(), seed + 3, 0.0, 11.0);
    const std::size_t py = rng.uniform_index(6), px = rng.uniform_index(6);
    const auto before = lip2d_forward(x, l, kNet);
    l(0, 0, py, px) += 0.5;
    const auto after = lip2d_forward(x, l, kNet);
    const double target = x(0, 0, py, px);
    for (std::size_t oy = 0; oy < before.shape().h; ++oy)
      for (std::size_t ox = 0; ox < before.shape().w; ++ox) {
        const WindowBounds b = window_bounds(kNet.geom, 6, 6, oy, ox);
        const bool contains = py >= b.ys && py < b.ye && px >= b.xs && px < b.xe;
        if (!contains) {
          EXPECT_NEAR(after(0, 0, oy, ox), before(0, 0, oy, ox), 1e-12);
          continue;
        }
        EXPECT_LT(std::abs(after(0, 0, oy, ox) - target), std::abs(before(0, 0, oy, ox) - target));
      }
  }
}

TEST(Lip2d, BackwardSimpleCases) {
  const LipGeometry g(2, 2, 0);
  const auto x = random_normal<double>({1, 1, 4, 4}, 1);
  const auto l = Tensor4<double>(x.shape(), 3.0);
  const auto go = random_normal<double>({1, 1, 2, 2}, 2);
  const auto gr = lip2d_backward(go, x, l, g);
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t xx = 0; xx < 4; ++xx) EXPECT_NEAR(gr.grad_x(0, 0, y, xx), go(0, 0, y / 2, xx / 2) / 4, 1e-15);
  for (std::size_t oy = 0; oy < 2; ++oy)
    for (std::size_t ox = 0; ox < 2; ++ox) {
      double s = 0;
      for (std::size_t k = 0; k < 4; ++k) s += gr.grad_logit(0, 0, 2 * oy + k / 2, 2 * ox + k % 2);
      EXPECT_NEAR(s, 0.0, 1e-14);
    }
  const auto z = lip2d_backward(Tensor4<double>({1, 1, 2, 2}), x, random_uniform<double>(x.shape(), 3, 0.0, 12.0), g);
  for (double v : z.grad_x.values()) EXPECT_EQ(v, 0.0);
  for (double v : z.grad_logit.values()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(lip2d_backward(Tensor4<double>({1, 1, 3, 3}), x, l, g), ShapeError);
}

TEST(Lip2d, BackwardMatchesFiniteDifferences) {
  // Forward in long double so difference noise stays far below the bound.
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const Shape4 s{2, 2, 5 + rng.uniform_index(5), 5 + rng.uniform_index(5)};
    const auto x = random_normal<double>(s, seed + 1);
    const auto l = random_uniform<double>(s, seed + 2, 0.0, 12.0);
    const auto r = random_normal<double>(kNet.geom.output_shape(s), seed + 3);
    const auto g = lip2d_backward(r, x, l, kNet);
    auto xw = x.cast<long double>(), lw = l.cast<long double>();
    auto loss = [&] {
      const auto y = oracle::lip_pool(xw, lw, 3, 2, 1);
      long double acc = 0;
      for (std::size_t i = 0; i < y.numel(); ++i) acc += r.data()[i] * y.data()[i];
      return acc;
    };
    auto check = [&](Tensor4<long double>& t, const Tensor4<double>& analytic) {
      double worst = 0;
      for (std::size_t i = 0; i < t.numel(); ++i) {
        const long double keep = t.data()[i];
        t.data()[i] = keep + 1e-5L;
        const long double lp = loss();
        t.data()[i] = keep - 1e-5L;
        const long double lm = loss();
        t.data()[i] = keep;
        const double fd = static_cast<double>((lp - lm) / 2e-5L), a = analytic.data()[i];
        worst = std::max(worst, std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-8}));
      }
      return worst;
    };
    EXPECT_LT(check(xw, g.grad_x), 1e-6);
    EXPECT_LT(check(lw, g.grad_logit), 1e-6);
  }
}

TEST(LogitModule, ZeroInitGivesConstantSix) {
  for (const auto& spec : {LogitSpec::projection(), LogitSpec::bottleneck(4), LogitSpec::conv3x3()}) {
    LogitModule<double> m(spec, 3);
    m.init_params("", 5);
    init_as_average(m);
    m.init_params("", 6);  // later re-inits keep the zero conv
    const auto out = logit_forward(m, random_normal<double>({2, 3, 6, 6}, 1));
    for (double v : out.values()) ASSERT_EQ(v, 6.0) << spec.str();
    for (const auto& p : m.parameters())
      if (p.path.find("norm.gamma") != std::string::npos) EXPECT_EQ(p.value[0], 1.0);
  }
}

TEST(LogitModule, OutputRangeAndShape) {
  LogitModule<double> m(LogitSpec::bottleneck(4), 3);
  m.init_params("", 2);
  const auto out = logit_forward(m, random_normal<double>({1, 3, 7, 5}, 3, 0.0, 10.0));
  EXPECT_EQ(out.shape(), (Shape4{1, 3, 7, 5}));
  for (double v : out.values()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 12.0);
  }
  EXPECT_THROW(logit_forward(m, Tensor4<double>({1, 2, 4, 4})), ShapeError);
}

TEST(LogitModule, IdentityProjectionClosedForm) {
  LogitModule<double> m(LogitSpec::projection(), 1);
  m.last_conv().params().weights.fill(1.0);
  const auto out = logit_forward(m, row({0.0, 2.0}));
  const double z = 1.0 / std::sqrt(1.0 + 1e-5);
  EXPECT_NEAR(out.data()[0], 12.0 / (1.0 + std::exp(z)), 1e-14);
  EXPECT_NEAR(out.data()[1], 12.0 / (1.0 + std::exp(-z)), 1e-14);
}

TEST(LogitModule, ParseAndPrint) {
  EXPECT_EQ(LogitSpec::parse("projection"), LogitSpec::projection());
  EXPECT_EQ(LogitSpec::parse("bottleneck:64"), LogitSpec::bottleneck(64));
  EXPECT_EQ(LogitSpec::parse("shared:8").str(), "shared:8");
  for (const char* bad : {"bottleneck", "bottleneck:0", "bottleneck:x", "proj", ""})
    EXPECT_THROW(LogitSpec::parse(bad), BuildError) << bad;
}

TEST(LipLayer, ZeroInitEqualsAveragePooling) {
  for (const auto& spec : {LogitSpec::projection(), LogitSpec::bottleneck(4)}) {
    LipLayer<double> lip(spec, 3);
    lip.logit_module().init_params("", 1);
    init_as_average(lip.logit_module());
    const auto x = random_normal<double>({2, 3, 8, 7}, 2);
    EXPECT_EQ(lip.forward(x), avg_pool2d_forward(x, kNet.geom)) << spec.str();
  }
}

TEST(LipLayer, ZeroConvStillReceivesGradient) {
  LipLayer<double> lip(LogitSpec::projection(), 3);
  lip.logit_module().init_params("", 1);
  init_as_average(lip.logit_module());
  const auto x = random_normal<double>({4, 3, 8, 8}, 2);
  const auto y = lip.forward(x);
  lip.logit_module().zero_grad();
  lip.backward(random_normal<double>(y.shape(), 3));
  double norm = 0;
  for (const auto& p : lip.logit_module().parameters())
    if (p.path == "conv.weight")
      for (double g : p.grad) norm += g * g;
  EXPECT_GT(norm, 0.0);
}

TEST(LipLayer, SharedTrunkRunsOncePerBlock) {
  SharedLogitTrunk<double> trunk(4, 3);
  trunk.init_params("", 1);
  LipLayer<double> res(LogitSpec::shared_bottleneck(3), 2), sc(LogitSpec::shared_bottleneck(3), 4);
  const auto x = random_normal<double>({1, 4, 6, 6}, 1);
  const auto features = trunk.forward(x);
  res.forward(random_normal<double>({1, 2, 6, 6}, 2), &features);
  sc.forward(x, &features);
  EXPECT_EQ(trunk.calls(), 1u);
  EXPECT_THROW(res.forward(x), ShapeError);
  EXPECT_THROW(lip_layer_forward(res, x, x), ShapeError);
  EXPECT_THROW(Lip2d<double>(LogitSpec::shared_bottleneck(3), 2), BuildError);
}

TEST(LipLayer, OutputInsideWindowRange) {
  LipLayer<double> lip(LogitSpec::bottleneck(4), 2);
  lip.logit_module().init_params("", 9);
  for (auto& p : lip.logit_module().parameters()) {
    Rng rng(derive_seed(9, p.value.size()));
    for (double& v : p.value) v += rng.uniform(-0.5, 0.5);
  }
  const auto x = random_normal<double>({1, 2, 7, 7}, 4);
  const auto y = lip.forward(x);
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t oy = 0; oy < 4; ++oy)
      for (std::size_t ox = 0; ox < 4; ++ox) {
        const auto v = window_extract(x, 0, c, kNet.geom, ox, oy).values;
        EXPECT_GE(y(0, c, oy, ox), *std::min_element(v.begin(), v.end()) - 1e-12);
        EXPECT_LE(y(0, c, oy, ox), *std::max_element(v.begin(), v.end()) + 1e-12);
      }
}
