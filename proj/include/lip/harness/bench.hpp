#pragma once

// Throughput of the pooling kernels. One untimed warm-up call per (op,
// shape), then `repeats` timed calls; the median is reported. Before any
// lip2d timing the naive and stabilized forwards are cross-checked on the
// same inputs.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include "lip/lip2d.hpp"
#include "lip/nn/pooling.hpp"

namespace lip {

inline const std::vector<std::string>& bench_ops() {
  static const std::vector<std::string> ops = {"avg_pool", "max_pool", "lip2d_naive", "lip2d_stabilized"};
  return ops;
}

/// "n,c,h,w" or "nxcxhxw".
inline Shape4 parse_shape(const std::string& text) {
  std::string t = text;
  std::replace(t.begin(), t.end(), 'x', ',');
  std::istringstream in(t);
  std::size_t d[4];
  char sep = 0;
  if (!(in >> d[0] >> sep >> d[1] >> sep >> d[2] >> sep >> d[3]) || !in.eof())
    throw UsageError("bad shape '" + text + "' (expected n,c,h,w)");
  const Shape4 s{d[0], d[1], d[2], d[3]};
  validate_shape(s);
  return s;
}

struct BenchRow {
  std::string op;
  Shape4 shape;
  std::size_t repeats = 0;
  double median_seconds = 0.0;
  double elements_per_second = 0.0;  // input elements
};

struct BenchConfig {
  std::vector<std::string> ops = bench_ops();
  std::vector<Shape4> shapes = {{8, 16, 32, 32}, {8, 64, 16, 16}};
  std::size_t repeats = 5;
  std::uint64_t seed = 0;
  double equivalence_tolerance = 1e-5;
};

/// Largest |a - b| / max(|a|, |b|) over all elements; 0 where both are 0.
inline double max_relative_difference(const Tensor4<float>& a, const Tensor4<float>& b) {
  require_same_shape(a, b, "max_relative_difference");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double x = a.data()[i], y = b.data()[i];
    const double den = std::max(std::abs(x), std::abs(y));
    if (den > 0.0) worst = std::max(worst, std::abs(x - y) / den);
  }
  return worst;
}

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Rows in op order within each shape. Throws NumericError when the lip2d
/// equivalence gate fails.
inline std::vector<BenchRow> run_bench(const BenchConfig& cfg) {
  if (cfg.repeats == 0) throw UsageError("bench needs at least one repeat");
  for (const auto& op : cfg.ops)
    if (std::find(bench_ops().begin(), bench_ops().end(), op) == bench_ops().end())
      throw UsageError("unknown bench op '" + op + "'");
  const LipGeometry geom;
  std::vector<BenchRow> rows;
  for (std::size_t si = 0; si < cfg.shapes.size(); ++si) {
    const Shape4& s = cfg.shapes[si];
    // Non-negative features, as pooled maps follow a ReLU inside blocks.
    const auto x = random_uniform<float>(s, derive_seed(cfg.seed, 2 * si), 0.0, 1.0);
    const auto logit = random_uniform<float>(s, derive_seed(cfg.seed, 2 * si + 1), 0.0, 12.0);
    const bool has_lip = std::any_of(cfg.ops.begin(), cfg.ops.end(),
                                     [](const std::string& op) { return op.rfind("lip2d", 0) == 0; });
    if (has_lip) {
      const double d = max_relative_difference(lip2d_forward(x, logit, geom, LipMode::naive),
                                               lip2d_forward(x, logit, geom, LipMode::stabilized));
      if (!(d <= cfg.equivalence_tolerance))
        throw NumericError("lip2d naive and stabilized disagree by " + std::to_string(d) + " on " + s.str());
    }
    for (const auto& op : cfg.ops) {
      auto run = [&]() -> Tensor4<float> {
        if (op == "avg_pool") return avg_pool2d_forward(x, geom.geom);
        if (op == "max_pool") return max_pool2d_forward(x, geom.geom);
        return lip2d_forward(x, logit, geom, op == "lip2d_naive" ? LipMode::naive : LipMode::stabilized);
      };
      run();  // warm-up, not timed
      std::vector<double> samples;
      for (std::size_t r = 0; r < cfg.repeats; ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        const Tensor4<float> y = run();
        samples.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
        if (y.numel() == 0) throw NumericError("empty bench output");
      }
      const double med = median(samples);
      rows.push_back({op, s, cfg.repeats, med, med > 0.0 ? static_cast<double>(s.numel()) / med : 0.0});
    }
  }
  return rows;
}

inline std::string format_bench_csv(const std::vector<BenchRow>& rows) {
  std::string out = "op,shape,repeats,median_seconds,elements_per_second\n";
  char line[256];
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%s,%zux%zux%zux%zu,%zu,%.9f,%.1f\n", r.op.c_str(), r.shape.n,
                  r.shape.c, r.shape.h, r.shape.w, r.repeats, r.median_seconds, r.elements_per_second);
    out += line;
  }
  return out;
}

}  // namespace lip
