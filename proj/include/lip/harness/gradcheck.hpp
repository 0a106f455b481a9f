#pragma once

// Central finite-difference checks of every analytic backward, in double
// precision. Each trial draws fresh inputs and a random upstream gradient r;
// the checked scalar is L = sum(r * y), differenced as sum(r * (y+ - y-))
// so the subtraction happens per element before the reduction.
//
// Stateless kernels are re-evaluated for the difference quotient through
// the same generic source instantiated at long double. Perturbed inputs and
// the step stay double. In plain double the rounding of y+ - y- alone is
// about 3e-11, which swamps lip2d logit gradients of order 1e-8 (weights
// near exp(-12)) under the 1e-8 relative-error floor.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "lip/harness/task.hpp"
#include "lip/lip2d.hpp"
#include "lip/logit_module.hpp"
#include "lip/model/tiny_cnn.hpp"
#include "lip/rng.hpp"

namespace lip {

enum class GradSelector {
  conv2d,
  instance_norm,
  activations,
  avg_pool,
  max_pool,
  lip2d,
  logit_module,
  tiny_model,
};

inline const std::vector<std::pair<std::string, GradSelector>>& grad_selectors() {
  static const std::vector<std::pair<std::string, GradSelector>> table = {
      {"conv2d", GradSelector::conv2d},       {"instance_norm", GradSelector::instance_norm},
      {"activations", GradSelector::activations}, {"avg_pool", GradSelector::avg_pool},
      {"max_pool", GradSelector::max_pool},   {"lip2d", GradSelector::lip2d},
      {"logit_module", GradSelector::logit_module}, {"tiny_model", GradSelector::tiny_model},
  };
  return table;
}

inline GradSelector parse_grad_selector(const std::string& name) {
  for (const auto& [n, s] : grad_selectors())
    if (n == name) return s;
  std::string known;
  for (const auto& [n, s] : grad_selectors()) known += (known.empty() ? "" : ", ") + n;
  throw UsageError("unknown gradcheck selector '" + name + "' (expected one of: " + known + ")");
}

inline std::string to_string(GradSelector s) {
  for (const auto& [n, v] : grad_selectors())
    if (v == s) return n;
  return "?";
}

struct GradcheckConfig {
  double step = 1e-5;
  double tolerance = 1e-4;
  double floor = 1e-8;  // denominator floor of the relative error
  // tiny_model only: coordinates sampled per trial
  std::size_t model_param_coords = 160;
  std::size_t model_input_coords = 40;
};

struct ArgumentStat {
  std::string name;
  std::size_t checked = 0;
  std::size_t skipped = 0;    // ReLU kink crossed, or not smooth at the step scale
  std::size_t nonsmooth = 0;  // skipped because step and half step disagree
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
};

struct GradcheckReport {
  GradSelector selector{};
  std::size_t trials = 0;
  std::uint64_t seed = 0;
  double tolerance = 1e-4;
  std::vector<ArgumentStat> args;

  double max_rel_err() const {
    double m = 0.0;
    for (const auto& a : args) m = std::max(m, a.max_rel_err);
    return m;
  }
  /// Every argument within tolerance, something checked, and at most 1 in
  /// 10 coordinates skipped over the whole report. A sparsely sampled
  /// argument may end up with all of its few coordinates skipped.
  bool passed() const {
    std::size_t checked = 0, skipped = 0;
    for (const auto& a : args) {
      if (!(a.max_rel_err < tolerance)) return false;
      checked += a.checked;
      skipped += a.skipped;
    }
    return checked > 0 && 10 * skipped <= checked + skipped;
  }
  ArgumentStat& arg(const std::string& name) {
    for (auto& a : args)
      if (a.name == name) return a;
    args.push_back({name});
    return args.back();
  }
};

inline double relative_error(double analytic, double numeric, double floor = 1e-8) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// "selector,argument,checked,skipped,nonsmooth,max_rel_err,max_abs_err" rows.
inline std::string format_gradcheck_csv(const std::vector<GradcheckReport>& reports) {
  std::string out = "selector,argument,checked,skipped,nonsmooth,max_rel_err,max_abs_err\n";
  char line[256];
  for (const auto& r : reports)
    for (const auto& a : r.args) {
      std::snprintf(line, sizeof line, "%s,%s,%zu,%zu,%zu,%.3e,%.3e\n", to_string(r.selector).c_str(),
                    a.name.c_str(), a.checked, a.skipped, a.nonsmooth, a.max_rel_err, a.max_abs_err);
      out += line;
    }
  return out;
}

namespace detail {

using Tensor = Tensor4<double>;
using Wide = Tensor4<long double>;
using Eval = std::function<Wide()>;
using Signature = std::function<std::vector<signed char>()>;

inline Tensor random_tensor(const Shape4& s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(s);
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

inline Wide widen(const Tensor& t) {
  auto w = Wide::uninitialized(t.shape());
  std::copy(t.data(), t.data() + t.numel(), w.data());
  return w;
}

inline std::vector<long double> widen(const std::vector<double>& v) { return {v.begin(), v.end()}; }

inline double dot(const Tensor& r, const Wide& a, const Wide& b) {
  long double acc = 0.0L;
  for (std::size_t i = 0; i < r.numel(); ++i) acc += r.data()[i] * (a.data()[i] - b.data()[i]);
  return static_cast<double>(acc);
}

/// Compares analytic[i] with the central difference of `value[i]` for the
/// listed coordinates (all when `coords` is empty).
inline void check_argument(ArgumentStat& stat, std::span<double> value,
                           std::span<const double> analytic, const Tensor& r, const Eval& eval,
                           const GradcheckConfig& cfg, std::vector<std::size_t> coords = {},
                           const Signature& signature = {}) {
  if (coords.empty()) {
    coords.resize(value.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
  }
  std::vector<signed char> base;
  if (signature) {
    eval();
    base = signature();
  }
  for (std::size_t i : coords) {
    const double v = value[i];
    value[i] = v + cfg.step;
    const Wide plus = eval();
    const bool kink_plus = signature && signature() != base;
    value[i] = v - cfg.step;
    const Wide minus = eval();
    const bool kink_minus = signature && signature() != base;
    value[i] = v;
    if (kink_plus || kink_minus) {
      ++stat.skipped;
      continue;
    }
    const double numeric = dot(r, plus, minus) / (2.0 * cfg.step);
    if (!(relative_error(analytic[i], numeric, cfg.floor) < cfg.tolerance)) {
      // Retry at half the step. A correct gradient with large truncation
      // error makes the two estimates disagree; a wrong one does not.
      value[i] = v + 0.5 * cfg.step;
      const Wide p2 = eval();
      value[i] = v - 0.5 * cfg.step;
      const Wide m2 = eval();
      value[i] = v;
      const double half = dot(r, p2, m2) / cfg.step;
      if (!(relative_error(numeric, half, cfg.floor) < 0.5 * cfg.tolerance)) {
        ++stat.skipped;
        ++stat.nonsmooth;
        continue;
      }
    }
    stat.max_rel_err = std::max(stat.max_rel_err, relative_error(analytic[i], numeric, cfg.floor));
    stat.max_abs_err = std::max(stat.max_abs_err, std::abs(analytic[i] - numeric));
    ++stat.checked;
  }
}

/// Sign pattern of every cached ReLU input of a layer tree.
inline Signature relu_signature(const Layer<double>& layer) {
  return [&layer] {
    std::vector<const Tensor*> inputs;
    layer.relu_inputs(inputs);
    std::vector<signed char> sig;
    for (const Tensor* t : inputs)
      for (double v : t->values()) sig.push_back(static_cast<signed char>((v > 0) - (v < 0)));
    return sig;
  };
}

/// Inputs and parameters of a stateful layer. Parameters are perturbed in
/// place through their spans.
inline void check_layer(GradcheckReport& rep, const std::string& prefix, Layer<double>& layer,
                        Tensor& x, Rng& rng, const GradcheckConfig& cfg,
                        std::size_t param_coords = 0, std::size_t input_coords = 0) {
  const Tensor y = layer.forward(x);
  const Tensor r = random_tensor(y.shape(), rng);
  layer.zero_grad();
  const Tensor gx = layer.backward(r);
  const Eval eval = [&] { return widen(layer.forward(x)); };
  const Signature sig = relu_signature(layer);
  auto sample = [&rng](std::size_t n, std::size_t k) {
    std::vector<std::size_t> c;
    if (k == 0 || k >= n) return c;
    for (std::size_t j = 0; j < k; ++j) c.push_back(rng.uniform_index(n));
    return c;
  };
  const auto params = layer.parameters();
  std::size_t total = 0;
  for (const auto& p : params) total += p.value.size();
  for (const auto& p : params) {
    const std::size_t k = param_coords == 0 ? 0 : std::max<std::size_t>(1, param_coords * p.value.size() / total);
    const std::vector<double> analytic(p.grad.begin(), p.grad.end());
    check_argument(rep.arg(prefix + p.path), p.value, analytic, r, eval, cfg, sample(p.value.size(), k), sig);
  }
  check_argument(rep.arg(prefix + "x"), x.span(), gx.span(), r, eval, cfg, sample(x.numel(), input_coords), sig);
}

inline void trial_conv2d(GradcheckReport& rep, Rng& rng, const GradcheckConfig& cfg) {
  const std::size_t stride = 1 + rng.uniform_index(2);
  auto p = make_conv<double>(3, 4, 3, stride, 1, true);
  for (double& v : p.weights.values()) v = rng.uniform(-1, 1);
  for (double& v : p.bias) v = rng.uniform(-1, 1);
  Tensor x = random_tensor({2, 3, 6, 7}, rng);
  const Tensor r = random_tensor(conv2d_output_shape(x.shape(), p), rng);
  const ConvGrads<double> g = conv2d_backward(r, x, p);
  const Eval eval = [&] {
    ConvParams<long double> w{widen(p.weights), widen(p.bias), p.geometry};
    return conv2d_forward(widen(x), w);
  };
  check_argument(rep.arg("x"), x.span(), g.grad_x.span(), r, eval, cfg);
  check_argument(rep.arg("weight"), p.weights.span(), g.grad_weights.span(), r, eval, cfg);
  check_argument(rep.arg("bias"), std::span<double>(p.bias), std::span<const double>(g.grad_bias), r, eval, cfg);
}

inline void trial_instance_norm(GradcheckReport& rep, Rng& rng, const GradcheckConfig& cfg) {
  InstanceNormParams<double> p(3);
  for (double& v : p.gamma) v = rng.uniform(0.5, 1.5);
  for (double& v : p.beta) v = rng.uniform(-1, 1);
  Tensor x = random_tensor({2, 3, 5, 5}, rng);
  const Tensor r = random_tensor(x.shape(), rng);
  const InstanceNormGrads<double> g = instance_norm_backward(r, x, p);
  const Eval eval = [&] {
    InstanceNormParams<long double> w(3);
    w.gamma = widen(p.gamma);
    w.beta = widen(p.beta);
    w.eps = p.eps;
    return instance_norm_forward(widen(x), w);
  };
  check_argument(rep.arg("x"), x.span(), g.grad_x.span(), r, eval, cfg);
  check_argument(rep.arg("gamma"), std::span<double>(p.gamma), std::span<const double>(g.grad_gamma), r, eval, cfg);
  check_argument(rep.arg("beta"), std::span<double>(p.beta), std::span<const double>(g.grad_beta), r, eval, cfg);
}

inline void trial_activations(GradcheckReport& rep, Rng& rng, const GradcheckConfig& cfg) {
  // ReLU inputs stay at least 0.05 away from the kink.
  Tensor x = random_tensor({2, 3, 4, 4}, rng, 0.05, 2.0);
  for (double& v : x.values())
    if (rng.uniform() < 0.5) v = -v;
  Tensor r = random_tensor(x.shape(), rng);
  check_argument(rep.arg("relu.x"), x.span(), relu_backward(r, x).span(), r,
                 [&] { return relu_forward(widen(x)); }, cfg);
  Tensor z = random_tensor(x.shape(), rng, -6.0, 6.0);
  const double a = kLogitAmplification;
  check_argument(rep.arg("amplified_sigmoid.x"), z.span(), sigmoid_amplified_backward(r, z, a).span(), r,
                 [&] { return sigmoid_amplified(widen(z), static_cast<long double>(a)); }, cfg);
}

inline PoolGeometry random_pool_geometry(Rng& rng) {
  static const PoolGeometry choices[] = {PoolGeometry::square(3, 2, 1), PoolGeometry::square(2, 2, 0),
                                         PoolGeometry::square(3, 1, 1), PoolGeometry::square(3, 2, 0)};
  return choices[rng.uniform_index(4)];
}

inline void trial_avg_pool(GradcheckReport& rep, Rng& rng, const GradcheckConfig& cfg) {
  const PoolGeometry g = random_pool_geometry(rng);
  Tensor x = random_tensor({2, 3, 7, 6}, rng);
  const Tensor r = random_tensor(g.output_shape(x.shape()), rng);
  check_argument(rep.arg("x"), x.span(), avg_pool2d_backward(r, x.shape(), g).span(), r,
                 [&] { return avg_pool2d_forward(widen(x), g); }, cfg);
}

inline void trial_max_pool(GradcheckReport& rep, Rng& rng, const GradcheckConfig& cfg) {
  // Tie-free input: a shuffled ramp with gaps of 0.01, far above the step.
  const PoolGeometry g = random_pool_geometry(rng);
  Tensor x({2, 3, 7, 6});
  std::vector<std::size_t> perm(x.numel());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.uniform_index(i)]);
  for (std::size_t i = 0; i < perm.size(); ++i) x.data()[i] = 0.01 * static_cast<double>(perm[i]);
  const Tensor r = random_tensor(g.output_shape(x.shape()), rng);
  check_argument(rep.arg("x"), x.span(), max_pool2d_backward(r, x, g).span(), r,
                 [&] { return max_pool2d_forward(widen(x), g); }, cfg);
}

inline void trial_lip2d(GradcheckReport& rep, Rng& rng, const GradcheckConfig& cfg) {
  const LipGeometry g(random_pool_geometry(rng));
  Tensor x = random_tensor({2, 3, 7, 6}, rng);
  Tensor logit = random_tensor(x.shape(), rng, 0.0, 12.0);
  const Tensor r = random_tensor(g.geom.output_shape(x.shape()), rng);
  const LipGrads<double> lg = lip2d_backward(r, x, logit, g);
  const Eval eval = [&] { return lip2d_forward(widen(x), widen(logit), g); };
  check_argument(rep.arg("x"), x.span(), lg.grad_x.span(), r, eval, cfg);
  check_argument(rep.arg("logit"), logit.span(), lg.grad_logit.span(), r, eval, cfg);
}

inline void trial_logit_module(GradcheckReport& rep, Rng& rng, const GradcheckConfig& cfg,
                               std::size_t trial) {
  static const LogitSpec specs[] = {LogitSpec::projection(), LogitSpec::bottleneck(4), LogitSpec::conv3x3()};
  const LogitSpec spec = specs[trial % 3];
  LogitModule<double> m(spec, 3);
  m.init_params("", rng.next_u64());
  // Random affines so every parameter gets a non-trivial gradient.
  for (auto& p : m.parameters())
    for (double& v : p.value) v += rng.uniform(-0.3, 0.3);
  Tensor x = random_tensor({2, 3, 5, 5}, rng);
  check_layer(rep, spec.str() + ".", m, x, rng, cfg);
}

inline void trial_tiny_model(GradcheckReport& rep, Rng& rng, const GradcheckConfig& cfg,
                             std::size_t trial) {
  static const Downsampling kinds[] = {Downsampling::lip_conv, Downsampling::strided_conv,
                                       Downsampling::avgpool_conv};
  SyntheticTaskConfig task;
  task.image_size = 12;
  const Downsampling kind = kinds[trial % 3];
  const LogitSpec logit = trial % 2 == 0 ? LogitSpec::projection() : LogitSpec::bottleneck(4);
  TinyCnnConfig small;
  small.stem = 4;
  small.stages = {4, 6, 8};
  small.widths = {2, 3, 4};
  ModelGraph<double> g = build_tiny_cnn<double>(task, kind, logit, small);
  g.init(rng.next_u64());
  for (auto& p : g.parameters())
    for (double& v : p.value) v += rng.uniform(-0.1, 0.1);
  Tensor x = random_tensor({2, 1, task.image_size, task.image_size}, rng);
  check_layer(rep, to_string(kind) + ".", g.root(), x, rng, cfg, cfg.model_param_coords,
              cfg.model_input_coords);
}

}  // namespace detail

/// Runs `trials` seeded trials of one selector. Trial t uses the stream
/// derive_seed(seed, t).
inline GradcheckReport gradcheck(GradSelector selector, std::size_t trials, std::uint64_t seed,
                                 const GradcheckConfig& cfg = {}) {
  if (trials == 0) throw UsageError("gradcheck needs at least one trial");
  GradcheckReport rep;
  rep.selector = selector;
  rep.trials = trials;
  rep.seed = seed;
  rep.tolerance = cfg.tolerance;
  for (std::size_t t = 0; t < trials; ++t) {
    Rng rng(derive_seed(seed, t));
    switch (selector) {
      case GradSelector::conv2d: detail::trial_conv2d(rep, rng, cfg); break;
      case GradSelector::instance_norm: detail::trial_instance_norm(rep, rng, cfg); break;
      case GradSelector::activations: detail::trial_activations(rep, rng, cfg); break;
      case GradSelector::avg_pool: detail::trial_avg_pool(rep, rng, cfg); break;
      case GradSelector::max_pool: detail::trial_max_pool(rep, rng, cfg); break;
      case GradSelector::lip2d: detail::trial_lip2d(rep, rng, cfg); break;
      case GradSelector::logit_module: detail::trial_logit_module(rep, rng, cfg, t); break;
      case GradSelector::tiny_model: detail::trial_tiny_model(rep, rng, cfg, t); break;
    }
  }
  return rep;
}

inline GradcheckReport gradcheck(const std::string& selector, std::size_t trials, std::uint64_t seed,
                                 const GradcheckConfig& cfg = {}) {
  return gradcheck(parse_grad_selector(selector), trials, seed, cfg);
}

}  // namespace lip
