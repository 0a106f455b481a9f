// Acceptance run: one PASS/FAIL line per criterion, tolerances fixed below.
//
//   acceptance [--only N]... [--known-failure N]...
//
// Exit 0 when the failing set equals the --known-failure set, 1 otherwise,
// 2 on bad arguments.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "lip/harness/gradcheck.hpp"
#include "lip/harness/train.hpp"
#include "lip/model/zoo.hpp"
#include "lip/nn/pooling.hpp"

using namespace lip;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances.
constexpr double kParamTol = 0.05e6;
constexpr double kMacRelTol = 0.05;
constexpr std::size_t kGradTrials = 20;
constexpr double kLimitExact = 1e-12;
constexpr double kMaxPoolDev = 1e-3;
constexpr double kMaxGap = 0.2;
constexpr std::size_t kCases = 1000;
constexpr double kZeroInitRel = 1e-6;
constexpr std::size_t kZeroInitBatch = 256;
constexpr double kStableRel = 1e-5;
constexpr std::size_t kStableCases = 500;
constexpr double kPropTol = 1e-12;
constexpr std::size_t kPropCases = 300;
constexpr double kChanceMargin = 0.3;
constexpr std::size_t kSeeds = 3;
constexpr double kLearnBudgetSeconds = 900.0;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double rel_diff(double a, double b) {
  const double d = std::max(std::abs(a), std::abs(b));
  return d > 0 ? std::abs(a - b) / d : 0.0;
}

template <typename T>
double max_abs(const Tensor4<T>& a, const Tensor4<T>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(double(a.data()[i]) - double(b.data()[i])));
  return m;
}

template <typename T>
double max_rel(const Tensor4<T>& a, const Tensor4<T>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, rel_diff(a.data()[i], b.data()[i]));
  return m;
}

Shape4 random_shape(Rng& rng, std::size_t min_hw = 3) {
  return {1 + rng.uniform_index(2), 1 + rng.uniform_index(3), min_hw + rng.uniform_index(8), min_hw + rng.uniform_index(8)};
}

PoolGeometry random_lip_geometry(Rng& rng) {
  static const PoolGeometry table[] = {PoolGeometry::square(3, 2, 1), PoolGeometry::square(2, 2, 0),
                                       PoolGeometry::square(3, 1, 1), PoolGeometry::square(3, 2, 0),
                                       PoolGeometry::square(4, 2, 1)};
  return table[rng.uniform_index(5)];
}

// Paper figures: params in millions, MACs in G.
struct TableRow {
  const char* model;
  double params_m;
  double macs_g;
};
constexpr TableRow kTable[] = {
    {"resnet50", 25.6, 4.12},
    {"resnet50-avgpool", 22.8, 3.82},
    {"lip-resnet50-projection", 24.7, 4.78},
    {"lip-resnet50-bottleneck64", 23.2, 4.65},
    {"lip-resnet50-bottleneck128", 23.9, 5.33},
    {"lip-resnet50-bottleneck256", 25.8, 7.61},
    {"lip-resnet50-planB", 23.8, 4.87},
    {"lip-resnet50-planC", 23.7, 4.26},
    {"lip-resnet50-planD", 23.9, 4.11},
    {"resnet101", 44.5, 7.85},
    {"lip-resnet101-bottleneck128", 42.9, 9.06},
};

std::vector<CountRow>& counts() {
  static std::vector<CountRow> rows;
  if (rows.empty())
    for (const auto& t : kTable) rows.push_back(count_model(t.model));
  return rows;
}

Outcome crit_params() {
  Outcome o{true, ""};
  for (std::size_t i = 0; i < std::size(kTable); ++i) {
    const double got = static_cast<double>(counts()[i].params);
    if (std::abs(got - kTable[i].params_m * 1e6) > kParamTol) {
      o.pass = false;
      o.detail += fmt("%s %.3fM vs %.1fM; ", kTable[i].model, got / 1e6, kTable[i].params_m);
    }
  }
  if (o.pass) o.detail = fmt("%zu models within +-%.2fM", std::size(kTable), kParamTol / 1e6);
  return o;
}

Outcome crit_macs() {
  Outcome o{true, ""};
  double worst = 0;
  for (std::size_t i = 0; i < std::size(kTable); ++i) {
    const double got = static_cast<double>(counts()[i].macs);
    const double r = std::abs(got - kTable[i].macs_g * 1e9) / (kTable[i].macs_g * 1e9);
    worst = std::max(worst, r);
    if (r > kMacRelTol) {
      o.pass = false;
      o.detail += fmt("%s %.3fG vs %.2fG; ", kTable[i].model, got / 1e9, kTable[i].macs_g);
    }
  }
  if (o.pass) o.detail = fmt("%zu models, worst deviation %.2f%%", std::size(kTable), 100 * worst);
  return o;
}

Outcome crit_gradients() {
  Outcome o{true, ""};
  double worst = 0;
  for (const auto& [name, sel] : grad_selectors()) {
    const GradcheckReport r = gradcheck(sel, kGradTrials, 0);
    worst = std::max(worst, r.max_rel_err());
    std::cerr << "  gradcheck " << name << " max rel err " << r.max_rel_err() << "\n";
    if (!r.passed()) {
      o.pass = false;
      o.detail += fmt("%s %.2e; ", name.c_str(), r.max_rel_err());
    }
  }
  if (o.pass) o.detail = fmt("%zu ops x %zu seeds, worst rel err %.2e", grad_selectors().size(), kGradTrials, worst);
  return o;
}

Outcome crit_limits() {
  Rng rng(401);
  // (a) constant logit
  double dev_a = 0;
  for (std::size_t i = 0; i < kCases; ++i) {
    const auto g = random_lip_geometry(rng);
    const auto x = random_normal<double>(random_shape(rng, 4), rng.next_u64());
    const auto l = tensor_new<double>(x.shape(), rng.uniform(0.0, 12.0));
    dev_a = std::max(dev_a, max_abs(lip2d_forward(x, l, LipGeometry(g)), avg_pool2d_forward(x, g)));
  }
  // (b) exp-beta toward max pooling on [0,1] inputs, 2x2 windows
  double dev_b = 0;
  bool monotone = true;
  const auto g2 = PoolGeometry::square(2, 2, 0);
  for (std::size_t i = 0; i < kCases; ++i) {
    const std::size_t wh = 1 + rng.uniform_index(3), ww = 1 + rng.uniform_index(3);
    Tensor4<double> x({1, 1, 2 * wh, 2 * ww});
    for (std::size_t wy = 0; wy < wh; ++wy)
      for (std::size_t wx = 0; wx < ww; ++wx) {
        const std::size_t hot = rng.uniform_index(4);
        const double top = rng.uniform(kMaxGap, 1.0);
        for (std::size_t k = 0; k < 4; ++k)
          x(0, 0, 2 * wy + k / 2, 2 * wx + k % 2) = k == hot ? top : rng.uniform(0.0, top - kMaxGap);
      }
    const auto mx = max_pool2d_forward(x, g2);
    double prev = INFINITY;
    for (double beta : {1.0, 5.0, 10.0, 50.0}) {
      const double d = max_abs(lan_pool_exp_beta(x, beta, g2), mx);
      monotone = monotone && d <= prev;
      prev = d;
    }
    dev_b = std::max(dev_b, prev);
  }
  // (c) strided importance selects x(2oy, 2ox)
  std::size_t mismatches = 0;
  for (std::size_t i = 0; i < kCases; ++i) {
    const auto x = random_normal<double>(random_shape(rng, 2), rng.next_u64());
    const auto y = lan_pool(x, importance_strided(x, 2), g2);
    const Shape4 s = y.shape();
    for (std::size_t n = 0; n < s.n; ++n)
      for (std::size_t c = 0; c < s.c; ++c)
        for (std::size_t oy = 0; oy < s.h; ++oy)
          for (std::size_t ox = 0; ox < s.w; ++ox) mismatches += y(n, c, oy, ox) != x(n, c, 2 * oy, 2 * ox);
  }
  const bool pass = dev_a <= kLimitExact && dev_b < kMaxPoolDev && monotone && mismatches == 0;
  return {pass, fmt("(a) max dev %.2e (b) beta=50 dev %.2e, monotone %s (c) %zu mismatches; %zu cases each", dev_a,
                    dev_b, monotone ? "yes" : "no", mismatches, kCases)};
}

Outcome crit_zero_init() {
  SyntheticTaskConfig task;
  task.test_samples = kZeroInitBatch;
  const Dataset ds = generate_split(task, Split::test);
  std::vector<std::size_t> order(ds.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  const auto x = gather_batch(ds, order, 0, ds.size());
  double worst = 0;
  for (const auto& logit : {LogitSpec::projection(), LogitSpec::bottleneck(16)}) {
    auto lip = build_tiny_cnn<float>(task, Downsampling::lip_conv, logit);
    auto avg = build_tiny_cnn<float>(task, Downsampling::avgpool_conv, logit);
    lip.init(21);
    avg.init(22);
    copy_shared_params(avg, lip);
    worst = std::max(worst, max_rel(lip.forward(x), avg.forward(x)));
  }
  return {worst <= kZeroInitRel, fmt("%zu samples, projection and bottleneck logits, max rel diff %.2e", kZeroInitBatch, worst)};
}

Outcome crit_stability() {
  Rng rng(601);
  double worst = 0;
  for (std::size_t i = 0; i < kStableCases; ++i) {
    const Shape4 s = random_shape(rng, 4);
    // non-negative features, as pooled maps follow a ReLU
    const auto x = random_uniform<float>(s, rng.next_u64(), 0.0, 1.0);
    auto l = random_uniform<float>(s, rng.next_u64(), 0.0, 12.0);
    l.data()[0] = 1e-3f;
    l.data()[l.numel() - 1] = 12.0f - 1e-3f;
    const LipGeometry g(random_lip_geometry(rng));
    worst = std::max(worst, max_rel(lip2d_forward(x, l, g, LipMode::naive), lip2d_forward(x, l, g, LipMode::stabilized)));
  }
  return {worst <= kStableRel, fmt("%zu cases, logits over (0,12), max rel diff %.2e", kStableCases, worst)};
}

Outcome crit_properties() {
  Rng rng(701);
  std::size_t hull = 0, shift = 0, norm = 0, trans = 0, emph = 0;
  for (std::size_t i = 0; i < kPropCases; ++i) {
    const PoolGeometry pg = random_lip_geometry(rng);
    const LipGeometry g(pg);
    const auto x = random_normal<double>(random_shape(rng, 4), rng.next_u64());
    const auto l = random_uniform<double>(x.shape(), rng.next_u64(), 0.0, 12.0);
    const auto y = lip2d_forward(x, l, g);
    const Shape4 os = y.shape();

    for (std::size_t n = 0; n < os.n; ++n)
      for (std::size_t c = 0; c < os.c; ++c)
        for (std::size_t oy = 0; oy < os.h; ++oy)
          for (std::size_t ox = 0; ox < os.w; ++ox) {
            const auto v = window_extract(x, n, c, pg, ox, oy).values;
            const double v0 = y(n, c, oy, ox);
            hull += v0 < *std::min_element(v.begin(), v.end()) - kPropTol ||
                    v0 > *std::max_element(v.begin(), v.end()) + kPropTol;
            const auto lw = local_weights(ImportanceMap<double>(map_elementwise(l, 0.0, [](double a, double) {
                                            return std::exp(a);
                                          })),
                                          pg, n, c, ox, oy);
            double s = 0;
            for (double w : lw.weights) s += w;
            norm += std::abs(s - 1.0) > kPropTol;
          }

    const double k = rng.uniform(-30.0, 30.0);
    const auto ys = lip2d_forward(x, map_elementwise(l, k, std::plus<>{}), g);
    for (std::size_t j = 0; j < y.numel(); ++j)
      shift += rel_diff(ys.data()[j], y.data()[j]) > kPropTol && std::abs(ys.data()[j] - y.data()[j]) > kPropTol;

    // translation covariance: shift by one stride along x, unpadded window
    const LipGeometry gu(PoolGeometry::square(pg.kh, pg.sh, 0));
    const Shape4 s = x.shape();
    if (s.w > pg.kh + pg.sw) {
      const Shape4 t{s.n, s.c, s.h, s.w - pg.sw};
      Tensor4<double> xa(t), xb(t), la(t), lb(t);
      for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t c = 0; c < s.c; ++c)
          for (std::size_t yy = 0; yy < s.h; ++yy)
            for (std::size_t xx = 0; xx < t.w; ++xx) {
              xa(n, c, yy, xx) = x(n, c, yy, xx);
              la(n, c, yy, xx) = l(n, c, yy, xx);
              xb(n, c, yy, xx) = x(n, c, yy, xx + pg.sw);
              lb(n, c, yy, xx) = l(n, c, yy, xx + pg.sw);
            }
      const auto ya = lip2d_forward(xa, la, gu), yb = lip2d_forward(xb, lb, gu);
      for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t c = 0; c < s.c; ++c)
          for (std::size_t oy = 0; oy < ya.shape().h; ++oy)
            for (std::size_t ox = 0; ox + 1 < ya.shape().w; ++ox) trans += rel_diff(ya(n, c, oy, ox + 1), yb(n, c, oy, ox)) > kPropTol &&
                       std::abs(ya(n, c, oy, ox + 1) - yb(n, c, oy, ox)) > kPropTol;
    }

    // monotone emphasis: raising the logit of a window's largest input
    // never lowers that window's output
    auto l2 = l;
    const auto wv = window_extract(x, 0, 0, pg, 0, 0);
    const std::size_t best = static_cast<std::size_t>(std::max_element(wv.values.begin(), wv.values.end()) - wv.values.begin());
    // values holds only in-bounds taps; walk the mask to find the window slot
    std::size_t arg = 0;
    for (std::size_t seen = 0; arg < wv.mask.size(); ++arg)
      if (wv.mask[arg] && seen++ == best) break;
    const auto yy = static_cast<std::size_t>(wv.origin_y + static_cast<long>(arg / pg.kw));
    const auto xx = static_cast<std::size_t>(wv.origin_x + static_cast<long>(arg % pg.kw));
    {
      l2(0, 0, yy, xx) += rng.uniform(0.1, 3.0);
      emph += lip2d_forward(x, l2, g)(0, 0, 0, 0) < y(0, 0, 0, 0) - kPropTol;
    }
  }
  const bool pass = hull + shift + norm + trans + emph == 0;
  return {pass, fmt("%zu cases; violations: hull %zu, shift %zu, normalization %zu, translation %zu, emphasis %zu",
                    kPropCases, hull, shift, norm, trans, emph)};
}

// Learning demo and determinism share the first LIP run.
struct LearningState {
  bool ran = false;
  std::vector<double> acc[3];  // strided, avgpool, lip
  double seconds = 0;
  fs::path root;
  std::string first_csv;
};

LearningState& learning() {
  static LearningState st;
  if (st.ran) return st;
  st.ran = true;
  st.root = fs::temp_directory_path() / "lip_acceptance";
  fs::remove_all(st.root);
  SyntheticTaskConfig task;
  task.seed = 1;
  write_dataset(task, st.root / "data");
  const Downsampling kinds[3] = {Downsampling::strided_conv, Downsampling::avgpool_conv, Downsampling::lip_conv};
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t seed = 1; seed <= kSeeds; ++seed)
    for (std::size_t k = 0; k < 3; ++k) {
      TrainConfig cfg;
      cfg.seed = seed;
      cfg.variant = kinds[k];
      cfg.data_dir = (st.root / "data").string();
      const fs::path out = st.root / fmt("run_%s_%zu", to_string(kinds[k]).c_str(), seed);
      const auto res = run_training(cfg, out);
      st.acc[k].push_back(res.final_test.accuracy);
      std::cerr << "  " << to_string(kinds[k]) << " seed " << seed << " test accuracy " << res.final_test.accuracy << "\n";
    }
  st.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return st;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

Outcome crit_learning() {
  const auto& st = learning();
  const double ms = median(st.acc[0]), ma = median(st.acc[1]), ml = median(st.acc[2]);
  bool chance = true;
  for (const auto& a : st.acc)
    for (double v : a) chance = chance && v >= 0.25 + kChanceMargin;
  const bool order = ml >= ms && ml >= ma && (ml > ms || ml > ma);
  const bool fast = st.seconds < kLearnBudgetSeconds;
  return {order && chance && fast,
          fmt("median test accuracy lip %.4f strided %.4f avgpool %.4f; all runs >= %.2f: %s; %zu runs in %.0f s (budget %.0f s)",
              ml, ms, ma, 0.25 + kChanceMargin, chance ? "yes" : "no", 3 * kSeeds, st.seconds, kLearnBudgetSeconds)};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Outcome crit_determinism() {
  const auto& st = learning();
  TrainConfig cfg;
  cfg.seed = 1;
  cfg.variant = Downsampling::lip_conv;
  cfg.data_dir = (st.root / "data").string();
  const fs::path first = st.root / fmt("run_%s_1", to_string(cfg.variant).c_str()) / "metrics.csv";
  const fs::path again = st.root / "rerun";
  run_training(cfg, again);
  const std::string a = slurp(first), b = slurp(again / "metrics.csv");
  const bool same = !a.empty() && a == b;
  return {same, fmt("lip seed 1 rerun: metrics.csv %s (%zu bytes)", same ? "byte-identical" : "differs", a.size())};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::vector<int> only, known;
  app.add_option("--only", only, "run only these criteria")->check(CLI::Range(1, 9));
  app.add_option("--known-failure", known, "criteria expected to fail")->check(CLI::Range(1, 9));
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  const std::vector<std::pair<std::string, std::function<Outcome()>>> crits = {
      {"parameter counts", crit_params},   {"MAC counts", crit_macs},
      {"gradient suite", crit_gradients},  {"limiting cases", crit_limits},
      {"zero-init equivalence", crit_zero_init}, {"stability equivalence", crit_stability},
      {"property suite", crit_properties}, {"learning demo", crit_learning},
      {"determinism", crit_determinism},
  };
  const std::set<int> expect(known.begin(), known.end());
  std::set<int> failed;
  for (std::size_t i = 0; i < crits.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      o = crits[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!o.pass) failed.insert(id);
    std::cout << (o.pass ? "PASS" : "FAIL") << " " << id << " " << crits[i].first << ": " << o.detail
              << fmt(" [%.1f s]", sec) << (!o.pass && expect.count(id) ? " (known failure)" : "") << std::endl;
  }
  std::set<int> expected_run;
  for (int k : expect)
    if (only.empty() || std::find(only.begin(), only.end(), k) != only.end()) expected_run.insert(k);
  if (failed != expected_run) {
    for (int k : expected_run)
      if (!failed.count(k)) std::cout << "criterion " << k << " was listed as a known failure but passed" << std::endl;
    return 1;
  }
  return 0;
}
