#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "lip/harness/bench.hpp"
#include "lip/harness/export.hpp"
#include "lip/harness/gradcheck.hpp"
#include "lip/harness/train.hpp"

using namespace lip;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("lip_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

SyntheticTaskConfig small_task(std::size_t n_train, std::size_t n_test, std::uint64_t seed = 0) {
  SyntheticTaskConfig t;
  t.image_size = 16;
  t.train_samples = n_train;
  t.test_samples = n_test;
  t.seed = seed;
  return t;
}

TrainConfig short_run(Downsampling kind, std::size_t epochs) {
  TrainConfig c;
  c.variant = kind;
  c.epochs = epochs;
  c.batch_size = 16;
  return c;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(LIPCTL_PATH) + " " + args + " >/dev/null 2>&1";
  const int st = std::system(cmd.c_str());
  return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

}  // namespace

TEST(Dataset, SameSeedSameBytes) {
  const auto a = scratch("ds_a"), b = scratch("ds_b");
  write_dataset(small_task(50, 20, 9), a);
  write_dataset(small_task(50, 20, 9), b);
  for (const char* f : {"train.lipa", "test.lipa", "index.json"}) EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  write_dataset(small_task(50, 20, 10), b);
  EXPECT_NE(slurp(a / "train.lipa"), slurp(b / "train.lipa"));

  const Dataset back = read_split(a, Split::train);
  const Dataset fresh = generate_split(small_task(50, 20, 9), Split::train);
  EXPECT_EQ(back.images, fresh.images);
  EXPECT_EQ(back.labels, fresh.labels);
  EXPECT_EQ(read_task(a).seed, 9u);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Dataset, LabelsRoughlyBalanced) {
  SyntheticTaskConfig t;
  const Dataset ds = generate_split(t, Split::train);
  std::array<std::size_t, 4> hist{};
  for (auto l : ds.labels) ++hist.at(l);
  const double mean = t.train_samples / 4.0, sd = std::sqrt(t.train_samples * 0.25 * 0.75);
  for (auto h : hist) EXPECT_LE(std::abs(static_cast<double>(h) - mean), 3 * sd);
}

TEST(Dataset, PatternsAndPlacement) {
  for (std::size_t l = 0; l < 4; ++l) {
    const auto p = class_pattern(l);
    double s = 0;
    for (double v : p) s += v;
    EXPECT_EQ(s, 0.0);
  }
  EXPECT_THROW(class_pattern(4), IndexError);
  // Any 3x3 patch holds exactly one stride-2 aligned 2x2 cell.
  for (std::size_t oy = 0; oy < 30; ++oy)
    for (std::size_t ox = 0; ox < 30; ++ox) EXPECT_EQ(aligned_cells(oy, ox), 1u);
  EXPECT_EQ(aligned_cells(1, 0, 4), 0u);

  const Dataset ds = generate_split(small_task(200, 10), Split::train);
  for (const auto& [y, x] : ds.positions) {
    EXPECT_LE(y, 13u);
    EXPECT_LE(x, 13u);
  }
}

TEST(Dataset, ConfigValidation) {
  SyntheticTaskConfig t;
  t.target_amplitude = 1.5;
  EXPECT_THROW(t.validate(), BuildError);
  t = {};
  t.classes = 5;
  EXPECT_THROW(t.validate(), BuildError);
}

TEST(Train, LossAtInitNearLogClasses) {
  const auto task = small_task(10, 200);
  const Dataset test = generate_split(task, Split::test);
  for (auto kind : {Downsampling::strided_conv, Downsampling::avgpool_conv, Downsampling::lip_conv}) {
    auto g = build_from_config<float>(task, short_run(kind, 1));
    g.init(init_seed(1));
    EXPECT_NEAR(evaluate(g, test).loss, std::log(4.0), 0.1) << to_string(kind);
  }
}

TEST(Train, EvaluateIsRepeatable) {
  const auto task = small_task(10, 64);
  const Dataset test = generate_split(task, Split::test);
  auto g = build_from_config<float>(task, short_run(Downsampling::lip_conv, 1));
  g.init(3);
  const auto a = evaluate(g, test, 20), b = evaluate(g, test, 64);
  EXPECT_EQ(a.accuracy, b.accuracy);
  EXPECT_NEAR(a.loss, b.loss, 1e-6);
  EXPECT_EQ(evaluate(g, test, 20).loss, a.loss);
}

TEST(Train, EpochZeroLipMatchesAvgpool) {
  const auto task = small_task(32, 128);
  const Dataset train = generate_split(task, Split::train), test = generate_split(task, Split::test);
  auto lip = build_from_config<float>(task, short_run(Downsampling::lip_conv, 1));
  auto avg = build_from_config<float>(task, short_run(Downsampling::avgpool_conv, 1));
  lip.init(init_seed(4));
  avg.init(init_seed(4));
  const auto rl = evaluate(lip, test), ra = evaluate(avg, test);
  EXPECT_EQ(rl.accuracy, ra.accuracy);
  EXPECT_NEAR(rl.loss, ra.loss, 1e-6);
}

TEST(Train, SameSeedSameMetrics) {
  const auto task = small_task(48, 32);
  const Dataset train = generate_split(task, Split::train), test = generate_split(task, Split::test);
  std::string csv[2];
  for (auto& out : csv) {
    auto g = build_from_config<float>(task, short_run(Downsampling::lip_conv, 2));
    g.init(init_seed(7));
    out = format_metrics_csv(train_model(g, short_run(Downsampling::lip_conv, 2), train, test).rows);
  }
  EXPECT_EQ(csv[0], csv[1]);
  EXPECT_EQ(csv[0].substr(0, csv[0].find('\n')), "epoch,split,loss,accuracy");
  EXPECT_EQ(std::count(csv[0].begin(), csv[0].end(), '\n'), 7);
}

TEST(Train, OverfitsSixteenSamples) {
  auto task = small_task(16, 16);
  task.target_amplitude = 0.9;
  const Dataset train = generate_split(task, Split::train);
  for (auto kind : {Downsampling::strided_conv, Downsampling::lip_conv}) {
    TrainConfig cfg = short_run(kind, 60);
    cfg.batch_size = 8;
    auto g = build_from_config<float>(task, cfg);
    g.init(init_seed(2));
    train_model(g, cfg, train, train);
    EXPECT_EQ(evaluate(g, train).accuracy, 1.0) << to_string(kind);
  }
}

TEST(Train, FrozenRandomModelAtChance) {
  // a = 0: labels carry no signal in the pixels.
  auto task = small_task(10, 1000);
  task.target_amplitude = 0.0;
  const Dataset test = generate_split(task, Split::test);
  const double sd = std::sqrt(0.25 * 0.75 / 1000);
  for (std::uint64_t seed : {1, 2, 3}) {
    auto g = build_from_config<float>(task, short_run(Downsampling::strided_conv, 1));
    g.init(init_seed(seed));
    EXPECT_NEAR(evaluate(g, test).accuracy, 0.25, 3 * sd) << seed;
  }
}

TEST(Train, UninformativeImagesStayNearChance) {
  // a = 0: labels carry no signal in the pixels.
  auto task = small_task(200, 400);
  task.target_amplitude = 0.0;
  const Dataset train = generate_split(task, Split::train), test = generate_split(task, Split::test);
  auto cfg = short_run(Downsampling::lip_conv, 3);
  auto g = build_from_config<float>(task, cfg);
  g.init(init_seed(5));
  const auto res = train_model(g, cfg, train, test);
  const double sd = std::sqrt(0.25 * 0.75 / 400);
  EXPECT_LE(res.final_test.accuracy, 0.25 + 4 * sd);
}

TEST(Train, LearningRateSchedule) {
  TrainConfig c;
  c.epochs = 20;
  EXPECT_DOUBLE_EQ(c.lr_at(0), 0.05);
  EXPECT_DOUBLE_EQ(c.lr_at(11), 0.05);
  EXPECT_DOUBLE_EQ(c.lr_at(12), 0.005);
  EXPECT_NEAR(c.lr_at(17), 0.0005, 1e-15);
  c.momentum = 1.0;
  EXPECT_THROW(c.validate(), BuildError);
}

TEST(Train, RunWritesArtifactsAndReloads) {
  const auto data = scratch("run_data"), out = scratch("run_out");
  write_dataset(small_task(32, 16, 2), data);
  TrainConfig cfg = short_run(Downsampling::lip_conv, 1);
  cfg.data_dir = data.string();
  cfg.logit = LogitSpec::bottleneck(4);
  const auto res = run_training(cfg, out);
  for (const char* f : {"metrics.csv", "timing.csv", "config.json", "checkpoint.lipa"}) EXPECT_TRUE(fs::exists(out / f)) << f;
  auto g = load_trained(out / "checkpoint.lipa");
  EXPECT_EQ(evaluate(g, read_split(data, Split::test), cfg.eval_batch).accuracy, res.final_test.accuracy);
  fs::remove_all(data);
  fs::remove_all(out);
}

TEST(Gradcheck, PassRule) {
  GradcheckReport r;
  EXPECT_FALSE(r.passed());
  r.arg("a") = {"a", 18, 0, 0, 5e-5, 0};
  r.arg("b") = {"b", 0, 2, 2, 0, 0};
  EXPECT_TRUE(r.passed());
  r.arg("b").skipped = 3;
  EXPECT_FALSE(r.passed());
  r.arg("b").skipped = 2;
  r.arg("a").max_rel_err = 1e-4;
  EXPECT_FALSE(r.passed());
}

TEST(Gradcheck, SelectorsPass) {
  for (const auto& [name, sel] : grad_selectors()) {
    const auto rep = gradcheck(sel, 2, 11);
    EXPECT_TRUE(rep.passed()) << name << " " << rep.max_rel_err();
  }
  EXPECT_LT(gradcheck("max_pool", 5, 3).max_rel_err(), 1e-8);
  EXPECT_LT(gradcheck("lip2d", 5, 3).max_rel_err(), 1e-6);
  EXPECT_THROW(gradcheck("softmax", 1, 0), UsageError);
  EXPECT_THROW(gradcheck("conv2d", 0, 0), UsageError);
  const auto csv = format_gradcheck_csv({gradcheck("avg_pool", 1, 0)});
  EXPECT_EQ(csv.rfind("selector,argument,checked,skipped,nonsmooth,max_rel_err,max_abs_err\navg_pool,", 0), 0u);
}

TEST(Export, ZeroInitMapsAreConstant) {
  const auto task = small_task(4, 4);
  auto g = build_from_config<float>(task, short_run(Downsampling::lip_conv, 1));
  g.init(1);
  const auto ids = lip_layer_ids(g);
  ASSERT_FALSE(ids.empty());
  const auto dir = scratch("export");
  const auto image = random_normal<float>({1, 1, 16, 16}, 2);
  const auto res = export_importance(g, image, ids.front(), dir);
  for (float v : res.importance.values()) EXPECT_FLOAT_EQ(v, std::exp(6.0f));
  const std::string pgm = slurp(dir / "importance_c000.pgm");
  ASSERT_EQ(pgm.rfind("P5\n", 0), 0u);
  const auto body = pgm.substr(pgm.size() - res.importance.shape().plane());
  EXPECT_EQ(body, std::string(body.size(), '\0'));
  EXPECT_TRUE(fs::exists(dir / "importance.json"));
  EXPECT_THROW(export_importance(g, image, "nope", dir), std::exception);
  fs::remove_all(dir);
}

TEST(Export, RawImportanceWithinBounds) {
  const auto task = small_task(4, 4);
  auto g = build_from_config<float>(task, short_run(Downsampling::lip_conv, 1));
  g.init(1);
  for (auto& p : g.parameters())
    if (p.path.find("logit") != std::string::npos)
      for (float& v : p.value) v = static_cast<float>(std::sin(13.0 * (&v - p.value.data()) + 1.0));
  const auto dir = scratch("export_raw");
  const auto res = export_importance(g, random_normal<float>({1, 1, 16, 16}, 3), lip_layer_ids(g).back(), dir);
  for (float v : res.importance.values()) {
    EXPECT_GE(v, 1.0f);
    EXPECT_LE(v, std::exp(12.0f));
  }
  for (float v : res.peak_weight.values()) {
    EXPECT_GT(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
  fs::remove_all(dir);
}

TEST(Bench, RowsPerOpAndShape) {
  BenchConfig cfg;
  cfg.repeats = 1;
  cfg.shapes = {{1, 2, 8, 8}};
  const auto rows = run_bench(cfg);
  ASSERT_EQ(rows.size(), bench_ops().size());
  for (const auto& r : rows) {
    EXPECT_EQ(r.repeats, 1u);
    EXPECT_GE(r.median_seconds, 0.0);
  }
  EXPECT_EQ(parse_shape("1x2x8x8"), (Shape4{1, 2, 8, 8}));
  EXPECT_THROW(parse_shape("1,2,8"), UsageError);
  cfg.ops = {"conv"};
  EXPECT_THROW(run_bench(cfg), UsageError);
}

TEST(Cli, ExitCodes) {
  const auto dir = scratch("cli");
  const std::string out = " --out " + dir.string();
  EXPECT_EQ(run_cli("--help"), 0);
  EXPECT_EQ(run_cli(""), 2);
  EXPECT_EQ(run_cli("frobnicate"), 2);
  EXPECT_EQ(run_cli("count --model resnet50" + out), 0);
  EXPECT_EQ(slurp(dir / "counts.csv").substr(0, 24), "model,params,macs\nresnet");
  EXPECT_EQ(run_cli("count --model resnet18"), 2);
  EXPECT_EQ(run_cli("gradcheck --op avg_pool --trials 1" + out), 0);
  EXPECT_EQ(run_cli("gradcheck --op softmax"), 2);
  EXPECT_EQ(run_cli("gradcheck --trials 0"), 2);
  EXPECT_EQ(run_cli("train --variant pyramid --data x"), 2);
  EXPECT_EQ(run_cli("train --logit bottleneck:zero --data x"), 2);
  EXPECT_EQ(run_cli("train --data " + (dir / "missing").string()), 2);
  EXPECT_EQ(run_cli("bench --repeats 1 --shape 1,1,4,4 --op avg_pool" + out), 0);
  EXPECT_EQ(run_cli("bench --shape 1,1,4"), 2);

  std::ofstream(dir / "cfg.json") << R"({"task": {"train_samples": 8, "test_samples": 4, "image_size": 16}})";
  std::ofstream(dir / "bad.json") << "{not json";
  EXPECT_EQ(run_cli("gen-data --config " + (dir / "cfg.json").string() + " --seed 3 --out " + (dir / "d").string()), 0);
  EXPECT_EQ(read_task(dir / "d").seed, 3u);
  EXPECT_EQ(read_split(dir / "d", Split::train).size(), 8u);
  EXPECT_EQ(run_cli("gen-data --config " + (dir / "bad.json").string()), 2);
  EXPECT_EQ(run_cli("gen-data --target-amplitude 2 --out " + (dir / "e").string()), 2);

  EXPECT_EQ(run_cli("train --data " + (dir / "d").string() + " --epochs 1 --variant avgpool --seed 1 --out " +
                    (dir / "r").string()),
            0);
  EXPECT_EQ(run_cli("eval --checkpoint " + (dir / "r" / "checkpoint.lipa").string() + " --data " +
                    (dir / "d").string() + out),
            0);
  EXPECT_EQ(slurp(dir / "eval.csv").substr(0, 28), "split,samples,loss,accuracy\n");
  EXPECT_EQ(run_cli("export-importance --checkpoint " + (dir / "r" / "checkpoint.lipa").string() + " --list"), 0);
  fs::remove_all(dir);
}
