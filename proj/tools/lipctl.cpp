// lipctl: dataset generation, training, evaluation, gradient checks,
// model accounting, importance export and kernel benchmarks.
//
// Exit codes: 0 success, 1 tolerance or numeric failure, 2 usage error
// (bad flags, config, paths or files).

#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "lip/harness/bench.hpp"
#include "lip/harness/export.hpp"
#include "lip/harness/gradcheck.hpp"
#include "lip/harness/train.hpp"
#include "lip/model/zoo.hpp"

namespace {

using nlohmann::json;

constexpr int kOk = 0;
constexpr int kFailure = 1;
constexpr int kUsage = 2;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> variant;
  std::optional<std::string> logit;
  std::optional<std::string> out;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "JSON config file")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "seed override");
  cmd->add_option("--variant", c.variant, "downsampling variant")
      ->check(CLI::IsMember({"strided", "avgpool", "lip"}));
  cmd->add_option("--logit", c.logit, "logit module: projection | bottleneck:<x>");
  cmd->add_option("--out", c.out, "output directory");
}

/// Section `key` of the config file, or an empty object.
json config_section(const Common& c, const std::string& key) {
  if (c.config.empty()) return json::object();
  std::ifstream in(c.config);
  if (!in) throw lip::IoError("cannot read config '" + c.config + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw lip::UsageError("malformed config '" + c.config + "': " + e.what());
  }
  if (!j.is_object()) throw lip::UsageError("config must be a JSON object");
  return j.contains(key) ? j.at(key) : json::object();
}

/// Writes `text` to <out>/<name> when --out is given, else to stdout.
void emit(const Common& c, const std::string& name, const std::string& text) {
  if (!c.out) {
    std::cout << text;
    return;
  }
  std::error_code ec;
  std::filesystem::create_directories(*c.out, ec);
  if (ec) throw lip::IoError("cannot create '" + *c.out + "': " + ec.message());
  lip::write_text(std::filesystem::path(*c.out) / name, text);
  std::cerr << "wrote " << (std::filesystem::path(*c.out) / name).string() << "\n";
}

lip::SyntheticTaskConfig task_config(const Common& c) {
  auto task = config_section(c, "task").get<lip::SyntheticTaskConfig>();
  if (c.seed) task.seed = *c.seed;
  return task;
}

lip::TrainConfig train_config(const Common& c, const std::string& data_dir) {
  auto cfg = config_section(c, "train").get<lip::TrainConfig>();
  if (c.seed) cfg.seed = *c.seed;
  if (c.variant) cfg.variant = lip::parse_downsampling(*c.variant);
  if (c.logit) cfg.logit = lip::LogitSpec::parse(*c.logit);
  if (!data_dir.empty()) cfg.data_dir = data_dir;
  if (cfg.data_dir.empty()) throw lip::UsageError("train needs a dataset (--data or train.data_dir)");
  cfg.validate();
  return cfg;
}

lip::Split parse_split(const std::string& s) {
  if (s == "train") return lip::Split::train;
  if (s == "test") return lip::Split::test;
  throw lip::UsageError("split must be train or test");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LIP pooling toolkit"};
  app.require_subcommand(1);

  Common gen_c, train_c, eval_c, grad_c, count_c, export_c, bench_c;

  auto* gen = app.add_subcommand("gen-data", "write a synthetic tiny-detail dataset");
  add_common(gen, gen_c);
  std::optional<double> amp_target, amp_clutter;
  std::optional<std::size_t> n_train, n_test;
  gen->add_option("--target-amplitude", amp_target, "pattern amplitude a");
  gen->add_option("--clutter-amplitude", amp_clutter, "clutter amplitude b");
  gen->add_option("--train-samples", n_train);
  gen->add_option("--test-samples", n_test);

  auto* train = app.add_subcommand("train", "train a tiny CNN");
  add_common(train, train_c);
  std::string train_data;
  std::optional<std::size_t> epochs;
  std::optional<double> lr;
  train->add_option("--data", train_data, "dataset directory");
  train->add_option("--epochs", epochs);
  train->add_option("--lr", lr);

  auto* eval = app.add_subcommand("eval", "top-1 accuracy of a checkpoint on a split");
  add_common(eval, eval_c);
  std::string eval_ckpt, eval_data, eval_split = "test";
  eval->add_option("--checkpoint", eval_ckpt)->required();
  eval->add_option("--data", eval_data, "dataset directory")->required();
  eval->add_option("--split", eval_split)->check(CLI::IsMember({"train", "test"}));

  auto* grad = app.add_subcommand("gradcheck", "finite-difference checks of the backward passes");
  add_common(grad, grad_c);
  std::vector<std::string> grad_ops;
  std::optional<long long> trials;
  grad->add_option("--op", grad_ops, "selector (repeatable); default all");
  grad->add_option("--trials", trials, "seeded trials per selector (default 20)");

  auto* count = app.add_subcommand("count", "parameter and MAC counts of full-size graphs");
  add_common(count, count_c);
  std::vector<std::string> count_models;
  bool list_models = false;
  count->add_option("--model", count_models, "model name (repeatable); default all");
  count->add_flag("--list", list_models, "print model names");

  auto* exp = app.add_subcommand("export-importance", "dump the importance maps of one LIP layer");
  add_common(exp, export_c);
  std::string exp_ckpt, exp_data, exp_input, exp_layer, exp_split = "test";
  std::size_t exp_index = 0;
  bool exp_list = false;
  exp->add_option("--checkpoint", exp_ckpt)->required();
  exp->add_option("--layer", exp_layer, "LIP layer id, e.g. block1.residual.lip");
  exp->add_option("--input", exp_input, "tensor file holding one (1,c,h,w) image");
  exp->add_option("--data", exp_data, "dataset directory (with --index)");
  exp->add_option("--split", exp_split)->check(CLI::IsMember({"train", "test"}));
  exp->add_option("--index", exp_index, "image index within the split");
  exp->add_flag("--list", exp_list, "print the LIP layer ids");

  auto* bench = app.add_subcommand("bench", "pooling kernel throughput");
  add_common(bench, bench_c);
  std::vector<std::string> bench_ops, bench_shapes;
  std::optional<long long> repeats;
  bench->add_option("--op", bench_ops, "op (repeatable); default all");
  bench->add_option("--shape", bench_shapes, "n,c,h,w (repeatable)");
  bench->add_option("--repeats", repeats, "timed repeats (default 5)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (gen->parsed()) {
      auto task = task_config(gen_c);
      if (amp_target) task.target_amplitude = *amp_target;
      if (amp_clutter) task.clutter_amplitude = *amp_clutter;
      if (n_train) task.train_samples = *n_train;
      if (n_test) task.test_samples = *n_test;
      task.validate();
      const std::string dir = gen_c.out.value_or("data");
      lip::write_dataset(task, dir);
      std::cerr << "wrote dataset to " << dir << "\n";
      return kOk;
    }

    if (train->parsed()) {
      auto cfg = train_config(train_c, train_data);
      if (epochs) cfg.epochs = *epochs;
      if (lr) cfg.lr = *lr;
      cfg.validate();
      const std::string dir = train_c.out.value_or("run");
      lip::run_training(cfg, dir, [](const lip::MetricsRow& r) {
        std::cerr << "epoch " << r.epoch << " " << r.split << " loss " << r.loss << " acc " << r.accuracy
                  << "\n";
      });
      std::cerr << "wrote " << dir << "/metrics.csv and checkpoint.lipa\n";
      return kOk;
    }

    if (eval->parsed()) {
      auto g = lip::load_trained(eval_ckpt);
      const lip::Dataset ds = lip::read_split(eval_data, parse_split(eval_split));
      const lip::EvalResult r = lip::evaluate(g, ds);
      char line[128];
      std::snprintf(line, sizeof line, "%s,%zu,%.6f,%.6f\n", eval_split.c_str(), ds.size(), r.loss, r.accuracy);
      emit(eval_c, "eval.csv", std::string("split,samples,loss,accuracy\n") + line);
      return kOk;
    }

    if (grad->parsed()) {
      const json sec = config_section(grad_c, "gradcheck");
      long long n = trials.value_or(sec.value("trials", 20LL));
      if (n <= 0) throw lip::UsageError("--trials must be >= 1");
      const std::uint64_t seed = grad_c.seed.value_or(sec.value("seed", std::uint64_t{0}));
      if (grad_ops.empty()) grad_ops = sec.value("ops", std::vector<std::string>{});
      if (grad_ops.empty())
        for (const auto& [name, s] : lip::grad_selectors()) grad_ops.push_back(name);
      std::vector<lip::GradcheckReport> reports;
      for (const auto& op : grad_ops) {
        reports.push_back(lip::gradcheck(op, static_cast<std::size_t>(n), seed));
        std::cerr << op << ": max rel err " << reports.back().max_rel_err()
                  << (reports.back().passed() ? " ok" : " FAIL") << "\n";
      }
      emit(grad_c, "gradcheck.csv", lip::format_gradcheck_csv(reports));
      for (const auto& r : reports)
        if (!r.passed()) return kFailure;
      return kOk;
    }

    if (count->parsed()) {
      if (list_models) {
        for (const auto& e : lip::model_zoo()) std::cout << e.name << "\n";
        return kOk;
      }
      if (count_models.empty())
        for (const auto& e : lip::model_zoo()) count_models.push_back(e.name);
      std::vector<lip::CountRow> rows;
      for (const auto& m : count_models) rows.push_back(lip::count_model(m));
      emit(count_c, "counts.csv", lip::format_count_csv(rows));
      return kOk;
    }

    if (exp->parsed()) {
      auto g = lip::load_trained(exp_ckpt);
      if (exp_list) {
        for (const auto& id : lip::lip_layer_ids(g)) std::cout << id << "\n";
        return kOk;
      }
      if (exp_layer.empty()) throw lip::UsageError("--layer is required (see --list)");
      lip::Tensor4<float> image;
      if (!exp_input.empty()) {
        image = lip::read_tensor<float>(exp_input);
      } else if (!exp_data.empty()) {
        const lip::Dataset ds = lip::read_split(exp_data, parse_split(exp_split));
        if (exp_index >= ds.size()) throw lip::UsageError("--index out of range");
        image = lip::gather_batch(ds, {exp_index}, 0, 1);
      } else {
        throw lip::UsageError("give --input or --data");
      }
      const std::string dir = export_c.out.value_or("importance");
      lip::export_importance(g, image, exp_layer, dir);
      std::cerr << "wrote maps of " << exp_layer << " to " << dir << "\n";
      return kOk;
    }

    if (bench->parsed()) {
      const json sec = config_section(bench_c, "bench");
      lip::BenchConfig cfg;
      const long long r = repeats.value_or(sec.value("repeats", 5LL));
      if (r <= 0) throw lip::UsageError("--repeats must be >= 1");
      cfg.repeats = static_cast<std::size_t>(r);
      cfg.seed = bench_c.seed.value_or(sec.value("seed", std::uint64_t{0}));
      if (bench_ops.empty()) bench_ops = sec.value("ops", std::vector<std::string>{});
      if (!bench_ops.empty()) cfg.ops = bench_ops;
      if (bench_shapes.empty()) bench_shapes = sec.value("shapes", std::vector<std::string>{});
      if (!bench_shapes.empty()) {
        cfg.shapes.clear();
        for (const auto& s : bench_shapes) cfg.shapes.push_back(lip::parse_shape(s));
      }
      emit(bench_c, "bench.csv", lip::format_bench_csv(lip::run_bench(cfg)));
      return kOk;
    }
  } catch (const lip::NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  } catch (const lip::DegenerateWindowError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  } catch (const json::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    // usage, build, shape, I/O and manifest errors: the inputs were wrong
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}
