#pragma once

// Training and evaluation of the tiny CNN on the synthetic task.
// Softmax cross-entropy, SGD with momentum, step learning-rate decay.
// Single-threaded and fully seeded: same config, same bytes out.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lip/harness/dataset.hpp"
#include "lip/model/tiny_cnn.hpp"

namespace lip {

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::vector<double> decay_at{0.6, 0.85};  // fractions of the run
  double decay_factor = 0.1;
  std::uint64_t seed = 0;
  Downsampling variant = Downsampling::lip_conv;
  LogitSpec logit = LogitSpec::projection();
  TinyCnnConfig model{};
  std::string data_dir;
  std::size_t eval_batch = 250;

  void validate() const {
    if (epochs == 0) throw BuildError("train: epochs must be >= 1");
    if (batch_size == 0 || eval_batch == 0) throw BuildError("train: batch sizes must be >= 1");
    if (!(lr > 0.0)) throw BuildError("train: lr must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw BuildError("train: momentum must lie in [0, 1)");
    if (!(weight_decay >= 0.0)) throw BuildError("train: weight decay must be >= 0");
    if (!(decay_factor > 0.0)) throw BuildError("train: decay factor must be positive");
    for (double f : decay_at)
      if (!(f > 0.0 && f < 1.0)) throw BuildError("train: decay points must lie in (0, 1)");
  }

  /// Learning rate for a 0-based epoch index.
  double lr_at(std::size_t epoch) const {
    double r = lr;
    for (double f : decay_at)
      if (epoch >= static_cast<std::size_t>(std::floor(f * static_cast<double>(epochs)))) r *= decay_factor;
    return r;
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"lr", c.lr},
       {"momentum", c.momentum},
       {"weight_decay", c.weight_decay},
       {"decay_at", c.decay_at},
       {"decay_factor", c.decay_factor},
       {"seed", c.seed},
       {"variant", to_string(c.variant)},
       {"logit", c.logit.str()},
       {"model", {{"stem", c.model.stem}, {"stages", c.model.stages}, {"widths", c.model.widths},
                  {"norm", to_string(c.model.norm)}}},
       {"data_dir", c.data_dir},
       {"eval_batch", c.eval_batch}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.momentum = j.value("momentum", c.momentum);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.decay_at = j.value("decay_at", c.decay_at);
  c.decay_factor = j.value("decay_factor", c.decay_factor);
  c.seed = j.value("seed", c.seed);
  if (j.contains("variant")) c.variant = parse_downsampling(j.at("variant").get<std::string>());
  if (j.contains("logit")) c.logit = LogitSpec::parse(j.at("logit").get<std::string>());
  if (j.contains("model")) {
    const auto& m = j.at("model");
    c.model.stem = m.value("stem", c.model.stem);
    c.model.stages = m.value("stages", c.model.stages);
    c.model.widths = m.value("widths", c.model.widths);
    if (m.contains("norm")) c.model.norm = parse_block_norm(m.at("norm").get<std::string>());
  }
  c.data_dir = j.value("data_dir", c.data_dir);
  c.eval_batch = j.value("eval_batch", c.eval_batch);
}

struct MetricsRow {
  std::size_t epoch = 0;
  std::string split;
  double loss = 0.0;
  double accuracy = 0.0;
  double wall_time = 0.0;  // seconds since the start of the run
};

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
};

/// Mean cross-entropy and correct count of a (n, classes, 1, 1) score
/// tensor; fills `grad` with d(mean loss)/d(scores) when non-null.
template <typename T>
EvalResult softmax_cross_entropy(const Tensor4<T>& scores, const std::vector<std::size_t>& labels,
                                 std::size_t begin, Tensor4<T>* grad) {
  const Shape4 s = scores.shape();
  if (s.h != 1 || s.w != 1) throw ShapeError("cross-entropy expects (n, classes, 1, 1) scores");
  if (grad) *grad = Tensor4<T>(s);
  double loss = 0.0;
  std::size_t correct = 0;
  std::vector<double> p(s.c);
  for (std::size_t n = 0; n < s.n; ++n) {
    const std::size_t y = labels.at(begin + n);
    if (y >= s.c) throw IndexError("label out of range");
    double m = -INFINITY;
    std::size_t arg = 0;
    for (std::size_t c = 0; c < s.c; ++c) {
      const double v = scores(n, c, 0, 0);
      if (v > m) {
        m = v;
        arg = c;
      }
    }
    double z = 0.0;
    for (std::size_t c = 0; c < s.c; ++c) z += p[c] = std::exp(static_cast<double>(scores(n, c, 0, 0)) - m);
    loss += std::log(z) - (static_cast<double>(scores(n, y, 0, 0)) - m);
    correct += arg == y;
    if (grad)
      for (std::size_t c = 0; c < s.c; ++c)
        (*grad)(n, c, 0, 0) = static_cast<T>((p[c] / z - (c == y ? 1.0 : 0.0)) / static_cast<double>(s.n));
  }
  return {loss, static_cast<double>(correct)};
}

/// Single pass over a split, in order, no augmentation.
template <typename T>
EvalResult evaluate(ModelGraph<T>& g, const Dataset& ds, std::size_t batch = 250) {
  std::vector<std::size_t> order(ds.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  double loss = 0.0, correct = 0.0;
  for (std::size_t b = 0; b < ds.size(); b += batch) {
    const std::size_t count = std::min(batch, ds.size() - b);
    const Tensor4<T> x = gather_batch(ds, order, b, count).template cast<T>();
    const EvalResult r = softmax_cross_entropy(g.forward(x), ds.labels, b, static_cast<Tensor4<T>*>(nullptr));
    loss += r.loss;
    correct += r.accuracy;
  }
  const double n = static_cast<double>(ds.size());
  return {loss / n, correct / n};
}

template <typename T>
ModelGraph<T> build_from_config(const SyntheticTaskConfig& task, const TrainConfig& cfg) {
  return build_tiny_cnn<T>(task, cfg.variant, cfg.logit, cfg.model);
}

inline std::uint64_t init_seed(std::uint64_t seed) { return derive_seed(seed, path_hash("init")); }

/// Fixed batch order for one epoch.
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(derive_seed(derive_seed(seed, path_hash("shuffle")), epoch));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.uniform_index(i)]);
  return order;
}

inline std::string format_metrics_csv(const std::vector<MetricsRow>& rows) {
  std::string out = "epoch,split,loss,accuracy\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%s,%.6f,%.6f\n", r.epoch, r.split.c_str(), r.loss, r.accuracy);
    out += buf;
  }
  return out;
}

inline std::string format_timing_csv(const std::vector<MetricsRow>& rows) {
  std::string out = "epoch,split,wall_time\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%s,%.3f\n", r.epoch, r.split.c_str(), r.wall_time);
    out += buf;
  }
  return out;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

struct TrainResult {
  std::vector<MetricsRow> rows;
  EvalResult final_test;
};

using ProgressFn = std::function<void(const MetricsRow&)>;

/// Trains on `train`, evaluating on `test` after every epoch (and once
/// before training, as epoch 0). Writes nothing.
inline TrainResult train_model(ModelGraph<float>& g, const TrainConfig& cfg, const Dataset& train,
                               const Dataset& test, const ProgressFn& progress = nullptr) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };
  TrainResult res;
  auto push = [&](std::size_t epoch, const char* split, EvalResult r) {
    if (!std::isfinite(r.loss)) throw NumericError("training diverged: non-finite loss at epoch " + std::to_string(epoch));
    res.rows.push_back({epoch, split, r.loss, r.accuracy, elapsed()});
    if (progress) progress(res.rows.back());
  };
  push(0, "train", evaluate(g, train, cfg.eval_batch));
  push(0, "test", evaluate(g, test, cfg.eval_batch));

  auto params = g.parameters();
  SgdState<float> opt;
  opt.momentum = static_cast<float>(cfg.momentum);
  opt.weight_decay = static_cast<float>(cfg.weight_decay);
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    opt.lr = static_cast<float>(cfg.lr_at(e));
    const auto order = epoch_order(train.size(), cfg.seed, e);
    double loss = 0.0, correct = 0.0;
    for (std::size_t b = 0; b < train.size(); b += cfg.batch_size) {
      const std::size_t count = std::min(cfg.batch_size, train.size() - b);
      const Tensor4<float> x = gather_batch(train, order, b, count);
      std::vector<std::size_t> labels(count);
      for (std::size_t i = 0; i < count; ++i) labels[i] = train.labels[order[b + i]];
      Tensor4<float> grad;
      const EvalResult r = softmax_cross_entropy(g.forward(x), labels, 0, &grad);
      loss += r.loss;
      correct += r.accuracy;
      g.zero_grad();
      g.backward(grad);
      sgd_step<float>(params, opt);
    }
    const double n = static_cast<double>(train.size());
    push(e + 1, "train", {loss / n, correct / n});
    res.final_test = evaluate(g, test, cfg.eval_batch);
    push(e + 1, "test", res.final_test);
  }
  return res;
}

/// Full run from a dataset directory: writes metrics.csv, timing.csv,
/// config.json and checkpoint.lipa into `out_dir`.
inline TrainResult run_training(const TrainConfig& cfg, const std::filesystem::path& out_dir,
                                const ProgressFn& progress = nullptr) {
  cfg.validate();
  const SyntheticTaskConfig task = read_task(cfg.data_dir);
  ModelGraph<float> g = build_from_config<float>(task, cfg);
  g.init(init_seed(cfg.seed));
  const Dataset train = read_split(cfg.data_dir, Split::train);
  const Dataset test = read_split(cfg.data_dir, Split::test);
  if (train.images.shape().c != task.channels || train.images.shape().h != task.image_size)
    throw ShapeError("dataset images do not match the task config");

  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create '" + out_dir.string() + "': " + ec.message());

  TrainResult res = train_model(g, cfg, train, test, progress);
  write_text(out_dir / "metrics.csv", format_metrics_csv(res.rows));
  write_text(out_dir / "timing.csv", format_timing_csv(res.rows));
  nlohmann::json extra = {{"task", task}, {"train", cfg}};
  write_text(out_dir / "config.json", extra.dump(1) + "\n");
  save_checkpoint(g, out_dir / "checkpoint.lipa", extra);
  return res;
}

/// Rebuilds the model recorded in a checkpoint and loads its weights.
inline ModelGraph<float> load_trained(const std::filesystem::path& checkpoint) {
  const TensorArchive ar = TensorArchive::load(checkpoint);
  const auto& meta = ar.metadata();
  if (!meta.contains("extra") || !meta.at("extra").contains("task") || !meta.at("extra").contains("train"))
    throw ManifestError("checkpoint '" + checkpoint.string() + "' lacks its model description");
  const auto task = meta.at("extra").at("task").get<SyntheticTaskConfig>();
  const auto cfg = meta.at("extra").at("train").get<TrainConfig>();
  ModelGraph<float> g = build_from_config<float>(task, cfg);
  load_checkpoint(g, checkpoint);
  return g;
}

}  // namespace lip
