#pragma once

// Synthetic tiny-detail images: a smooth clutter field of amplitude b plus
// one zero-sum 3x3 line pattern of amplitude a placed uniformly at random.
// The pattern's orientation is the label. Since a < b, the pattern is
// usually not the largest value in its neighbourhood.

#include <array>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lip/harness/task.hpp"
#include "lip/io.hpp"
#include "lip/layers.hpp"
#include "lip/rng.hpp"

namespace lip {

/// Patterns: horizontal, vertical, diagonal, anti-diagonal. +1 on the line,
/// -0.5 elsewhere, so each sums to zero.
inline std::array<double, 9> class_pattern(std::size_t label) {
  std::array<double, 9> p{};
  for (std::size_t y = 0; y < 3; ++y)
    for (std::size_t x = 0; x < 3; ++x) {
      bool on = false;
      switch (label) {
        case 0: on = y == 1; break;
        case 1: on = x == 1; break;
        case 2: on = x == y; break;
        case 3: on = x + y == 2; break;
        default: throw IndexError("pattern id must be < 4");
      }
      p[y * 3 + x] = on ? 1.0 : -0.5;
    }
  return p;
}

/// Number of stride-aligned 2x2 cells lying fully inside a 3x3 patch whose
/// top-left corner is at (oy, ox).
inline std::size_t aligned_cells(std::size_t oy, std::size_t ox, std::size_t stride = 2) {
  auto span = [stride](std::size_t o) {
    std::size_t n = 0;
    for (std::size_t s = (o + stride - 1) / stride * stride; s + 2 <= o + 3; s += stride) ++n;
    return n;
  };
  return span(oy) * span(ox);
}

struct Dataset {
  Tensor4<float> images;                  // (n, 1, size, size)
  std::vector<std::size_t> labels;
  std::vector<std::array<std::size_t, 2>> positions;  // pattern top-left (y, x)

  std::size_t size() const { return labels.size(); }
};

enum class Split { train, test };

inline const char* split_name(Split s) { return s == Split::train ? "train" : "test"; }

inline std::uint64_t split_seed(std::uint64_t seed, Split s) {
  return derive_seed(seed, path_hash(std::string("split/") + split_name(s)));
}

/// Bilinear upsampling of a g x g control grid to a size x size field.
inline std::vector<double> smooth_field(Rng& rng, std::size_t size, std::size_t grid, double amplitude) {
  std::vector<double> ctrl(grid * grid);
  for (double& v : ctrl) v = rng.uniform(-amplitude, amplitude);
  std::vector<double> out(size * size);
  const double scale = static_cast<double>(grid - 1) / static_cast<double>(size - 1 ? size - 1 : 1);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double gy = static_cast<double>(y) * scale, gx = static_cast<double>(x) * scale;
      const std::size_t y0 = std::min(static_cast<std::size_t>(gy), grid - 2);
      const std::size_t x0 = std::min(static_cast<std::size_t>(gx), grid - 2);
      const double ty = gy - static_cast<double>(y0), tx = gx - static_cast<double>(x0);
      const double a = ctrl[y0 * grid + x0], b = ctrl[y0 * grid + x0 + 1];
      const double c = ctrl[(y0 + 1) * grid + x0], d = ctrl[(y0 + 1) * grid + x0 + 1];
      out[y * size + x] = (1 - ty) * ((1 - tx) * a + tx * b) + ty * ((1 - tx) * c + tx * d);
    }
  return out;
}

inline Dataset generate_split(const SyntheticTaskConfig& cfg, Split split) {
  cfg.validate();
  const std::size_t n = split == Split::train ? cfg.train_samples : cfg.test_samples;
  const std::size_t s = cfg.image_size;
  Dataset ds;
  ds.images = Tensor4<float>(Shape4{n, 1, s, s});
  Rng rng(split_seed(cfg.seed, split));
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t label = rng.uniform_index(cfg.classes);
    const std::size_t oy = rng.uniform_index(s - cfg.patch + 1);
    const std::size_t ox = rng.uniform_index(s - cfg.patch + 1);
    std::vector<double> img = smooth_field(rng, s, cfg.clutter_grid, cfg.clutter_amplitude);
    const auto pat = class_pattern(label);
    for (std::size_t y = 0; y < 3; ++y)
      for (std::size_t x = 0; x < 3; ++x) img[(oy + y) * s + ox + x] += cfg.target_amplitude * pat[y * 3 + x];
    float* dst = ds.images.data() + ds.images.offset(i, 0, 0, 0);
    for (std::size_t k = 0; k < s * s; ++k) dst[k] = static_cast<float>(img[k]);
    ds.labels.push_back(label);
    ds.positions.push_back({oy, ox});
  }
  return ds;
}

inline std::string split_file(Split s) { return std::string(split_name(s)) + ".lipa"; }

/// Writes train.lipa, test.lipa and index.json into `dir`.
inline void write_dataset(const SyntheticTaskConfig& cfg, const std::filesystem::path& dir) {
  cfg.validate();
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
  nlohmann::json index = {{"format", "lip-synthetic"}, {"task", cfg}, {"splits", nlohmann::json::object()}};
  for (Split sp : {Split::train, Split::test}) {
    const Dataset ds = generate_split(cfg, sp);
    TensorArchive ar;
    ar.put("images", ds.images);
    ar.metadata() = {{"split", split_name(sp)}};
    ar.save(dir / split_file(sp));
    nlohmann::json pos = nlohmann::json::array();
    for (const auto& p : ds.positions) pos.push_back({p[0], p[1]});
    index["splits"][split_name(sp)] = {
        {"file", split_file(sp)}, {"count", ds.size()}, {"labels", ds.labels}, {"positions", pos}};
  }
  std::ofstream out(dir / "index.json", std::ios::binary);
  if (!out) throw IoError("cannot write '" + (dir / "index.json").string() + "'");
  out << index.dump(1) << '\n';
  if (!out) throw IoError("write failed for '" + (dir / "index.json").string() + "'");
}

inline nlohmann::json read_index(const std::filesystem::path& dir) {
  std::ifstream in(dir / "index.json", std::ios::binary);
  if (!in) throw IoError("cannot read '" + (dir / "index.json").string() + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ManifestError("malformed dataset index: " + std::string(e.what()));
  }
  if (j.value("format", std::string{}) != "lip-synthetic")
    throw ManifestError("'" + dir.string() + "' does not hold a synthetic dataset");
  return j;
}

inline Dataset read_split(const std::filesystem::path& dir, Split split) {
  const nlohmann::json index = read_index(dir);
  const auto& entry = index.at("splits").at(split_name(split));
  const TensorArchive ar = TensorArchive::load(dir / entry.at("file").get<std::string>());
  Dataset ds;
  ds.images = ar.get<float>("images");
  ds.labels = entry.at("labels").get<std::vector<std::size_t>>();
  for (const auto& p : entry.at("positions")) ds.positions.push_back({p.at(0), p.at(1)});
  if (ds.labels.size() != ds.images.shape().n)
    throw ManifestError("label count does not match image count in split '" +
                        std::string(split_name(split)) + "'");
  return ds;
}

inline SyntheticTaskConfig read_task(const std::filesystem::path& dir) {
  return read_index(dir).at("task").get<SyntheticTaskConfig>();
}

/// Rows [begin, begin + count) of a dataset, in the order given by `order`.
inline Tensor4<float> gather_batch(const Dataset& ds, const std::vector<std::size_t>& order,
                                   std::size_t begin, std::size_t count) {
  const Shape4 s = ds.images.shape();
  auto batch = Tensor4<float>::uninitialized(Shape4{count, s.c, s.h, s.w});
  const std::size_t per = s.c * s.h * s.w;
  for (std::size_t i = 0; i < count; ++i) {
    const float* src = ds.images.data() + order[begin + i] * per;
    std::copy(src, src + per, batch.data() + i * per);
  }
  return batch;
}

}  // namespace lip
