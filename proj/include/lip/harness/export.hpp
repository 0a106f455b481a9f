#pragma once

// Importance-map dumps of one LIP layer for one input image. Two map kinds:
//   importance   F = exp(logit) at input resolution, values in [1, e^12]
//   peak_weight  the largest normalized weight of each pooling window
// Each kind is written per channel as 8-bit binary PGM, min-max scaled over
// all channels of the kind, plus one raw tensor archive and a JSON sidecar
// holding the scaling.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lip/harness/train.hpp"

namespace lip {

/// "P5" binary PGM with maxval 255.
inline void write_pgm(const std::filesystem::path& path, std::size_t width, std::size_t height,
                      const std::vector<unsigned char>& pixels) {
  if (pixels.size() != width * height) throw ShapeError("pgm pixel count does not match size");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << "P5\n" << width << ' ' << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

struct MinMax {
  double min = 0.0;
  double max = 0.0;
};

/// level = round(255 * (v - min) / (max - min)); a constant map is all 0.
inline unsigned char gray_level(double v, const MinMax& s) {
  if (!(s.max > s.min)) return 0;
  const double t = (v - s.min) / (s.max - s.min);
  return static_cast<unsigned char>(std::lround(255.0 * std::clamp(t, 0.0, 1.0)));
}

/// Largest normalized weight per window, from the logits of one LIP.
template <typename T>
Tensor4<T> peak_window_weight(const Tensor4<T>& logit, const PoolGeometry& geom) {
  const Shape4& s = logit.shape();
  const Shape4 os = geom.output_shape(s);
  Tensor4<T> out(os);
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      const T* l = logit.data() + logit.offset(n, c, 0, 0);
      for (std::size_t oy = 0; oy < os.h; ++oy)
        for (std::size_t ox = 0; ox < os.w; ++ox) {
          const WindowBounds b = window_bounds(geom, s.h, s.w, oy, ox);
          T m = -std::numeric_limits<T>::infinity();
          for (std::size_t y = b.ys; y < b.ye; ++y)
            for (std::size_t x = b.xs; x < b.xe; ++x) m = std::max(m, l[y * s.w + x]);
          T den = 0;
          for (std::size_t y = b.ys; y < b.ye; ++y)
            for (std::size_t x = b.xs; x < b.xe; ++x) den += std::exp(l[y * s.w + x] - m);
          out(n, c, oy, ox) = T{1} / den;  // the max logit has weight exp(0) / den
        }
    }
  return out;
}

/// Paths of every LIP layer in a graph.
template <typename T>
std::vector<std::string> lip_layer_ids(ModelGraph<T>& g) {
  std::vector<std::string> ids;
  g.root().visit_lips("", [&ids](const std::string& path, LipLayer<T>&) { ids.push_back(path); });
  return ids;
}

template <typename T>
LipLayer<T>& find_lip_layer(ModelGraph<T>& g, const std::string& id) {
  LipLayer<T>* found = nullptr;
  g.root().visit_lips("", [&](const std::string& path, LipLayer<T>& lip) {
    if (path == id) found = &lip;
  });
  if (found == nullptr) {
    std::string known;
    for (const auto& k : lip_layer_ids(g)) known += (known.empty() ? "" : ", ") + k;
    throw UsageError("'" + id + "' is not a LIP layer of model '" + g.name() + "'" +
                     (known.empty() ? " (the model has none)" : " (LIP layers: " + known + ")"));
  }
  return *found;
}

struct ExportResult {
  Tensor4<float> importance;   // (1, c, h, w)
  Tensor4<float> peak_weight;  // (1, c, oh, ow)
  nlohmann::json sidecar;
};

namespace detail {

inline MinMax tensor_range(const Tensor4<float>& t) {
  MinMax r{t.data()[0], t.data()[0]};
  for (float v : t.values()) {
    r.min = std::min(r.min, static_cast<double>(v));
    r.max = std::max(r.max, static_cast<double>(v));
  }
  return r;
}

inline nlohmann::json write_channel_pgms(const std::filesystem::path& dir, const std::string& stem,
                                         const Tensor4<float>& t) {
  const MinMax range = tensor_range(t);
  const Shape4& s = t.shape();
  nlohmann::json files = nlohmann::json::array();
  for (std::size_t c = 0; c < s.c; ++c) {
    std::vector<unsigned char> px(s.plane());
    const float* p = t.data() + t.offset(0, c, 0, 0);
    for (std::size_t i = 0; i < px.size(); ++i) px[i] = gray_level(p[i], range);
    char name[64];
    std::snprintf(name, sizeof name, "%s_c%03zu.pgm", stem.c_str(), c);
    write_pgm(dir / name, s.w, s.h, px);
    files.push_back(name);
  }
  return {{"min", range.min},
          {"max", range.max},
          {"levels", 255},
          {"mapping", "round(255 * (v - min) / (max - min)), 0 when max == min"},
          {"width", s.w},
          {"height", s.h},
          {"files", files}};
}

}  // namespace detail

/// Runs `image` (1, c, h, w) through the model and dumps the maps of LIP
/// layer `id` into `dir`.
inline ExportResult export_importance(ModelGraph<float>& g, const Tensor4<float>& image,
                                      const std::string& id, const std::filesystem::path& dir) {
  if (image.shape().n != 1) throw UsageError("export expects a single image, got " + image.shape().str());
  LipLayer<float>& lip = find_lip_layer(g, id);
  g.forward(image);
  const Tensor4<float>& logit = lip.last_logit();

  ExportResult res;
  res.importance = map_elementwise(logit, 0.0f, [](float l, float) { return std::exp(l); });
  res.peak_weight = peak_window_weight(logit, lip.geometry().geom);

  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
  TensorArchive ar;
  ar.put("importance", res.importance);
  ar.put("logit", logit);
  ar.put("peak_weight", res.peak_weight);
  ar.metadata() = {{"layer", id}, {"model", g.name()}};
  ar.save(dir / "importance.lipa");

  res.sidecar = {{"layer", id},
                 {"model", g.name()},
                 {"raw", "importance.lipa"},
                 {"maps",
                  {{"importance", detail::write_channel_pgms(dir, "importance", res.importance)},
                   {"peak_weight", detail::write_channel_pgms(dir, "peak_weight", res.peak_weight)}}}};
  write_text(dir / "importance.json", res.sidecar.dump(1) + "\n");
  return res;
}

}  // namespace lip
