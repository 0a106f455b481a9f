#pragma once

// A built network: a named root Sequential plus its declared input shape.
// Counting, manifests and checkpoints all go through this type.

#include <filesystem>
#include <memory>
#include <string>

#include <nlohmann/json.hpp>

#include "lip/io.hpp"
#include "lip/layers.hpp"

namespace lip {

template <typename T>
class ModelGraph {
 public:
  ModelGraph(std::string name, Shape4 input_shape, std::unique_ptr<Sequential<T>> root,
             nlohmann::json metadata = nlohmann::json::object())
      : name_(std::move(name)),
        input_shape_(input_shape),
        root_(std::move(root)),
        metadata_(std::move(metadata)) {
    if (!root_) throw BuildError("model graph needs a root");
    validate_shape(input_shape_);
    output_shape_ = root_->output_shape(input_shape_);  // shape-checks every layer
  }

  const std::string& name() const { return name_; }
  const Shape4& input_shape() const { return input_shape_; }
  /// Output shape at the declared input shape.
  const Shape4& output_shape() const { return output_shape_; }
  Sequential<T>& root() { return *root_; }
  const Sequential<T>& root() const { return *root_; }
  const nlohmann::json& metadata() const { return metadata_; }
  nlohmann::json& metadata() { return metadata_; }

  /// Accepts any batch size; the remaining dims must match.
  Tensor4<T> forward(const Tensor4<T>& x) {
    const Shape4& s = x.shape();
    if (s.c != input_shape_.c || s.h != input_shape_.h || s.w != input_shape_.w)
      throw ShapeError("model '" + name_ + "' expects inputs like " + input_shape_.str() + ", got " +
                       s.str());
    return root_->forward(x);
  }
  Tensor4<T> backward(const Tensor4<T>& grad_out) { return root_->backward(grad_out); }

  std::vector<ParamRef<T>> parameters() { return root_->parameters(); }
  void zero_grad() { root_->zero_grad(); }
  void init(std::uint64_t seed) { root_->init_params("", seed); }

  nlohmann::json manifest() {
    nlohmann::json layers = nlohmann::json::array();
    root_->describe("", input_shape_, layers);
    nlohmann::json params = nlohmann::json::array();
    std::uint64_t total = 0;
    for (const auto& p : root_->parameters()) {
      params.push_back({{"path", p.path}, {"dims", shape_json(p.shape)}});
      total += p.value.size();
    }
    return {{"name", name_},
            {"input", shape_json(input_shape_)},
            {"output", shape_json(output_shape_)},
            {"layers", layers},
            {"parameters", params},
            {"param_count", total},
            {"metadata", metadata_}};
  }

 private:
  std::string name_;
  Shape4 input_shape_;
  Shape4 output_shape_{};
  std::unique_ptr<Sequential<T>> root_;
  nlohmann::json metadata_;
};

/// Learnable scalars of a layer tree.
template <typename T>
std::uint64_t count_params(Layer<T>& layer) {
  std::uint64_t total = 0;
  for (const auto& p : layer.parameters()) total += p.value.size();
  return total;
}

template <typename T>
std::uint64_t count_params(ModelGraph<T>& g) {
  return count_params<T>(g.root());
}

/// Multiply-accumulates of one forward pass at `input_shape`.
template <typename T>
std::uint64_t count_flops(const ModelGraph<T>& g, const Shape4& input_shape) {
  validate_shape(input_shape);
  return g.root().macs(input_shape);
}

template <typename T>
std::uint64_t count_flops(const ModelGraph<T>& g) {
  return count_flops(g, g.input_shape());
}

/// Parameters by path, with the manifest and caller metadata in the header.
template <typename T>
void save_checkpoint(ModelGraph<T>& g, const std::filesystem::path& path,
                     const nlohmann::json& extra = nlohmann::json::object()) {
  TensorArchive ar;
  for (const auto& p : g.parameters()) {
    Tensor4<T> t(p.shape);
    std::copy(p.value.begin(), p.value.end(), t.data());
    ar.put(p.path, t);
  }
  ar.metadata() = {{"manifest", g.manifest()}, {"extra", extra}};
  ar.save(path);
}

/// Loads into an already-built graph. Parameter paths and shapes must match
/// exactly; returns the saved extra metadata.
template <typename T>
nlohmann::json load_checkpoint(ModelGraph<T>& g, const std::filesystem::path& path) {
  const TensorArchive ar = TensorArchive::load(path);
  auto params = g.parameters();
  if (ar.names().size() != params.size())
    throw ManifestError("checkpoint has " + std::to_string(ar.names().size()) +
                        " tensors, model '" + g.name() + "' has " +
                        std::to_string(params.size()) + " parameters");
  for (const auto& p : params) {
    if (!ar.contains(p.path)) throw ManifestError("checkpoint lacks parameter '" + p.path + "'");
    if (ar.shape_of(p.path) != p.shape)
      throw ManifestError("parameter '" + p.path + "' has shape " + ar.shape_of(p.path).str() +
                          " in the checkpoint, " + p.shape.str() + " in the model");
    const Tensor4<T> t = ar.get<T>(p.path);
    std::copy(t.data(), t.data() + t.numel(), p.value.begin());
  }
  const auto& meta = ar.metadata();
  return meta.contains("extra") ? meta.at("extra") : nlohmann::json::object();
}

/// Copies every parameter of `src` whose path and shape also exist in
/// `dst`. Returns the number of tensors copied.
template <typename T>
std::size_t copy_shared_params(ModelGraph<T>& src, ModelGraph<T>& dst) {
  std::size_t copied = 0;
  auto from = src.parameters();
  for (const auto& d : dst.parameters())
    for (const auto& s : from)
      if (s.path == d.path && s.shape == d.shape) {
        std::copy(s.value.begin(), s.value.end(), d.value.begin());
        ++copied;
        break;
      }
  return copied;
}

}  // namespace lip
