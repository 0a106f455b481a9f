#pragma once

// Tensor container files: one compact JSON header line terminated by '\n',
// followed by raw little-endian buffers.
//
//   single tensor : {"byte_order":"little","dims":[n,c,h,w],"dtype":"f32"}
//   archive       : {"byte_order":"little","entries":[{"dims":..,"dtype":..,
//                    "name":..,"offset":..}],"format":"lip-archive",
//                    "metadata":{..}}
//
// Archive offsets are byte offsets from the first byte after the header.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lip/errors.hpp"
#include "lip/tensor.hpp"

namespace lip {

namespace detail {

template <typename T>
constexpr const char* dtype_name() {
  if constexpr (std::is_same_v<T, float>)
    return "f32";
  else
    return "f64";
}

inline std::size_t dtype_size(const std::string& dtype) {
  if (dtype == "f32") return 4;
  if (dtype == "f64") return 8;
  throw ManifestError("unsupported dtype '" + dtype + "'");
}

template <typename U>
U byteswap_value(U v) {
  unsigned char b[sizeof(U)];
  std::memcpy(b, &v, sizeof(U));
  for (std::size_t i = 0; i < sizeof(U) / 2; ++i) std::swap(b[i], b[sizeof(U) - 1 - i]);
  std::memcpy(&v, b, sizeof(U));
  return v;
}

template <typename T>
void append_le(std::string& out, const Tensor4<T>& t) {
  const std::size_t start = out.size();
  out.resize(start + t.numel() * sizeof(T));
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(out.data() + start, t.data(), t.numel() * sizeof(T));
  } else {
    for (std::size_t i = 0; i < t.numel(); ++i) {
      T v = byteswap_value(t.data()[i]);
      std::memcpy(out.data() + start + i * sizeof(T), &v, sizeof(T));
    }
  }
}

template <typename Src, typename T>
void decode_into(const char* bytes, Tensor4<T>& t) {
  for (std::size_t i = 0; i < t.numel(); ++i) {
    Src v;
    std::memcpy(&v, bytes + i * sizeof(Src), sizeof(Src));
    if constexpr (std::endian::native != std::endian::little) v = byteswap_value(v);
    t.data()[i] = static_cast<T>(v);
  }
}

template <typename T>
Tensor4<T> decode(const std::string& dtype, const nlohmann::json& dims, const char* bytes) {
  if (!dims.is_array() || dims.size() != 4) throw ManifestError("tensor dims must have 4 entries");
  Tensor4<T> t({dims[0].get<std::size_t>(), dims[1].get<std::size_t>(),
                dims[2].get<std::size_t>(), dims[3].get<std::size_t>()});
  if (dtype == "f32")
    decode_into<float>(bytes, t);
  else if (dtype == "f64")
    decode_into<double>(bytes, t);
  else
    throw ManifestError("unsupported dtype '" + dtype + "'");
  return t;
}

inline nlohmann::json dims_json(const Shape4& s) { return {s.n, s.c, s.h, s.w}; }

inline void write_file(const std::filesystem::path& path, const std::string& header,
                       const std::string& payload) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << header << '\n';
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

/// Reads header line and payload.
inline std::pair<nlohmann::json, std::string> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::string header;
  if (!std::getline(in, header)) throw ManifestError("missing header in '" + path.string() + "'");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw ManifestError("bad header in '" + path.string() + "': " + e.what());
  }
  if (meta.value("byte_order", std::string{}) != "little")
    throw ManifestError("unsupported byte order in '" + path.string() + "'");
  std::string payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return {std::move(meta), std::move(payload)};
}

}  // namespace detail

template <typename T>
void write_tensor(const std::filesystem::path& path, const Tensor4<T>& t) {
  nlohmann::json header = {{"byte_order", "little"},
                           {"dims", detail::dims_json(t.shape())},
                           {"dtype", detail::dtype_name<T>()}};
  std::string payload;
  detail::append_le(payload, t);
  detail::write_file(path, header.dump(), payload);
}

template <typename T>
Tensor4<T> read_tensor(const std::filesystem::path& path) {
  auto [meta, payload] = detail::read_file(path);
  const std::string dtype = meta.at("dtype").get<std::string>();
  const auto& dims = meta.at("dims");
  std::size_t count = 1;
  for (const auto& d : dims) count *= d.get<std::size_t>();
  if (payload.size() != count * detail::dtype_size(dtype))
    throw ManifestError("payload size mismatch in '" + path.string() + "'");
  return detail::decode<T>(dtype, dims, payload.data());
}

/// Named tensors plus free-form JSON metadata. Entries keep insertion order
/// so files are byte-reproducible.
class TensorArchive {
 public:
  nlohmann::json& metadata() { return metadata_; }
  const nlohmann::json& metadata() const { return metadata_; }

  template <typename T>
  void put(const std::string& name, const Tensor4<T>& t) {
    if (index_.count(name)) throw ManifestError("duplicate archive entry '" + name + "'");
    Entry e{name, detail::dtype_name<T>(), t.shape(), payload_.size()};
    detail::append_le(payload_, t);
    index_[name] = entries_.size();
    entries_.push_back(std::move(e));
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& e : entries_) out.push_back(e.name);
    return out;
  }

  template <typename T>
  Tensor4<T> get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ManifestError("archive has no entry '" + name + "'");
    const Entry& e = entries_[it->second];
    return detail::decode<T>(e.dtype, detail::dims_json(e.shape), payload_.data() + e.offset);
  }

  Shape4 shape_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ManifestError("archive has no entry '" + name + "'");
    return entries_[it->second].shape;
  }

  /// Total scalar count over all entries.
  std::size_t scalar_count() const {
    std::size_t total = 0;
    for (const auto& e : entries_) total += e.shape.numel();
    return total;
  }

  void save(const std::filesystem::path& path) const {
    nlohmann::json list = nlohmann::json::array();
    for (const auto& e : entries_)
      list.push_back({{"dims", detail::dims_json(e.shape)},
                      {"dtype", e.dtype},
                      {"name", e.name},
                      {"offset", e.offset}});
    nlohmann::json header = {{"byte_order", "little"},
                             {"entries", list},
                             {"format", "lip-archive"},
                             {"metadata", metadata_}};
    detail::write_file(path, header.dump(), payload_);
  }

  static TensorArchive load(const std::filesystem::path& path) {
    auto [meta, payload] = detail::read_file(path);
    if (meta.value("format", std::string{}) != "lip-archive")
      throw ManifestError("'" + path.string() + "' is not a tensor archive");
    TensorArchive ar;
    ar.metadata_ = meta.value("metadata", nlohmann::json::object());
    ar.payload_ = std::move(payload);
    for (const auto& j : meta.at("entries")) {
      const auto& d = j.at("dims");
      Entry e{j.at("name").get<std::string>(), j.at("dtype").get<std::string>(),
              {d.at(0).get<std::size_t>(), d.at(1).get<std::size_t>(), d.at(2).get<std::size_t>(),
               d.at(3).get<std::size_t>()},
              j.at("offset").get<std::size_t>()};
      if (e.offset + e.shape.numel() * detail::dtype_size(e.dtype) > ar.payload_.size())
        throw ManifestError("archive entry '" + e.name + "' exceeds payload");
      ar.index_[e.name] = ar.entries_.size();
      ar.entries_.push_back(std::move(e));
    }
    return ar;
  }

 private:
  struct Entry {
    std::string name;
    std::string dtype;
    Shape4 shape;
    std::size_t offset;
  };

  nlohmann::json metadata_ = nlohmann::json::object();
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
  std::string payload_;
};

}  // namespace lip
