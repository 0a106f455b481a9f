#pragma once

// Named full-size graphs for accounting, and their CSV counts.

#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "lip/model/resnet.hpp"

namespace lip {

struct ZooEntry {
  std::string name;
  std::function<ModelGraph<float>()> build;
};

inline const std::vector<ZooEntry>& model_zoo() {
  using P = SubstitutionPlan;
  static const std::vector<ZooEntry> zoo = {
      {"resnet50", [] { return build_lip_resnet<float>(50, P::named('E')); }},
      {"resnet50-avgpool", [] { return build_lip_resnet<float>(50, P::average()); }},
      {"lip-resnet50-projection", [] { return build_lip_resnet<float>(50, P::named('A'), LogitSpec::projection()); }},
      {"lip-resnet50-bottleneck64", [] { return build_lip_resnet<float>(50, P::named('A'), LogitSpec::bottleneck(64)); }},
      {"lip-resnet50-bottleneck128", [] { return build_lip_resnet<float>(50, P::named('A'), LogitSpec::bottleneck(128)); }},
      {"lip-resnet50-bottleneck256", [] { return build_lip_resnet<float>(50, P::named('A'), LogitSpec::bottleneck(256)); }},
      {"lip-resnet50-planB", [] { return build_lip_resnet<float>(50, P::named('B')); }},
      {"lip-resnet50-planC", [] { return build_lip_resnet<float>(50, P::named('C')); }},
      {"lip-resnet50-planD", [] { return build_lip_resnet<float>(50, P::named('D')); }},
      {"resnet101", [] { return build_lip_resnet<float>(101, P::named('E')); }},
      {"lip-resnet101-bottleneck128", [] { return build_lip_resnet<float>(101, P::named('A')); }},
  };
  return zoo;
}

inline const ZooEntry& zoo_entry(const std::string& name) {
  for (const auto& e : model_zoo())
    if (e.name == name) return e;
  std::string known;
  for (const auto& e : model_zoo()) known += (known.empty() ? "" : ", ") + e.name;
  throw UsageError("unknown model '" + name + "' (known: " + known + ")");
}

struct CountRow {
  std::string model;
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
};

inline CountRow count_model(const std::string& name) {
  ModelGraph<float> g = zoo_entry(name).build();
  return {name, count_params(g), count_flops(g)};
}

inline std::string format_count_csv(const std::vector<CountRow>& rows) {
  std::string out = "model,params,macs\n";
  char line[160];
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%s,%llu,%llu\n", r.model.c_str(),
                  static_cast<unsigned long long>(r.params), static_cast<unsigned long long>(r.macs));
    out += line;
  }
  return out;
}

}  // namespace lip
