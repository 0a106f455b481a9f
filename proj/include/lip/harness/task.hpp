#pragma once

// Configuration of the synthetic tiny-detail classification task.

#include <cstdint>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "lip/errors.hpp"

namespace lip {

struct SyntheticTaskConfig {
  std::size_t image_size = 32;
  std::size_t channels = 1;
  std::size_t classes = 4;
  std::size_t patch = 3;
  double target_amplitude = 0.6;   // a
  double clutter_amplitude = 1.0;  // b
  std::size_t clutter_grid = 5;    // control points per side of the clutter field
  std::size_t train_samples = 4000;
  std::size_t test_samples = 1000;
  std::uint64_t seed = 0;

  void validate() const {
    if (image_size < patch || patch != 3) throw BuildError("task: patch must be 3x3 and fit the image");
    if (channels != 1) throw BuildError("task: only single-channel images are generated");
    if (classes < 2 || classes > 4) throw BuildError("task: classes must lie in [2, 4]");
    if (!(target_amplitude >= 0.0) || !(clutter_amplitude > 0.0))
      throw BuildError("task: amplitudes must be positive");
    if (!(target_amplitude < clutter_amplitude))
      throw BuildError("task: target amplitude must be below the clutter amplitude");
    if (clutter_grid < 2) throw BuildError("task: clutter grid needs >= 2 points per side");
    if (train_samples == 0 || test_samples == 0) throw BuildError("task: splits must be non-empty");
  }
};

inline void to_json(nlohmann::json& j, const SyntheticTaskConfig& c) {
  j = {{"image_size", c.image_size},
       {"channels", c.channels},
       {"classes", c.classes},
       {"patch", c.patch},
       {"target_amplitude", c.target_amplitude},
       {"clutter_amplitude", c.clutter_amplitude},
       {"clutter_grid", c.clutter_grid},
       {"train_samples", c.train_samples},
       {"test_samples", c.test_samples},
       {"seed", c.seed}};
}

/// Missing keys keep their defaults.
inline void from_json(const nlohmann::json& j, SyntheticTaskConfig& c) {
  c.image_size = j.value("image_size", c.image_size);
  c.channels = j.value("channels", c.channels);
  c.classes = j.value("classes", c.classes);
  c.patch = j.value("patch", c.patch);
  c.target_amplitude = j.value("target_amplitude", c.target_amplitude);
  c.clutter_amplitude = j.value("clutter_amplitude", c.clutter_amplitude);
  c.clutter_grid = j.value("clutter_grid", c.clutter_grid);
  c.train_samples = j.value("train_samples", c.train_samples);
  c.test_samples = j.value("test_samples", c.test_samples);
  c.seed = j.value("seed", c.seed);
}

}  // namespace lip
