#pragma once

#include <stdexcept>
#include <string>

namespace lip {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

class GeometryError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A pooling window whose in-bounds importance sums to zero.
class DegenerateWindowError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Non-finite values where finite ones are required (e.g. LIP logits).
class NumericError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class BuildError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Checkpoint or container contents inconsistent with the expected model.
class ManifestError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad selector, layer id or argument value given by a caller.
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace lip
