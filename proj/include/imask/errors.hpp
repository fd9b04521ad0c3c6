#pragma once

#include <stdexcept>
#include <string>

namespace imask {

// Shape or dimension contract violated by an operation's inputs.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Misuse of the tape / gradient machinery (non-scalar loss, detached loss, NaN grads).
class AutodiffError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Checkpoint or descriptor does not match the network being restored.
class ArchitectureError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed file content (graymap, manifest, checkpoint, CSV).
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad configuration key or value.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Data-dependent runtime failure (empty dataset, budget too large, ...).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace imask
