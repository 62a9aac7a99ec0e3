#pragma once

#include <stdexcept>
#include <string>

namespace eagle {

// Error taxonomy mirrored by the C API status codes: configuration problems
// (bad config files, unknown presets, invalid variant ids), bad call
// arguments (shape mismatches, NaN actions), calls in the wrong lifecycle
// state, IO failures, and faults raised during training (non-finite losses).

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct InputError : std::runtime_error {
  explicit InputError(const std::string& msg) : std::runtime_error(msg) {}
};

struct StateError : std::runtime_error {
  explicit StateError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

struct TrainingFault : std::runtime_error {
  explicit TrainingFault(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace eagle
