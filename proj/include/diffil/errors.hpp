#pragma once

#include <stdexcept>
#include <string>

namespace diffil {

// Thrown when tensor shapes or dimensions do not line up.
struct shape_error : std::runtime_error {
  explicit shape_error(const std::string& what) : std::runtime_error(what) {}
};

// Invalid or inconsistent experiment configuration. CLI exit code 2.
struct config_error : std::runtime_error {
  explicit config_error(const std::string& what) : std::runtime_error(what) {}
};

// Malformed or missing on-disk data. CLI exit code 3.
struct data_error : std::runtime_error {
  explicit data_error(const std::string& what) : std::runtime_error(what) {}
};

// Non-finite value detected during training. CLI exit code 4.
struct numeric_error : std::runtime_error {
  explicit numeric_error(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace diffil
