#pragma once

#include <stdexcept>
#include <string>

namespace hsf {

// Error taxonomy shared by every module. All derive from std::runtime_error so
// callers that do not care about the category can catch one type.

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct StateError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericsError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IOError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace hsf
