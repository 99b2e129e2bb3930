#pragma once

#include <stdexcept>
#include <string>

namespace lgas {

// Bad experiment/geometry configuration (CLI maps this to exit code 2).
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Surrogate kernel calibration failed to find a valid root.
struct CalibrationError : std::runtime_error {
  explicit CalibrationError(const std::string& what) : std::runtime_error(what) {}
};

// Stein equation residual did not reach tolerance at the probe points.
struct QuadratureError : std::runtime_error {
  explicit QuadratureError(const std::string& what) : std::runtime_error(what) {}
};

// Requested time lies beyond the last recorded collision.
struct NeedMoreFlights : std::runtime_error {
  explicit NeedMoreFlights(const std::string& what) : std::runtime_error(what) {}
};

// Empirical conditional-mean bins could not be filled.
struct WidenBinsError : std::runtime_error {
  explicit WidenBinsError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace lgas
