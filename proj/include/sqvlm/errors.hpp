#pragma once

#include <stdexcept>
#include <string>

namespace sqvlm {

// Thrown on malformed configuration (unknown keys, bad values). CLI exit 1.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Thrown on malformed input data (conversations, images, records). CLI exit 2.
struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Thrown when a loss turns NaN/Inf; carries the offending sample id. CLI exit 3.
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor dimension mismatches; always names the shapes involved.
struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Illegal lifecycle transitions (double backward, double merge, pipeline order).
struct StateError : std::runtime_error {
  explicit StateError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace sqvlm
