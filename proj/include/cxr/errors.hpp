#pragma once

#include <stdexcept>
#include <string>

namespace cxr {

// Error taxonomy shared across the library. Every exception carries a
// human-readable message; the CLI maps them onto exit codes.

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shape disagreement (names both shapes in the message).
struct ShapeError : Error {
  using Error::Error;
};

// Bad argument value (zero stride, empty region, bad threshold, ...).
struct InvalidArgument : Error {
  using Error::Error;
};

// Tensor not recorded in the active computation graph.
struct NoGraphError : Error {
  using Error::Error;
};

// Non-finite value where a finite one is required.
struct NumericError : Error {
  using Error::Error;
};

// Model configuration that cannot be built.
struct ConfigError : Error {
  using Error::Error;
};

// Manifest / weight-file / image parsing problems.
struct FormatError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

// Patient-level split cannot be performed.
struct SplitError : Error {
  using Error::Error;
};

// AUC undefined (single-class labels).
struct UndefinedAucError : Error {
  using Error::Error;
};

// Bootstrap resampling could not produce two-class resamples.
struct BootstrapError : Error {
  using Error::Error;
};

}  // namespace cxr
