#pragma once

#include <stdexcept>
#include <string>

namespace remotenet {

// Error taxonomy. Each kind maps to a distinct CLI exit code (see tools/).

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Training loss became non-finite.
class DivergenceError : public NumericError {
 public:
  using NumericError::NumericError;
};

/// Bad label values or other malformed training data.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dataset layout problems: missing image/mask pairs, unreadable rasters.
class IngestionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace remotenet
