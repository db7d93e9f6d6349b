#pragma once

#include <stdexcept>
#include <string>

namespace owssd {

/// Error categories. The CLI maps each one to a distinct exit code.
enum class ErrorKind {
  Input,        // invalid argument or data value
  Dimension,    // feature length does not match the expected dimension
  Schema,       // file content does not follow its declared schema
  MissingFile,  // input path does not exist
  Io,           // read/write failure
  Training,     // non-finite loss during optimization
  Calibration,  // threshold cannot be calibrated from the given data
  Config,       // invalid run configuration
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Input: return "input";
    case ErrorKind::Dimension: return "dimension";
    case ErrorKind::Schema: return "schema";
    case ErrorKind::MissingFile: return "missing-file";
    case ErrorKind::Io: return "io";
    case ErrorKind::Training: return "training";
    case ErrorKind::Calibration: return "calibration";
    case ErrorKind::Config: return "config";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

struct InputError : Error {
  explicit InputError(const std::string& what) : Error(ErrorKind::Input, what) {}
};

struct DimensionError : Error {
  explicit DimensionError(const std::string& what) : Error(ErrorKind::Dimension, what) {}
};

struct SchemaError : Error {
  explicit SchemaError(const std::string& what) : Error(ErrorKind::Schema, what) {}
};

struct MissingFileError : Error {
  explicit MissingFileError(const std::string& what) : Error(ErrorKind::MissingFile, what) {}
};

struct IoError : Error {
  explicit IoError(const std::string& what) : Error(ErrorKind::Io, what) {}
};

struct TrainingError : Error {
  TrainingError(const std::string& what, int epoch, int batch)
      : Error(ErrorKind::Training, what), epoch(epoch), batch(batch) {}
  int epoch;
  int batch;
};

struct CalibrationError : Error {
  explicit CalibrationError(const std::string& what) : Error(ErrorKind::Calibration, what) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& what) : Error(ErrorKind::Config, what) {}
};

}  // namespace owssd
