#pragma once

#include <stdexcept>
#include <string>

namespace cbm {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand dimensions do not agree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A scalar or index argument is outside its documented domain.
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// Input data violates a value invariant (non-finite entries, out-of-range concepts).
class InputError : public Error {
 public:
  using Error::Error;
};

/// The attack direction w_t - w_y vanishes, or the constraint matrix is zero.
class DegenerateError : public Error {
 public:
  using Error::Error;
};

class MetricError : public Error {
 public:
  using Error::Error;
};

/// Training hit a non-finite loss.
class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, int epoch, int batch)
      : Error(what + " (epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch) + ")"),
        epoch_(epoch),
        batch_(batch) {}

  int epoch() const noexcept { return epoch_; }
  int batch() const noexcept { return batch_; }

 private:
  int epoch_;
  int batch_;
};

/// Serialized text could not be parsed. Carries the 1-based line number when known.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t line = 0)
      : Error(line ? what + " at line " + std::to_string(line) : what), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// Dataset ingestion failed: a required file is missing or records are inconsistent.
class IngestError : public Error {
 public:
  using Error::Error;
};

}  // namespace cbm
