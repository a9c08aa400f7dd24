#pragma once

#include <stdexcept>
#include <string>

namespace ttgp {

/// Base class for all errors thrown by this library.
class Error : public std::runtime_error {
public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Bad argument values: non-finite inputs, empty tensors, invalid ranges.
class InvalidInputError : public Error {
public:
  using Error::Error;
};

/// Dimension or shape disagreement between operands.
class ShapeError : public InvalidInputError {
public:
  using InvalidInputError::InvalidInputError;
};

/// Numerical factorization failure (e.g. a factor that is not positive-definite).
class DecompositionError : public Error {
public:
  using Error::Error;
};

/// An operation would materialize something too large to be intentional.
class ResourceLimitError : public Error {
public:
  using Error::Error;
};

/// Invalid run configuration (rejected before any work starts).
class ConfigError : public Error {
public:
  using Error::Error;
};

/// File loading / parsing problems; message includes path and line where known.
class DataError : public Error {
public:
  using Error::Error;
};

/// Checkpoint file problems, split into distinct classes so callers can react.
class CheckpointError : public DataError {
public:
  using DataError::DataError;
};

class CheckpointVersionError : public CheckpointError {
public:
  using CheckpointError::CheckpointError;
};

class CheckpointTruncatedError : public CheckpointError {
public:
  using CheckpointError::CheckpointError;
};

class CheckpointChecksumError : public CheckpointError {
public:
  using CheckpointError::CheckpointError;
};

}  // namespace ttgp
