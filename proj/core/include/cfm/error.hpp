#pragma once

#include <stdexcept>
#include <string>

namespace cfm {

/// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// An instance lies outside the support of the model (noise inversion undefined).
class OutOfSupportError : public Error {
 public:
  using Error::Error;
};

/// Least-squares design matrix is rank deficient.
class SingularDesignError : public Error {
 public:
  using Error::Error;
};

/// twin_set called on a ball with positive radius.
class NonzeroRadiusError : public Error {
 public:
  using Error::Error;
};

/// Tensor shapes are incompatible.
class ShapeMismatchError : public Error {
 public:
  using Error::Error;
};

/// Backward pass invoked with a cache that does not match the network.
class StaleCacheError : public Error {
 public:
  using Error::Error;
};

/// Vector arguments of differing length.
class LengthMismatchError : public Error {
 public:
  using Error::Error;
};

/// Huber knee parameter must be positive.
class NonpositiveDeltaError : public Error {
 public:
  using Error::Error;
};

/// Batch too small for a rank statistic.
class DegenerateBatchError : public Error {
 public:
  using Error::Error;
};

/// Evaluation requested on an empty test set.
class EmptyTestSetError : public Error {
 public:
  using Error::Error;
};

/// A sensitive level has no candidates in the pool.
class MissingLevelError : public Error {
 public:
  using Error::Error;
};

/// Experiment configuration could not be parsed or is inconsistent.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A file referenced by a configuration does not exist.
class MissingFileError : public Error {
 public:
  using Error::Error;
};

/// Report operations need at least one row.
class EmptyReportError : public Error {
 public:
  using Error::Error;
};

}  // namespace cfm
