// SPDX-License-Identifier: Apache-2.0
/**
 * @file   errors.hpp
 * @brief  Exception hierarchy shared by every reseg module.
 *
 * Each class maps onto one status code of the C API (see reseg.h), so the
 * boundary translation stays a plain catch ladder.
 */
#pragma once

#include <stdexcept>
#include <string>

namespace reseg {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor extents disagree with what an operation needs.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Invalid architecture, run configuration or hyperparameter.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Non-finite value encountered in a forward or backward computation.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// API misuse, e.g. calling backward() before a loss root is marked.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Malformed file contents (NetPBM headers, model containers, manifests).
class FormatError : public Error {
 public:
  using Error::Error;
};

class VersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

class TruncatedError : public FormatError {
 public:
  using FormatError::FormatError;
};

/// A stored parameter does not fit the architecture it is loaded into.
class ShapeError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Two evaluations that must agree bit-for-bit did not.
class DeterminismError : public Error {
 public:
  using Error::Error;
};

/// A metric whose denominator is empty for every class.
class UndefinedMetricError : public Error {
 public:
  using Error::Error;
};

/// An operation declined to overwrite existing state (output dirs, locks).
class RefusedError : public Error {
 public:
  using Error::Error;
};

}  // namespace reseg
