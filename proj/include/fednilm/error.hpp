#pragma once

#include <stdexcept>
#include <string>

namespace fednilm {

/// Base of every exception the library throws.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Rejected input: malformed config, invalid network spec, bad schema.
/// The CLI maps this family to exit code 1.
class ValidationError : public Error {
public:
  using Error::Error;
};

class ConfigError : public ValidationError {
public:
  using ValidationError::ValidationError;
};

class SpecError : public ValidationError {
public:
  using ValidationError::ValidationError;
};

/// Array lengths or layouts that do not line up.
class ShapeError : public Error {
public:
  using Error::Error;
};

/// Non-finite or out-of-domain values handed to a numeric routine.
class InputError : public Error {
public:
  using Error::Error;
};

/// A training step produced NaN/Inf.
class NumericError : public Error {
public:
  using Error::Error;
};

/// File, CSV and dataset construction failures.
class DataError : public Error {
public:
  using Error::Error;
};

} // namespace fednilm
