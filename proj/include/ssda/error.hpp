#pragma once

#include <stdexcept>
#include <string>

namespace ssda {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration, incompatible shapes or inconsistent settings.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed input data (bad label values, unreadable files).
class DataError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

/// API misuse, e.g. backward() on a non-scalar.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Two objects that must agree structurally do not (model pairs, checkpoints).
class IntegrityError : public Error {
 public:
  using Error::Error;
};

class StateError : public Error {
 public:
  using Error::Error;
};

class EmptySetError : public Error {
 public:
  using Error::Error;
};

class ArgumentError : public Error {
 public:
  using Error::Error;
};

}  // namespace ssda
