#pragma once

#include <stdexcept>
#include <string>

namespace recursor {

// Base for every error raised by the library. The CLI maps subclasses onto
// exit codes (ConfigError -> 2, NumericError -> 3).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

class ContractError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class CacheError : public Error {
 public:
  using Error::Error;
};

class CapacityError : public Error {
 public:
  using Error::Error;
};

class ModeError : public Error {
 public:
  using Error::Error;
};

// Out-of-order cache write; a special case of a cache inconsistency.
class OrderingError : public CacheError {
 public:
  using CacheError::CacheError;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

class MetricError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class ReplayError : public Error {
 public:
  using Error::Error;
};

class LengthError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class MappingError : public Error {
 public:
  using Error::Error;
};

class InitError : public Error {
 public:
  using Error::Error;
};

class ConsistencyError : public Error {
 public:
  using Error::Error;
};

}  // namespace recursor
