#pragma once

#include <stdexcept>
#include <string>

namespace m2fn {

// Base for every error the library throws. Subclasses map onto the CLI exit
// codes: ConfigError/UsageError are caller mistakes, the rest are data or
// numeric failures.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class ContractError : public Error {
 public:
  using Error::Error;
};

class BatchSizeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class SchemaError : public Error {
 public:
  using Error::Error;
};

class StoreError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class DegenerateDataError : public Error {
 public:
  using Error::Error;
};

// Rank-deficient regression design.
class DesignError : public Error {
 public:
  using Error::Error;
};

}  // namespace m2fn
