#pragma once

#include <stdexcept>
#include <string>

namespace poselift {

// Every library failure derives from Error so callers can map it to an exit
// code in one place (see exit_code()).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class StepError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

class TopologyError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

class ProjectionError : public NumericError {
 public:
  using NumericError::NumericError;
};

class ContractError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// CLI exit codes: 2 for configuration problems, 3 for numeric failures.
inline int exit_code(const Error& e) {
  if (dynamic_cast<const ConfigError*>(&e) != nullptr) return 2;
  if (dynamic_cast<const DimensionError*>(&e) != nullptr) return 2;
  if (dynamic_cast<const IoError*>(&e) != nullptr) return 2;
  if (dynamic_cast<const NumericError*>(&e) != nullptr) return 3;
  return 1;
}

}  // namespace poselift
