#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace ibdr {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shapes of two operands do not agree.
class DimensionError : public Error {
  using Error::Error;
};

class IndexError : public Error {
  using Error::Error;
};

// A column or vector is too close to zero to normalize.
class DegenerateInputError : public Error {
  using Error::Error;
};

// Divergence frame with K > C-1 columns and no diagonal jitter.
class RankDeficiencyError : public Error {
  using Error::Error;
};

class ParameterShapeError : public Error {
  using Error::Error;
};

class DomainError : public Error {
  using Error::Error;
};

// Caller violated a documented precondition.
class ContractError : public Error {
  using Error::Error;
};

class IngestionError : public Error {
  using Error::Error;
};

class FormatError : public Error {
  using Error::Error;
};

class ConfigError : public Error {
  using Error::Error;
};

class CheckpointError : public Error {
  using Error::Error;
};

class UnsupportedVersionError : public CheckpointError {
  using CheckpointError::CheckpointError;
};

class NumericDivergenceError : public Error {
 public:
  NumericDivergenceError(std::uint64_t step, const std::string& what)
      : Error(what), step_(step) {}
  std::uint64_t step() const { return step_; }

 private:
  std::uint64_t step_;
};

}  // namespace ibdr
