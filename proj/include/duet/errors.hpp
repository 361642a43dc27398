#pragma once

#include <stdexcept>
#include <string>

namespace duet {

// Non-finite values or out-of-domain scalars (tau <= 0, NaN scores).
class NumericDomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Tensor shapes that do not fit the operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A pooled vector had zero norm before L2 normalization.
class DegenerateEmbeddingError : public NumericDomainError {
 public:
  using NumericDomainError::NumericDomainError;
};

// Configuration or schema violation. `field` is a dotted path into the config.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string field, const std::string& what)
      : std::invalid_argument(field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

// Training produced a non-finite loss or gradient.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(std::string component, long step)
      : std::runtime_error("non-finite " + component + " at step " +
                           std::to_string(step)),
        component_(std::move(component)),
        step_(step) {}
  const std::string& component() const noexcept { return component_; }
  long step() const noexcept { return step_; }

 private:
  std::string component_;
  long step_;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace duet
