#pragma once

#include <stdexcept>
#include <string>

namespace flatmatch {

/// Shapes of two operands (or a tensor and its expected layout) disagree.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A precondition of an operation was violated by the caller.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// A value outside a function's mathematical domain, e.g. log of a
/// non-positive number.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// A NaN or infinity showed up where only finite values are meaningful.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid user configuration. `field` is the dotted config path when known.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& message, std::string field = {})
      : std::runtime_error(field.empty() ? message : field + ": " + message),
        field_(std::move(field)) {}

  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

}  // namespace flatmatch
