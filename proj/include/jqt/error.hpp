#pragma once

#include <stdexcept>
#include <string>

namespace jqt {

/// Operand shapes are incompatible (non-multiple of the block size, inner
/// dimension mismatch, ...).
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A value is outside the representable or admissible domain.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// A tiling / operator / run configuration violates its constraints.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A saved context or checkpoint does not belong to the call it is used in.
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace jqt
