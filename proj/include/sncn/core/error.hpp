#pragma once

#include <stdexcept>
#include <string>

namespace sncn {

/// Operand shapes incompatible with the requested operation.
class ShapeError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

/// A forward or backward pass produced NaN/Inf.
class NumericError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Malformed file or configuration input.
class FormatError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Invalid user-supplied configuration (bad value, unknown key, ...).
class ConfigError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

} // namespace sncn
