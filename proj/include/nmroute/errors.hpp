#pragma once

#include <stdexcept>
#include <string>

namespace nmr {

// Shapes of operands do not line up.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// An N:M mask does not fit the weight it is applied to.
class MaskError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A documented precondition or usage contract was violated.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Malformed serialized data or a structure that breaks its storage format.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A configuration value is missing, unknown, or out of range.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A file or directory could not be opened, read or written.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace nmr
