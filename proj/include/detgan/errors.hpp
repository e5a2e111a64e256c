#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace detgan {

/// Shape or dimension disagreement between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Index, box, or region outside the valid extent.
class RangeError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

/// Violated precondition of an API call.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Raised by backward_as_graph when an op has only a first-order rule.
class UnsupportedOpError : public std::runtime_error {
 public:
  explicit UnsupportedOpError(const std::string& op)
      : std::runtime_error("op '" + op + "' has no second-order rule"), op_(op) {}
  const std::string& op() const noexcept { return op_; }

 private:
  std::string op_;
};

/// NaN or Inf produced by an op.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed file contents. `position` is a byte offset or a 1-based line
/// number depending on the format.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t position)
      : std::runtime_error(what), position_(position) {}
  std::size_t position() const noexcept { return position_; }

 private:
  std::size_t position_;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace detgan
