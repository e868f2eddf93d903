#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace ctsan {

// Operand shapes are incompatible with the requested operation.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// API misuse: bad arguments, wrong call order, unsupported configuration.
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Math evaluated outside its domain (log of a non-positive value, etc).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Malformed user data: bad sentences, missing dataset fields.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Binary file does not follow the expected layout.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

}  // namespace ctsan
