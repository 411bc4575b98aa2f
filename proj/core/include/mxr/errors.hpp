#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace mxr {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor extents.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A caller broke an operation's precondition (wrong call sequence, bad range).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Argument outside a function's mathematical domain, e.g. log(0).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf detected in a forward value or a loss.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Invalid model, run or dataset configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed binary or text file. Carries the byte offset at which parsing failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), detail_(what), offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }
  /// Message without the offset suffix.
  const std::string& detail() const noexcept { return detail_; }

 private:
  std::string detail_;
  std::uint64_t offset_;
};

/// Checkpoint content does not match the architecture it is loaded into.
class IntegrityError : public Error {
 public:
  using Error::Error;
};

/// Unsupported file format version.
class VersionError : public Error {
 public:
  using Error::Error;
};

}  // namespace mxr
