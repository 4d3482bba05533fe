#pragma once

#include <stdexcept>
#include <string>

namespace hyseg {

// Base of every error the library throws. The `kind()` tag lets the CLI map
// failures onto exit codes without RTTI ladders.
class Error : public std::runtime_error {
 public:
  enum class Kind { kDimension, kArgument, kDomain, kConfig, kNumeric, kCheckpoint, kData, kIo };

  Error(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& what) : Error(Kind::kDimension, "dimension error: " + what) {}
};

class ArgumentError : public Error {
 public:
  explicit ArgumentError(const std::string& what) : Error(Kind::kArgument, "argument error: " + what) {}
};

class DomainError : public Error {
 public:
  explicit DomainError(const std::string& what) : Error(Kind::kDomain, "domain error: " + what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(Kind::kConfig, "config error: " + what) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(Kind::kNumeric, "numeric error: " + what) {}
};

class CheckpointError : public Error {
 public:
  explicit CheckpointError(const std::string& what) : Error(Kind::kCheckpoint, "checkpoint error: " + what) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(Kind::kData, "data error: " + what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(Kind::kIo, "I/O error: " + what) {}
};

}  // namespace hyseg
