#pragma once

#include <stdexcept>
#include <string>

namespace svam {

// Status codes shared by the C API and the CLI exit codes.
enum class Status : int {
  ok = 0,
  error = 1,
  config_error = 2,
  checkpoint_error = 3,
  numeric_error = 4,
};

class Error : public std::runtime_error {
 public:
  Error(Status code, const std::string& msg) : std::runtime_error(msg), code_(code) {}
  Status code() const { return code_; }

 private:
  Status code_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error(Status::config_error, msg) {}
};

class CheckpointError : public Error {
 public:
  explicit CheckpointError(const std::string& msg) : Error(Status::checkpoint_error, msg) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& msg) : Error(Status::numeric_error, msg) {}
};

// Shape/contract violations carry the op name plus expected/actual shape text.
class ShapeError : public Error {
 public:
  ShapeError(const std::string& op, const std::string& expected, const std::string& actual)
      : Error(Status::error, "shape mismatch in " + op + ": expected " + expected + ", got " + actual) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& msg) : Error(Status::error, msg) {}
};

}  // namespace svam
