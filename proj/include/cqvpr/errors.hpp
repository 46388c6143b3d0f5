#pragma once

#include <stdexcept>
#include <string>

namespace cqvpr {

// Base for all library failures. The CLI maps these to one-line stderr
// messages and a nonzero exit status.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& msg) : Error("shape: " + msg) {}
};

class ParameterError : public Error {
 public:
  explicit ParameterError(const std::string& msg) : Error("parameter: " + msg) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error("config: " + msg) {}
};

class FormatError : public Error {
 public:
  explicit FormatError(const std::string& msg) : Error("format: " + msg) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& msg) : Error("io: " + msg) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& msg) : Error("data: " + msg) {}
};

// Raised by grad_check when two forward passes of the closure disagree.
class DeterminismError : public Error {
 public:
  explicit DeterminismError(const std::string& msg)
      : Error("determinism: " + msg) {}
};

}  // namespace cqvpr
