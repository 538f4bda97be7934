#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace kilab {

/// Base of every error raised by the library. The CLI maps the concrete
/// subclasses onto distinct exit codes (see exit_code_for).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid or unknown configuration. key() names the offending key when the
/// error concerns a single config entry.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& message, std::string key = {});
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Malformed record in a line-oriented file; line() is 1-based.
class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& message);
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class DanglingReference : public Error {
 public:
  explicit DanglingReference(std::string id);
  const std::string& id() const noexcept { return id_; }

 private:
  std::string id_;
};

class SpanError : public Error {
 public:
  using Error::Error;
};

class IdError : public Error {
 public:
  using Error::Error;
};

class ZeroCount : public Error {
 public:
  using Error::Error;
};

class DegenerateInput : public Error {
 public:
  using Error::Error;
};

class NumericsError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class EmptyDataset : public Error {
 public:
  using Error::Error;
};

enum class ExitCode : int {
  ok = 0,
  failure = 1,
  config = 2,
  io = 3,
  numerics = 4,
};

/// Classifies an in-flight exception into a process exit code.
ExitCode exit_code_for(const std::exception& e) noexcept;

}  // namespace kilab
