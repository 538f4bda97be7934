#include "kilab/errors.hpp"

namespace kilab {

ConfigError::ConfigError(const std::string& message, std::string key)
    : Error(message), key_(std::move(key)) {}

ParseError::ParseError(std::size_t line, const std::string& message)
    : Error("line " + std::to_string(line) + ": " + message), line_(line) {}

DanglingReference::DanglingReference(std::string id)
    : Error("dangling passage reference: " + id), id_(std::move(id)) {}

ExitCode exit_code_for(const std::exception& e) noexcept {
  if (dynamic_cast<const ConfigError*>(&e) != nullptr ||
      dynamic_cast<const EmptyDataset*>(&e) != nullptr ||
      dynamic_cast<const ShapeError*>(&e) != nullptr) {
    return ExitCode::config;
  }
  if (dynamic_cast<const IoError*>(&e) != nullptr ||
      dynamic_cast<const ParseError*>(&e) != nullptr ||
      dynamic_cast<const DanglingReference*>(&e) != nullptr ||
      dynamic_cast<const SpanError*>(&e) != nullptr) {
    return ExitCode::io;
  }
  if (dynamic_cast<const NumericsError*>(&e) != nullptr ||
      dynamic_cast<const ZeroCount*>(&e) != nullptr) {
    return ExitCode::numerics;
  }
  return ExitCode::failure;
}

}  // namespace kilab
