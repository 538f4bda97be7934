#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

namespace kilab {

using Json = nlohmann::json;

struct JsonRecord {
  std::size_t line = 0;  // 1-based line number in the source file
  Json value;
};

/// Reads one JSON object per non-blank line. Throws IoError if the file
/// cannot be opened and ParseError(line) on malformed records.
std::vector<JsonRecord> read_jsonl(const std::filesystem::path& path);

std::string read_text_file(const std::filesystem::path& path);

/// Writes through a sibling temporary file and renames it into place, so an
/// interrupted write never leaves a partial file at `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& content);

std::string to_jsonl(const std::vector<Json>& records);

}  // namespace kilab
