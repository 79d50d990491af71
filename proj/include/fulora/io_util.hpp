#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace fulora {

std::string read_file(const std::filesystem::path& path);
/// Writes `<path>.tmp` then renames it over `path`; creates parent dirs.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

/// Quotes a CSV field only when it contains a comma, quote or newline.
std::string csv_field(std::string_view s);
/// Joins fields with commas and appends "\n".
std::string csv_row(const std::vector<std::string>& fields);
/// RFC 4180 parsing (quoted fields, doubled quotes, CRLF tolerated). Blank
/// lines are skipped.
std::vector<std::vector<std::string>> parse_csv(std::string_view text);

}  // namespace fulora
