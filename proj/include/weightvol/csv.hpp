#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace weightvol {

/// Shortest decimal text that round-trips to the same double.
std::string format_double(double v);

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  /// Index of `name` in the header; throws ParseError if absent.
  std::size_t column(const std::string& name) const;
};

/// Plain comma-separated parsing (no quoting). Throws ParseError on ragged rows.
CsvTable parse_csv(const std::string& text);
CsvTable read_csv(const std::filesystem::path& path);

std::string join_csv(const std::vector<std::string>& fields);
double parse_double(const std::string& text);

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace weightvol
