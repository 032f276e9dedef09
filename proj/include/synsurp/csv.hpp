#pragma once

#include <charconv>
#include <cstdio>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include "synsurp/error.hpp"

namespace synsurp::csv {

/// Splits one CSV record. Double-quoted fields may contain commas and "" escapes.
inline std::vector<std::string> split(std::string_view line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  fields.push_back(std::move(cur));
  return fields;
}

inline std::string quote(std::string_view field) {
  if (field.find_first_of(",\"\n") == std::string_view::npos) return std::string(field);
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

inline double to_double(std::string_view s, std::size_t line) {
  while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
  while (!s.empty() && s.back() == ' ') s.remove_suffix(1);
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size())
    throw ParseError("not a number: '" + std::string(s) + "'", line);
  return v;
}

/// Shortest text that reads back to the identical double.
inline std::string format(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

/// Reads all records of a CSV file whose header must contain `required` columns.
/// Returns rows as field vectors reordered to match `required`.
struct Table {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::size_t> lines;  // source line of each row
};

inline Table read(const std::string& path, const std::vector<std::string>& required) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path);
  std::string line;
  std::size_t lineno = 0;
  Table table;
  std::vector<std::size_t> index;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (index.empty()) {
      if (line.empty()) continue;
      auto header = split(line);
      for (const auto& col : required) {
        std::size_t found = header.size();
        for (std::size_t i = 0; i < header.size(); ++i)
          if (header[i] == col) found = i;
        if (found == header.size())
          throw ParseError(path + ": missing column '" + col + "'", lineno);
        index.push_back(found);
      }
      continue;
    }
    if (line.empty()) continue;
    auto fields = split(line);
    std::vector<std::string> row;
    row.reserve(index.size());
    for (std::size_t i : index) {
      if (i >= fields.size()) throw ParseError(path + ": short row", lineno);
      row.push_back(fields[i]);
    }
    table.rows.push_back(std::move(row));
    table.lines.push_back(lineno);
  }
  if (index.empty() && !required.empty()) throw ParseError(path + ": missing header");
  return table;
}

}  // namespace synsurp::csv
