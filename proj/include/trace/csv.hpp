#pragma once

#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "trace/common.hpp"

namespace trace {

struct CsvRow {
  std::size_t line = 0;  // 1-based line where the record starts
  std::vector<std::string> fields;
};

/// RFC 4180 records: quoted fields may contain commas, doubled quotes and
/// newlines. Blank lines are skipped; a trailing CR is dropped.
inline std::vector<CsvRow> read_csv(std::istream& in) {
  std::vector<CsvRow> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    CsvRow row;
    row.line = line_no;
    std::string field;
    bool quoted = false;
    std::size_t i = 0;
    for (;;) {
      if (i == line.size()) {
        if (!quoted) break;
        std::string more;
        if (!std::getline(in, more)) throw InputError("csv line " + std::to_string(row.line) + ": unterminated quote");
        ++line_no;
        if (!more.empty() && more.back() == '\r') more.pop_back();
        field += '\n';
        line = more;
        i = 0;
        continue;
      }
      const char c = line[i++];
      if (quoted) {
        if (c == '"' && i < line.size() && line[i] == '"') {
          field += '"';
          ++i;
        } else if (c == '"') {
          quoted = false;
        } else {
          field += c;
        }
      } else if (c == '"') {
        quoted = true;
      } else if (c == ',') {
        row.fields.push_back(std::move(field));
        field.clear();
      } else {
        field += c;
      }
    }
    row.fields.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace trace
