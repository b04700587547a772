#pragma once

// Minimal CSV helpers for the artifact formats (no quoting; fields never
// contain commas). Lines starting with '#' are metadata and skipped.

#include <iomanip>
#include <istream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cdrsteer::csv {

inline std::string number(double v) {
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<double>::max_digits10) << v;
  return os.str();
}

inline std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream is(line);
  while (std::getline(is, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

inline Table read(std::istream& in, const std::vector<std::string>& expected_header) {
  Table t;
  std::string line;
  bool have_header = false;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    auto fields = split(line);
    if (!have_header) {
      if (fields != expected_header) throw std::runtime_error("csv: unexpected header '" + line + "'");
      t.header = std::move(fields);
      have_header = true;
      continue;
    }
    if (fields.size() != t.header.size()) throw std::runtime_error("csv: wrong field count in '" + line + "'");
    t.rows.push_back(std::move(fields));
  }
  if (!have_header) throw std::runtime_error("csv: missing header");
  return t;
}

}  // namespace cdrsteer::csv
