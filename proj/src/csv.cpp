#include "domadapt/csv.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "domadapt/errors.hpp"

namespace domadapt {

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

namespace {

void check_cell(const std::string& cell) {
  if (cell.find_first_of(",\"\n\r") != std::string::npos) {
    throw ParameterError("write_csv: cell contains a delimiter: '" + cell +
                         "'");
  }
}

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> cells;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(',', start);
    if (pos == std::string::npos) {
      cells.push_back(line.substr(start));
      break;
    }
    cells.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return cells;
}

}  // namespace

void write_csv(const CsvTable& table, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw IoError("write_csv: cannot open " + path);
  }
  auto write_row = [&](const std::vector<std::string>& row) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      check_cell(row[i]);
      if (i > 0) out << ',';
      out << row[i];
    }
    out << '\n';
  };
  write_row(table.header);
  for (const auto& row : table.rows) {
    if (row.size() != table.header.size()) {
      throw ShapeError("write_csv: row width differs from header");
    }
    write_row(row);
  }
  if (!out) {
    throw IoError("write_csv: write failed for " + path);
  }
}

CsvTable read_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw IoError("read_csv: cannot open " + path);
  }
  CsvTable table;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (first) {
      table.header = split_line(line);
      first = false;
    } else {
      table.rows.push_back(split_line(line));
    }
  }
  return table;
}

}  // namespace domadapt
