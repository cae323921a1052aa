#pragma once

#include <string>
#include <vector>

namespace domadapt {

// Shortest round-trip decimal form of a double (std::to_chars).
std::string format_double(double v);

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

// Plain comma-separated files without quoting; cells containing commas,
// quotes or newlines are rejected so that read(write(t)) == t exactly.
void write_csv(const CsvTable& table, const std::string& path);
CsvTable read_csv(const std::string& path);

}  // namespace domadapt
