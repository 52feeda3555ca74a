#pragma once

#include <sstream>
#include <string>
#include <vector>

#include "dia/error.hpp"
#include "dia/train.hpp"

namespace dia {

// Reader for the plain comma-separated reports this library writes (no
// quoting). Every row must have as many fields as the header.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (header[i] == name) return i;
    }
    throw FormatError("csv: no column '" + name + "'");
  }

  std::string to_text() const {
    std::ostringstream out;
    auto line = [&](const std::vector<std::string>& fields) {
      for (std::size_t i = 0; i < fields.size(); ++i) out << (i ? "," : "") << fields[i];
      out << '\n';
    };
    line(header);
    for (const auto& r : rows) line(r);
    return out.str();
  }
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    out.push_back(line.substr(start, comma - start));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

inline CsvTable parse_csv(const std::string& text) {
  CsvTable t;
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line.empty()) throw FormatError("csv: missing header line");
  t.header = split_csv_line(line);
  for (std::size_t lineno = 2; std::getline(in, line); ++lineno) {
    auto fields = split_csv_line(line);
    if (fields.size() != t.header.size()) {
      throw FormatError("csv line " + std::to_string(lineno) + ": " + std::to_string(fields.size()) +
                        " fields, header has " + std::to_string(t.header.size()));
    }
    t.rows.push_back(std::move(fields));
  }
  return t;
}

inline double parse_csv_double(const std::string& field) {
  if (field == "nan") return std::numeric_limits<double>::quiet_NaN();
  if (field == "inf") return std::numeric_limits<double>::infinity();
  if (field == "-inf") return -std::numeric_limits<double>::infinity();
  try {
    std::size_t used = 0;
    const double v = std::stod(field, &used);
    if (used == field.size()) return v;
  } catch (const std::exception&) {
  }
  throw FormatError("csv: '" + field + "' is not a number");
}

inline std::vector<EpochMetrics> metrics_from_csv(const std::string& text) {
  const CsvTable t = parse_csv(text);
  if (t.header != split_csv_line(kMetricsHeader)) throw FormatError("metrics csv: unexpected header");
  std::vector<EpochMetrics> log;
  for (const auto& r : t.rows) {
    EpochMetrics m;
    m.epoch = static_cast<std::size_t>(parse_csv_double(r[0]));
    m.train_loss = parse_csv_double(r[1]);
    m.train_acc = parse_csv_double(r[2]);
    m.eval_acc = parse_csv_double(r[3]);
    m.lr = parse_csv_double(r[4]);
    m.status = r[5];
    log.push_back(m);
  }
  return log;
}

}  // namespace dia
