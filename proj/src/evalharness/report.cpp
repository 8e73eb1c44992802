#include <cmath>
#include <cstdio>
#include <sstream>

#include "advdef/evalharness.hpp"

namespace advdef::eval {

namespace {

std::string fixed3(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream s(line);
  while (std::getline(s, cur, sep)) out.push_back(cur);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

void require_rows(const SweepResult& r) {
  if (r.rows.empty()) throw std::invalid_argument("report: empty sweep result");
}

}  // namespace

std::string emit_csv(const SweepResult& result) {
  require_rows(result);
  std::string out = "epsilon,l2_diff";
  for (const auto& c : result.columns) {
    if (c.find_first_of(",\n\"") != std::string::npos)
      throw std::invalid_argument("report: column name '" + c + "' cannot be written to csv");
    out += "," + c;
  }
  out += "\n";
  for (const auto& row : result.rows) {
    out += fixed3(row.epsilon) + "," + fixed3(row.l2_diff);
    for (const auto& cell : row.cells) out += "," + fixed3(cell.accuracy);
    out += "\n";
  }
  return out;
}

std::string emit_markdown(const SweepResult& result) {
  require_rows(result);
  std::string out = "| Epsilon | L2 diff |";
  std::string rule = "|---:|---:|";
  for (const auto& c : result.columns) {
    out += " " + c + " |";
    rule += "---:|";
  }
  out += "\n" + rule + "\n";
  for (const auto& row : result.rows) {
    out += "| " + fixed3(row.epsilon) + " | " + fixed3(row.l2_diff) + " |";
    for (const auto& cell : row.cells) out += " " + fixed3(cell.accuracy) + " |";
    out += "\n";
  }
  return out;
}

SweepResult parse_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw std::invalid_argument("csv: missing header");
  auto header = split(line, ',');
  if (header.size() < 2 || header[0] != "epsilon" || header[1] != "l2_diff")
    throw std::invalid_argument("csv: header must start with epsilon,l2_diff");
  SweepResult r;
  r.columns.assign(header.begin() + 2, header.end());
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto fields = split(line, ',');
    if (fields.size() != header.size())
      throw std::invalid_argument("csv line " + std::to_string(lineno) + ": expected " + std::to_string(header.size()) +
                                  " fields, got " + std::to_string(fields.size()));
    auto num = [&](const std::string& f) {
      try {
        std::size_t used = 0;
        double v = std::stod(f, &used);
        if (used != f.size()) throw std::invalid_argument(f);
        return v;
      } catch (const std::exception&) {
        throw std::invalid_argument("csv line " + std::to_string(lineno) + ": bad number '" + f + "'");
      }
    };
    SweepRow row;
    row.epsilon = num(fields[0]);
    row.l2_diff = num(fields[1]);
    for (std::size_t i = 2; i < fields.size(); ++i) {
      SweepCell cell;
      cell.accuracy = num(fields[i]);
      row.cells.push_back(cell);
    }
    r.rows.push_back(std::move(row));
  }
  return r;
}

}  // namespace advdef::eval
