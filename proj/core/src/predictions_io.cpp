#include "cel/predictions_io.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "cel/errors.hpp"

namespace cel {

namespace {

constexpr const char* kHeader = "patient_id,fold,q0,q1,g,t,y";
constexpr const char* kHashKey = "# config_hash: ";

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_double(const std::string& s, std::size_t line) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ParseError("not a number: '" + s + "'", line);
  }
}

int parse_int(const std::string& s, std::size_t line) {
  int v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) throw ParseError("not an integer: '" + s + "'", line);
  return v;
}

}  // namespace

void write_predictions(const std::vector<estimators::PredictionTriple>& rows, std::ostream& out,
                       const std::optional<std::string>& config_hash) {
  if (config_hash) out << kHashKey << *config_hash << "\n";
  out << kHeader << "\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, ",%d,%.17g,%.17g,%.17g,%d,%d\n", r.fold, r.q0, r.q1, r.g, r.t, r.y);
    out << r.patient_id << buf;
  }
}

void write_predictions(const std::vector<estimators::PredictionTriple>& rows, const std::filesystem::path& path,
                       const std::optional<std::string>& config_hash) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write_predictions(rows, out, config_hash);
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

PredictionsFile read_predictions(std::istream& in) {
  PredictionsFile file;
  std::string line;
  std::size_t n = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++n;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line.rfind("#", 0) == 0) {
      if (line.rfind(kHashKey, 0) == 0) file.config_hash = line.substr(std::string(kHashKey).size());
      continue;
    }
    if (!header) {
      if (line != kHeader) throw ParseError("expected header '" + std::string(kHeader) + "'", n);
      header = true;
      continue;
    }
    const auto f = split(line);
    if (f.size() != 7) throw ParseError("expected 7 fields, found " + std::to_string(f.size()), n);
    estimators::PredictionTriple r;
    r.patient_id = f[0];
    r.fold = parse_int(f[1], n);
    r.q0 = parse_double(f[2], n);
    r.q1 = parse_double(f[3], n);
    r.g = parse_double(f[4], n);
    r.t = parse_int(f[5], n);
    r.y = parse_int(f[6], n);
    for (double p : {r.q0, r.q1, r.g}) {
      if (!(p >= 0.0 && p <= 1.0)) throw ValidationError("line " + std::to_string(n) + ": probability outside [0, 1]");
    }
    if ((r.t != 0 && r.t != 1) || (r.y != 0 && r.y != 1)) {
      throw ValidationError("line " + std::to_string(n) + ": t and y must be 0 or 1");
    }
    file.rows.push_back(std::move(r));
  }
  if (!header) throw ParseError("missing header", n == 0 ? 1 : n);
  return file;
}

PredictionsFile read_predictions(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return read_predictions(in);
}

}  // namespace cel
