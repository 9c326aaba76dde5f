#include "cel/cohort_io.hpp"

#include <fstream>
#include <sstream>

#include "cel/errors.hpp"

namespace cel {

using nlohmann::json;

json vocabulary_to_json(const Vocabulary& v) {
  json tokens = json::array();
  for (const auto& t : v.tokens()) {
    tokens.push_back({{"id", t.id}, {"label", t.label}, {"category", std::string(to_string(t.category))}});
  }
  json groups = json::object();
  for (const auto& [name, members] : v.groups()) groups[name] = members;
  json protected_ids = json::array();
  for (int p : v.protected_set()) protected_ids.push_back(p);
  return {{"tokens", tokens}, {"protected", protected_ids}, {"groups", groups}};
}

Vocabulary vocabulary_from_json(const json& j) {
  Vocabulary v;
  const auto& tokens = j.at("tokens");
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto& t = tokens[i];
    const int id = t.at("id").get<int>();
    if (id != static_cast<int>(i)) throw ValidationError("token ids must be dense and ordered");
    v.add_token(t.at("label").get<std::string>(), parse_token_category(t.at("category").get<std::string>()));
  }
  for (const auto& p : j.at("protected")) v.add_protected(p.get<int>());
  for (const auto& [name, members] : j.at("groups").items()) {
    for (const auto& m : members) v.assign_group(m.get<int>(), name);
  }
  v.validate();
  return v;
}

json patient_to_json(const PatientRecord& p) {
  json enc = json::array();
  for (const auto& e : p.encounters) enc.push_back({{"code", e.code}, {"age", e.age}, {"year", e.year}});
  json j = {{"id", p.id},
            {"sex", p.statics.sex},
            {"region", p.statics.region},
            {"smoking", p.statics.smoking},
            {"encounters", enc},
            {"t", p.t},
            {"y", p.y}};
  if (p.potential_outcomes) {
    j["y0"] = p.potential_outcomes->first;
    j["y1"] = p.potential_outcomes->second;
  }
  if (p.lambda) j["lambda"] = *p.lambda;
  return j;
}

PatientRecord patient_from_json(const json& j) {
  PatientRecord p;
  p.id = j.at("id").get<std::string>();
  p.statics.sex = j.at("sex").get<int>();
  p.statics.region = j.at("region").get<int>();
  p.statics.smoking = j.at("smoking").get<int>();
  const auto& enc = j.at("encounters");
  p.encounters.reserve(enc.size());
  int position = 0;
  for (const auto& e : enc) {
    p.encounters.push_back(Encounter{e.at("code").get<int>(), e.at("age").get<int>(), e.at("year").get<int>(), position++});
  }
  p.t = j.at("t").get<int>();
  p.y = j.at("y").get<int>();
  const bool has_y0 = j.contains("y0");
  const bool has_y1 = j.contains("y1");
  if (has_y0 != has_y1) throw ValidationError("patient '" + p.id + "': y0 and y1 must appear together");
  if (has_y0) p.potential_outcomes = std::make_pair(j.at("y0").get<int>(), j.at("y1").get<int>());
  if (j.contains("lambda")) p.lambda = j.at("lambda").get<double>();
  return p;
}

void write_cohort(const Cohort& cohort, std::ostream& out) {
  json header = vocabulary_to_json(cohort.vocabulary);
  header["provenance"] = cohort.provenance;
  out << header.dump() << '\n';
  for (const auto& p : cohort.patients) out << patient_to_json(p).dump() << '\n';
}

void write_cohort(const Cohort& cohort, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write_cohort(cohort, out);
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

Cohort read_cohort(std::istream& in) {
  Cohort cohort;
  std::string line;
  std::size_t lineno = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw ParseError(e.what(), lineno);
    }
    try {
      if (!have_header) {
        cohort.vocabulary = vocabulary_from_json(j);
        cohort.provenance = j.value("provenance", std::string("ingested"));
        have_header = true;
      } else {
        cohort.patients.push_back(patient_from_json(j));
      }
    } catch (const json::exception& e) {
      throw ParseError(e.what(), lineno);
    }
  }
  if (!have_header) throw ParseError("missing vocabulary header", lineno == 0 ? 1 : lineno);
  cohort.validate();
  return cohort;
}

Cohort read_cohort(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return read_cohort(in);
}

std::string cohort_to_string(const Cohort& cohort) {
  std::ostringstream os;
  write_cohort(cohort, os);
  return os.str();
}

Cohort cohort_from_string(const std::string& text) {
  std::istringstream is(text);
  return read_cohort(is);
}

}  // namespace cel
