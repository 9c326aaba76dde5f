#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>

#include <nlohmann/json.hpp>

#include "cel/cohort.hpp"

namespace cel {

nlohmann::json vocabulary_to_json(const Vocabulary& v);
Vocabulary vocabulary_from_json(const nlohmann::json& j);

nlohmann::json patient_to_json(const PatientRecord& p);
PatientRecord patient_from_json(const nlohmann::json& j);

/// Writes the JSONL form: vocabulary header on line 1, one patient per line.
/// Keys are emitted in sorted order; lines end with LF.
void write_cohort(const Cohort& cohort, std::ostream& out);
void write_cohort(const Cohort& cohort, const std::filesystem::path& path);

/// Parses and validates. Malformed lines raise ParseError with the line
/// number; invariant violations raise ValidationError naming the patient.
Cohort read_cohort(std::istream& in);
Cohort read_cohort(const std::filesystem::path& path);

std::string cohort_to_string(const Cohort& cohort);
Cohort cohort_from_string(const std::string& text);

}  // namespace cel
