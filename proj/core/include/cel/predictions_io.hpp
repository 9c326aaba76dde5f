#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "cel/estimators.hpp"

namespace cel {

struct PredictionsFile {
  std::vector<estimators::PredictionTriple> rows;
  /// From an optional leading "# config_hash: <hex>" line.
  std::optional<std::string> config_hash;
};

/// Columns patient_id,fold,q0,q1,g,t,y; probabilities printed with %.17g.
void write_predictions(const std::vector<estimators::PredictionTriple>& rows, std::ostream& out,
                       const std::optional<std::string>& config_hash = std::nullopt);
void write_predictions(const std::vector<estimators::PredictionTriple>& rows, const std::filesystem::path& path,
                       const std::optional<std::string>& config_hash = std::nullopt);

/// Throws ParseError with the line number on a malformed row and
/// ValidationError when a probability leaves [0, 1] or t, y are not binary.
PredictionsFile read_predictions(std::istream& in);
PredictionsFile read_predictions(const std::filesystem::path& path);

}  // namespace cel
