#include "cel/folds.hpp"

#include <string>

#include "cel/errors.hpp"
#include "cel/rng.hpp"

namespace cel {

std::vector<int> kfold_split(std::span<const int> exposures, int k, std::uint64_t seed) {
  if (k < 2) throw ValidationError("k must be at least 2");
  if (exposures.size() < static_cast<std::size_t>(k)) throw ValidationError("fewer patients than folds");
  std::vector<std::size_t> treated, control;
  for (std::size_t i = 0; i < exposures.size(); ++i) (exposures[i] == 1 ? treated : control).push_back(i);
  if (treated.size() < static_cast<std::size_t>(k) || control.size() < static_cast<std::size_t>(k)) {
    throw ValidationError("each fold needs both exposure classes: " + std::to_string(treated.size()) + " treated, " +
                          std::to_string(control.size()) + " control for k=" + std::to_string(k));
  }
  Rng rng(derive_seed(seed, {0x666f6c64ULL}));
  rng.shuffle(treated);
  rng.shuffle(control);
  std::vector<int> fold(exposures.size(), -1);
  std::size_t cursor = 0;
  for (std::size_t i : treated) fold[i] = static_cast<int>(cursor++ % static_cast<std::size_t>(k));
  for (std::size_t i : control) fold[i] = static_cast<int>(cursor++ % static_cast<std::size_t>(k));
  return fold;
}

}  // namespace cel
