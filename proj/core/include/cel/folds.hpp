#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace cel {

/// Exposure-stratified k-fold assignment. Treated patients are dealt round
/// robin over a seeded shuffle, then controls continue the rotation, so fold
/// sizes differ by at most one and each fold's treated count is within one of
/// the others. Throws ValidationError when n < k or when a fold would lack an
/// exposure class.
std::vector<int> kfold_split(std::span<const int> exposures, int k, std::uint64_t seed);

}  // namespace cel
