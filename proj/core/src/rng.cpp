#include "cel/rng.hpp"

#include <cmath>
#include <numbers>

namespace cel {

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::uint64_t derive_seed(std::uint64_t master, std::initializer_list<std::uint64_t> path) {
  std::uint64_t state = master;
  std::uint64_t out = splitmix64(state);
  for (std::uint64_t coord : path) {
    state ^= out + coord * 0xD1B54A32D192ED03ULL;
    out = splitmix64(state);
  }
  return out;
}

double Rng::uniform() {
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

__extension__ using u128 = unsigned __int128;

std::uint64_t Rng::index(std::uint64_t n) {
  const u128 wide = static_cast<u128>(engine_()) * n;
  return static_cast<std::uint64_t>(wide >> 64);
}

int Rng::uniform_int(int lo, int hi) {
  return lo + static_cast<int>(index(static_cast<std::uint64_t>(hi - lo) + 1));
}

double Rng::normal() {
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace cel
