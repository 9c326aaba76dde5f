#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace cel {

/// One step of the splitmix64 sequence; advances `state`.
std::uint64_t splitmix64(std::uint64_t& state);

/// Derive an independent stream seed from a master seed and a path of stream
/// coordinates (e.g. {purpose, patient index}). Pure function of its inputs.
std::uint64_t derive_seed(std::uint64_t master, std::initializer_list<std::uint64_t> path);

/// Seeded pseudo-random source. Conversions to doubles and bounded integers are
/// done here rather than through <random> distributions so that streams are
/// identical across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  /// Uniform on [0, 1) with 53 random bits.
  double uniform();
  bool bernoulli(double p) { return uniform() < p; }
  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t index(std::uint64_t n);
  /// Uniform integer in [lo, hi].
  int uniform_int(int lo, int hi);
  /// Standard normal via Box-Muller (no cached second value).
  double normal();

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[index(i)]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace cel
