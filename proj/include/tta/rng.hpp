#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string_view>

namespace tta {

// Seedable 64-bit generator (mt19937_64).
//
// Stream splitting: `split(tag)` returns a child generator seeded with
// splitmix64(seed ^ fnv1a64(tag)). Children depend only on the parent's seed
// and the tag, never on how many numbers the parent has drawn, so adding a new
// consumer never perturbs existing streams.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  std::uint64_t seed() const { return seed_; }
  Rng split(std::string_view tag) const;
  Rng split(std::uint64_t index) const;

  // Uniform on [0, 1).
  double uniform();
  double normal(double mean = 0.0, double stddev = 1.0);
  // Uniform on {0, ..., n-1}; n must be positive.
  std::size_t index(std::size_t n);
  // Logarithm of a Gamma(shape, 1) variate (Marsaglia-Tsang, with the
  // U^(1/shape) boost for shape < 1 applied in log space so tiny shapes do
  // not underflow).
  double log_gamma_variate(double shape);

  std::mt19937_64& engine() { return engine_; }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t fnv1a64(std::string_view text);

}  // namespace tta
