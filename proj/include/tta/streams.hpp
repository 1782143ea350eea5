#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tta/rng.hpp"

namespace tta {

// Temporally-correlated stream construction: per class c, q_c ~ Dir(delta * p)
// splits the class's items across `tokens` consecutive segments.
struct StreamSpec {
  double delta = 0.1;
  // Prior over tokens; empty means uniform.
  std::vector<double> prior;
  // Number of tokens; 0 means "one per class".
  std::size_t tokens = 0;
  std::uint64_t seed = 0;
};

// Dataset indices in presentation order.
using StreamOrder = std::vector<std::size_t>;

std::vector<double> dirichlet_sample(std::span<const double> concentration, Rng& rng);

StreamOrder make_dirichlet_stream(std::span<const int> labels, const StreamSpec& spec);
StreamOrder make_iid_stream(std::span<const int> labels, std::uint64_t seed);
StreamOrder make_sorted_stream(std::span<const int> labels);

// Largest-remainder apportionment of `total` items by `proportions`.
std::vector<std::size_t> largest_remainder(std::span<const double> proportions,
                                           std::size_t total);

// Newline-delimited index files.
void write_stream_order(std::ostream& out, const StreamOrder& order);
StreamOrder read_stream_order(std::istream& in);

}  // namespace tta
