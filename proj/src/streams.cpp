#include "tta/streams.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <string>

#include "tta/error.hpp"

namespace tta {

std::vector<double> dirichlet_sample(std::span<const double> concentration, Rng& rng) {
  if (concentration.empty()) throw InputError("dirichlet: empty concentration vector");
  std::vector<double> logs;
  logs.reserve(concentration.size());
  for (double a : concentration) {
    if (!(a > 0.0) || !std::isfinite(a)) throw InputError("dirichlet: concentrations must be positive");
    logs.push_back(rng.log_gamma_variate(a));
  }
  // Normalize in log space so vanishing gamma draws stay well defined.
  const double mx = *std::max_element(logs.begin(), logs.end());
  std::vector<double> out(logs.size());
  double s = 0.0;
  for (std::size_t i = 0; i < logs.size(); ++i) {
    out[i] = std::exp(logs[i] - mx);
    s += out[i];
  }
  for (double& v : out) v /= s;
  return out;
}

std::vector<std::size_t> largest_remainder(std::span<const double> proportions,
                                           std::size_t total) {
  std::vector<std::size_t> counts(proportions.size());
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < proportions.size(); ++i) {
    const double exact = proportions[i] * static_cast<double>(total);
    counts[i] = static_cast<std::size_t>(std::floor(exact));
    assigned += counts[i];
    remainders.emplace_back(exact - std::floor(exact), i);
  }
  // Largest fractional part first; ties go to the lower index.
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; assigned < total; ++k, ++assigned) {
    ++counts[remainders[k % remainders.size()].second];
  }
  return counts;
}

StreamOrder make_dirichlet_stream(std::span<const int> labels, const StreamSpec& spec) {
  if (!(spec.delta > 0.0)) throw InputError("dirichlet stream: delta must be positive");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  if (by_class.empty()) throw InputError("dirichlet stream: empty dataset");
  const int max_label = by_class.rbegin()->first;
  if (by_class.begin()->first < 0) throw InputError("dirichlet stream: negative label");
  // Every class id in [0, max_label] must be populated.
  if (by_class.size() != static_cast<std::size_t>(max_label) + 1) {
    throw InputError("dirichlet stream: a class has no samples");
  }

  const std::size_t tokens = spec.tokens == 0 ? by_class.size() : spec.tokens;
  std::vector<double> prior = spec.prior;
  if (prior.empty()) prior.assign(tokens, 1.0 / static_cast<double>(tokens));
  if (prior.size() != tokens) throw InputError("dirichlet stream: prior length must equal tokens");
  const double psum = std::accumulate(prior.begin(), prior.end(), 0.0);
  if (std::abs(psum - 1.0) > 1e-9) throw InputError("dirichlet stream: prior must sum to 1");

  std::vector<double> concentration(tokens);
  for (std::size_t t = 0; t < tokens; ++t) concentration[t] = spec.delta * prior[t];

  Rng root(spec.seed);
  Rng proportions_rng = root.split("dirichlet-proportions");
  Rng shuffle_rng = root.split("token-shuffle");

  std::vector<std::vector<std::size_t>> token_items(tokens);
  for (const auto& [cls, items] : by_class) {
    const auto q = dirichlet_sample(concentration, proportions_rng);
    const auto counts = largest_remainder(q, items.size());
    std::size_t cursor = 0;
    for (std::size_t t = 0; t < tokens; ++t) {
      for (std::size_t k = 0; k < counts[t]; ++k) token_items[t].push_back(items[cursor++]);
    }
  }
  StreamOrder order;
  order.reserve(labels.size());
  for (auto& items : token_items) {
    std::shuffle(items.begin(), items.end(), shuffle_rng.engine());
    order.insert(order.end(), items.begin(), items.end());
  }
  return order;
}

StreamOrder make_iid_stream(std::span<const int> labels, std::uint64_t seed) {
  StreamOrder order(labels.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = Rng(seed).split("iid-shuffle");
  std::shuffle(order.begin(), order.end(), rng.engine());
  return order;
}

StreamOrder make_sorted_stream(std::span<const int> labels) {
  StreamOrder order(labels.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return labels[a] < labels[b]; });
  return order;
}

void write_stream_order(std::ostream& out, const StreamOrder& order) {
  for (std::size_t i : order) out << i << '\n';
}

StreamOrder read_stream_order(std::istream& in) {
  StreamOrder order;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      std::size_t pos = 0;
      const unsigned long long v = std::stoull(line, &pos);
      if (pos != line.size()) throw InputError("trailing characters");
      order.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw InputError("malformed stream index line: '" + line + "'");
    }
  }
  return order;
}

}  // namespace tta
