#include "tta/dataset.hpp"

#include <algorithm>
#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>

#include "tta/error.hpp"
#include "tta/format.hpp"

namespace tta {

std::size_t Dataset::num_classes() const {
  if (labels.empty()) return 0;
  return static_cast<std::size_t>(*std::max_element(labels.begin(), labels.end())) + 1;
}

void Dataset::validate() const {
  if (inputs.batch() != labels.size()) throw ConfigError("dataset: one label per sample required");
  for (int y : labels) {
    if (y < 0) throw InputError("dataset: negative label");
  }
}

void write_dataset_csv(std::ostream& out, const Dataset& data) {
  data.validate();
  out << "label";
  for (std::size_t c = 0; c < data.inputs.channels(); ++c)
    for (std::size_t l = 0; l < data.inputs.length(); ++l) out << ",c" << c << "_l" << l;
  out << '\n';
  for (std::size_t b = 0; b < data.size(); ++b) {
    out << data.labels[b];
    for (double v : data.inputs.sample_span(b)) out << ',' << format_double(v, 17);
    out << '\n';
  }
}

Dataset read_dataset_csv(std::istream& in) {
  std::string header;
  if (!std::getline(in, header) || header.rfind("label", 0) != 0) {
    throw InputError("dataset CSV: missing 'label,...' header");
  }
  std::size_t channels = 0;
  std::size_t length = 0;
  {
    std::stringstream hs(header);
    std::string col;
    std::getline(hs, col, ',');
    while (std::getline(hs, col, ',')) {
      std::size_t c = 0;
      std::size_t l = 0;
      if (std::sscanf(col.c_str(), "c%zu_l%zu", &c, &l) != 2) {
        throw InputError("dataset CSV: bad column '" + col + "'");
      }
      channels = std::max(channels, c + 1);
      length = std::max(length, l + 1);
    }
  }
  if (channels == 0 || length == 0) throw InputError("dataset CSV: no feature columns");
  Dataset data;
  std::vector<double> values;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ls(line);
    std::string cell;
    std::getline(ls, cell, ',');
    try {
      data.labels.push_back(std::stoi(cell));
      std::size_t n = 0;
      while (std::getline(ls, cell, ',')) {
        values.push_back(std::stod(cell));
        ++n;
      }
      if (n != channels * length) throw InputError("wrong column count");
    } catch (const std::exception&) {
      throw InputError("dataset CSV: malformed row " + std::to_string(data.labels.size()));
    }
  }
  data.inputs = Tensor({data.labels.size(), channels, length}, std::move(values));
  data.validate();
  return data;
}

}  // namespace tta
