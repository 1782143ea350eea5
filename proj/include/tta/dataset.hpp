#pragma once

#include <cstddef>
#include <iosfwd>
#include <vector>

#include "tta/tensor.hpp"

namespace tta {

// Labeled samples: inputs is (N, C, L), one label per sample.
struct Dataset {
  Tensor inputs;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t num_classes() const;
  void validate() const;
};

// CSV with header "label,c0_l0,c0_l1,...". Channel count and length are
// recovered from the header.
void write_dataset_csv(std::ostream& out, const Dataset& data);
Dataset read_dataset_csv(std::istream& in);

}  // namespace tta
