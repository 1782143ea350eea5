#pragma once

#include <cstddef>
#include <map>
#include <ostream>
#include <set>
#include <vector>

#include "tta/rng.hpp"
#include "tta/tensor.hpp"

namespace tta {

enum class SamplingPolicy {
  kPredictionBalanced,  // PBRS
  kReservoir,           // classic time-uniform reservoir
};

// Capacity-N memory of (sample, predicted label) pairs. Only predicted labels
// are ever stored.
class MemoryBank {
 public:
  struct Entry {
    Tensor sample;  // B = 1
    int label = 0;
    std::size_t offer_index = 0;  // 1-based position in the offered stream
  };

  MemoryBank(std::size_t capacity, Rng rng);

  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  bool full() const { return entries_.size() >= capacity_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t offers() const { return offers_; }

  // n[c]: samples with predicted class c offered so far (stored or not).
  const std::map<int, std::size_t>& seen() const { return seen_; }
  // m[c]: stored entries with label c.
  std::map<int, std::size_t> class_counts() const;
  // Classes attaining the maximum stored count.
  std::set<int> majority_classes() const;

  // Prediction-balanced reservoir sampling. Returns true if the sample was
  // stored.
  bool offer_prediction_balanced(const Tensor& sample, int label);
  // Time-uniform reservoir sampling (Algorithm R). Returns true if stored.
  bool offer_reservoir(const Tensor& sample, int label);
  bool offer(SamplingPolicy policy, const Tensor& sample, int label);

  // Stored samples stacked in slot order, with their predicted labels.
  Tensor batch() const;
  std::vector<int> labels() const;

  // CSV rows "offer_index,label,slot".
  void dump_csv(std::ostream& out) const;

 private:
  std::size_t pick_slot_with_label(const std::set<int>& labels);
  Entry make_entry(const Tensor& sample, int label) const;

  std::size_t capacity_;
  Rng rng_;
  std::vector<Entry> entries_;
  std::map<int, std::size_t> seen_;
  std::size_t offers_ = 0;
};

}  // namespace tta
