#include "tta/sampler.hpp"

#include <algorithm>

#include "tta/error.hpp"

namespace tta {

MemoryBank::MemoryBank(std::size_t capacity, Rng rng) : capacity_(capacity), rng_(rng) {
  if (capacity == 0) throw ConfigError("memory capacity must be positive");
  entries_.reserve(capacity);
}

std::map<int, std::size_t> MemoryBank::class_counts() const {
  std::map<int, std::size_t> counts;
  for (const auto& e : entries_) ++counts[e.label];
  return counts;
}

std::set<int> MemoryBank::majority_classes() const {
  if (entries_.empty()) throw StateError("majority classes of an empty memory");
  const auto counts = class_counts();
  std::size_t best = 0;
  for (const auto& [c, n] : counts) best = std::max(best, n);
  std::set<int> out;
  for (const auto& [c, n] : counts) {
    if (n == best) out.insert(c);
  }
  return out;
}

MemoryBank::Entry MemoryBank::make_entry(const Tensor& sample, int label) const {
  if (sample.batch() != 1) throw InputError("memory entries are single samples (B = 1)");
  if (!entries_.empty() && (sample.channels() != entries_.front().sample.channels() ||
                            sample.length() != entries_.front().sample.length())) {
    throw ConfigError("sample shape differs from stored samples");
  }
  return Entry{sample, label, offers_};
}

std::size_t MemoryBank::pick_slot_with_label(const std::set<int>& labels) {
  std::vector<std::size_t> slots;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (labels.contains(entries_[i].label)) slots.push_back(i);
  }
  return slots[rng_.index(slots.size())];
}

bool MemoryBank::offer_prediction_balanced(const Tensor& sample, int label) {
  ++offers_;
  const std::size_t seen = ++seen_[label];
  if (!full()) {
    entries_.push_back(make_entry(sample, label));
    return true;
  }
  const auto majority = majority_classes();
  if (!majority.contains(label)) {
    const std::size_t slot = pick_slot_with_label(majority);
    entries_[slot] = make_entry(sample, label);
    return true;
  }
  const auto counts = class_counts();
  const double in_memory = static_cast<double>(counts.at(label));
  if (rng_.uniform() < in_memory / static_cast<double>(seen)) {
    const std::size_t slot = pick_slot_with_label({label});
    entries_[slot] = make_entry(sample, label);
    return true;
  }
  return false;
}

bool MemoryBank::offer_reservoir(const Tensor& sample, int label) {
  ++offers_;
  ++seen_[label];
  if (!full()) {
    entries_.push_back(make_entry(sample, label));
    return true;
  }
  // Keep with probability N/t by drawing a slot from [0, t).
  const std::size_t j = rng_.index(offers_);
  if (j < capacity_) {
    entries_[j] = make_entry(sample, label);
    return true;
  }
  return false;
}

bool MemoryBank::offer(SamplingPolicy policy, const Tensor& sample, int label) {
  return policy == SamplingPolicy::kPredictionBalanced ? offer_prediction_balanced(sample, label)
                                                       : offer_reservoir(sample, label);
}

Tensor MemoryBank::batch() const {
  if (entries_.empty()) throw StateError("memory is empty");
  std::vector<Tensor> samples;
  samples.reserve(entries_.size());
  for (const auto& e : entries_) samples.push_back(e.sample);
  return Tensor::stack(samples);
}

std::vector<int> MemoryBank::labels() const {
  std::vector<int> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.label);
  return out;
}

void MemoryBank::dump_csv(std::ostream& out) const {
  out << "offer_index,label,slot\n";
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    out << entries_[i].offer_index << ',' << entries_[i].label << ',' << i << '\n';
  }
}

}  // namespace tta
