#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "tta/dataset.hpp"
#include "tta/model.hpp"
#include "tta/sampler.hpp"
#include "tta/streams.hpp"

namespace tta {

enum class Method {
  kSource,      // frozen source model
  kBnStats,     // test-batch normalization statistics
  kOnda,        // EMA of test statistics every `onda_frequency` batches
  kTent,        // test-batch stats + entropy minimization on gamma/beta
  kPseudoLabel, // test-batch stats + cross-entropy on argmax pseudo-labels
  kNote,        // IABN + PBRS
  kNoteStar,    // IABN adapted on incoming test batches, no memory
  kIabnOnly,    // IABN backbone, no adaptation
  kPbrsOnly,    // BN backbone (as IABN with alpha = inf) + PBRS adaptation
  kIabnRs,      // IABN + plain reservoir memory
  kIabnStar,    // BN backbone converted to IABN at test time, no adaptation
};

std::string method_name(Method method);
Method parse_method(const std::string& name);
std::vector<Method> all_methods();
// Normalization kind of the source checkpoint a method starts from.
NormKind required_norm(Method method);
bool is_batch_method(Method method);

struct AdaptConfig {
  Method method = Method::kNote;
  std::size_t memory_size = 64;  // N
  double momentum = 0.01;        // m
  double lr = 1e-4;
  double alpha = 4.0;
  std::size_t batch_size = 64;
  std::size_t onda_frequency = 10;
  double onda_decay = 0.1;
  // When false the memory-driven methods only infer.
  bool adapt = true;
  SamplingPolicy sampling = SamplingPolicy::kPredictionBalanced;

  void validate() const;
};

AdaptConfig default_config(Method method);

struct ErrorTrace {
  std::vector<int> true_labels;
  std::vector<int> predicted_labels;
  std::vector<double> cumulative_error;
  std::size_t running_errors = 0;

  void push(int truth, int predicted);
  std::size_t size() const { return true_labels.size(); }
  std::size_t errors() const;
  double final_error() const;
  // Columns: t,true_label,predicted_label,cumulative_error (t is 1-based).
  void write_csv(std::ostream& out) const;
};

// Per-sample NOTE engine: batch-free inference, memory insertion, and an
// adaptation step every N samples.
class NoteAdapter {
 public:
  NoteAdapter(Backbone model, AdaptConfig config, Rng rng);

  // Predicts x (B = 1) with the current state, then offers (x, prediction) to
  // the memory and adapts if N samples have been seen since the last step.
  Prediction infer(const Tensor& x);
  // EMA update of every IABN layer from the memory batch, followed by one
  // entropy-minimization Adam step on gamma/beta.
  void adapt_step();

  const Backbone& model() const { return model_; }
  Backbone& model() { return model_; }
  const MemoryBank& memory() const { return memory_; }
  const AdamState& optimizer() const { return optimizer_; }
  std::size_t samples_seen() const { return seen_; }
  std::size_t adaptations() const { return adaptations_; }

 private:
  Backbone model_;
  AdaptConfig config_;
  MemoryBank memory_;
  AdamState optimizer_;
  std::size_t seen_ = 0;
  std::size_t adaptations_ = 0;
};

// Entropy of the model's eval-mode predictions on x, averaged over samples.
double prediction_entropy(Backbone& model, const Tensor& x);

// Runs `config.method` over `target` in stream order starting from `source`
// (a copy is adapted; the argument is untouched) and scores every prediction.
ErrorTrace run_tta(const Backbone& source, const Dataset& target, const StreamOrder& stream,
                   const AdaptConfig& config, std::uint64_t seed);

// Variant that also returns the adapted model.
ErrorTrace run_tta(const Backbone& source, const Dataset& target, const StreamOrder& stream,
                   const AdaptConfig& config, std::uint64_t seed, Backbone* adapted);

}  // namespace tta
