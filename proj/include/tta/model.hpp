#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <variant>
#include <vector>

#include "tta/dataset.hpp"
#include "tta/normalization.hpp"
#include "tta/numerics.hpp"

namespace tta {

enum class NormKind { kBatchNorm, kInstanceAware };

std::string norm_kind_name(NormKind kind);
NormKind parse_norm_kind(const std::string& name);

struct BackboneSpec {
  std::size_t input_channels = 1;
  std::size_t input_length = 32;
  std::vector<std::size_t> conv_channels{8, 16};
  std::size_t kernel = 5;
  std::size_t classes = 10;
  NormKind norm = NormKind::kBatchNorm;
  double alpha = 4.0;  // IABN only

  void validate() const;
};

struct TrainingMeta {
  std::uint64_t seed = 0;
  std::size_t epochs = 0;
  double lr = 0.0;
  std::size_t batch_size = 0;
  double final_train_accuracy = 0.0;
};

using NormLayer = std::variant<BatchNorm1d, IabnLayer>;

struct ConvBlock {
  Conv1dLayer conv;
  NormLayer norm;
};

// [conv1d -> norm -> relu] x K -> global average pool -> dense.
//
// Forward passes that record onto a tape capture pointers into the backbone:
// the backbone must outlive the tape and must not be moved while one is live.
class Backbone {
 public:
  Backbone() = default;

  const BackboneSpec& spec() const { return spec_; }
  NormKind norm_kind() const { return spec_.norm; }
  std::size_t num_blocks() const { return blocks_.size(); }
  const std::vector<ConvBlock>& blocks() const { return blocks_; }
  const DenseLayer& classifier() const { return classifier_; }

  // Logits of shape (B, classes, 1).
  Tensor forward(const Tensor& x, NormMode mode, GradientTape* tape = nullptr);
  // Eval-mode forward returning the input of every normalization layer.
  std::vector<Tensor> norm_inputs(const Tensor& x);

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  // gamma/beta of every normalization layer.
  std::vector<Parameter*> affine_parameters();
  std::vector<NormState*> norm_states();
  std::vector<const NormState*> norm_states() const;

  std::size_t parameter_count() const;
  std::size_t affine_parameter_count() const;
  // Sum of channels over all normalization layers.
  std::size_t norm_channels() const;

  void set_all_trainable(bool trainable);
  void freeze_all_but_affine();
  void zero_grad();

  bool stats_ready() const;
  // Replaces every BN layer by an IABN layer sharing its state. Layers that
  // are already IABN are left as they are.
  void convert_bn_to_iabn(double alpha);

 private:
  friend Backbone build_backbone(const BackboneSpec& spec, std::uint64_t seed);

  BackboneSpec spec_;
  std::vector<ConvBlock> blocks_;
  DenseLayer classifier_;
};

Backbone build_backbone(const BackboneSpec& spec, std::uint64_t seed);

struct TrainConfig {
  std::size_t epochs = 30;
  double lr = 0.1;
  std::size_t batch_size = 64;
  double momentum = 0.9;
  std::uint64_t seed = 0;
};

// SGD with momentum, cosine-annealed learning rate over all steps,
// cross-entropy loss, normalization layers in train mode.
TrainingMeta train_source(Backbone& model, const Dataset& data, const TrainConfig& config);

struct Prediction {
  int label = 0;
  std::vector<double> probabilities;
};

// Predictions for every sample of x. kTestBatch requires B >= 2: a single
// sample has no batch to estimate statistics from.
std::vector<Prediction> predict_batch(Backbone& model, const Tensor& x,
                                      NormMode mode = NormMode::kEval);
// Single-sample inference (eval mode).
Prediction predict(Backbone& model, const Tensor& x);

double accuracy(Backbone& model, const Dataset& data, NormMode mode = NormMode::kEval);

// Checkpoint byte layout (all integers little-endian):
//   magic    8 bytes  "TTACKPT\0"
//   version  u32      1
//   sections u32      count, then per section:
//     tag    4 bytes  ASCII
//     length u64      payload bytes
//     payload
// Sections: "ARCH" JSON architecture descriptor, "META" JSON training
// metadata, "PARM" parameter blobs (u64 count, then per parameter: u32 name
// length, name, u64 value count, f64 values), "STAT" running statistics (u64
// layer count, then per layer: u64 channels, f64 mean[C], f64 variance[C],
// u8 stats_ready).
void write_checkpoint(std::ostream& out, const Backbone& model, const TrainingMeta& meta);
Backbone read_checkpoint(std::istream& in, TrainingMeta* meta = nullptr);
void save_checkpoint(const std::string& path, const Backbone& model, const TrainingMeta& meta);
Backbone load_checkpoint(const std::string& path, TrainingMeta* meta = nullptr);

}  // namespace tta
