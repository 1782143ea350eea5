#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "tta/rng.hpp"
#include "tta/tensor.hpp"

namespace tta {

// A named block of trainable scalars with its gradient accumulator.
struct Parameter {
  std::string name;
  std::vector<double> value;
  std::vector<double> grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, std::size_t count, double fill = 0.0)
      : name(std::move(n)), value(count, fill), grad(count, 0.0) {}

  std::size_t size() const { return value.size(); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
};

// Records backward closures in forward order. `backward` replays them in
// exact reverse order, feeding each closure the gradient of the loss with
// respect to that op's output and receiving the gradient w.r.t. its input.
class GradientTape {
 public:
  using BackwardFn = std::function<Tensor(const Tensor& upstream)>;

  void record(std::string op, BackwardFn fn);
  bool empty() const { return entries_.empty(); }
  std::size_t size() const { return entries_.size(); }
  std::vector<std::string> ops() const;

  // Seeds the last op (a scalar loss) with `loss_grad`. Returns the gradient
  // w.r.t. the first recorded op's input. Consumes the tape.
  Tensor backward(double loss_grad = 1.0);
  Tensor backward(const Tensor& upstream);

 private:
  struct Entry {
    std::string op;
    BackwardFn fn;
  };
  std::vector<Entry> entries_;
};

// y = W x + b on the flattened channel*position axis; output shape (B, out, 1).
class DenseLayer {
 public:
  DenseLayer() = default;
  DenseLayer(std::size_t in_features, std::size_t out_features);

  std::size_t in_features() const { return in_; }
  std::size_t out_features() const { return out_; }
  Parameter& weight() { return weight_; }
  const Parameter& weight() const { return weight_; }
  Parameter& bias() { return bias_; }
  const Parameter& bias() const { return bias_; }

  // He-style uniform init: U(-sqrt(6/fan_in), sqrt(6/fan_in)) weights, zero bias.
  void init(Rng& rng);
  Tensor forward(const Tensor& x, GradientTape* tape);

 private:
  std::size_t in_ = 0;
  std::size_t out_ = 0;
  Parameter weight_;
  Parameter bias_;
};

// Valid-padding 1D cross-correlation.
class Conv1dLayer {
 public:
  Conv1dLayer() = default;
  Conv1dLayer(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
              std::size_t stride = 1);

  std::size_t in_channels() const { return in_; }
  std::size_t out_channels() const { return out_; }
  std::size_t kernel() const { return kernel_; }
  std::size_t stride() const { return stride_; }
  std::size_t output_length(std::size_t input_length) const;

  Parameter& weight() { return weight_; }
  const Parameter& weight() const { return weight_; }
  Parameter& bias() { return bias_; }
  const Parameter& bias() const { return bias_; }

  void init(Rng& rng);
  Tensor forward(const Tensor& x, GradientTape* tape);

 private:
  std::size_t in_ = 0;
  std::size_t out_ = 0;
  std::size_t kernel_ = 0;
  std::size_t stride_ = 1;
  Parameter weight_;  // (out, in, kernel)
  Parameter bias_;
};

Tensor relu(const Tensor& x, GradientTape* tape);
// Mean over positions; output length 1.
Tensor global_average_pool(const Tensor& x, GradientTape* tape);

// Row-wise softmax over the channel axis of a (B, K, 1) logits tensor,
// max-subtracted. Returned as B rows of K probabilities.
std::vector<std::vector<double>> softmax(const Tensor& logits);

// Mean over the batch of -log softmax(logits)[label].
double softmax_cross_entropy(const Tensor& logits, std::span<const int> labels,
                             GradientTape* tape);
double softmax_cross_entropy(std::span<const double> logits, int label);

// Mean Shannon entropy of simplex rows (0 log 0 := 0).
double entropy_loss(const std::vector<std::vector<double>>& probabilities);
// Mean entropy of softmax(logits); records the fused softmax+entropy op.
double entropy_from_logits(const Tensor& logits, GradientTape* tape);

inline constexpr double kEntropyClamp = 1e-12;

class AdamState {
 public:
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  std::size_t step_count() const { return step_; }
  std::size_t tracked_scalars() const;

  // Updates every trainable parameter in `params` from its grad. The set and
  // shapes of trainable parameters must stay fixed across calls.
  void step(std::span<Parameter* const> params, double lr);

 private:
  std::size_t step_ = 0;
  std::vector<std::vector<double>> first_;
  std::vector<std::vector<double>> second_;
};

// SGD with classical momentum; used for source training.
class SgdMomentum {
 public:
  explicit SgdMomentum(double momentum = 0.9) : momentum_(momentum) {}
  void step(std::span<Parameter* const> params, double lr);

 private:
  double momentum_;
  std::vector<std::vector<double>> velocity_;
};

// Central differences (f(x+h) - f(x-h)) / 2h for every coordinate.
std::vector<double> finite_difference_grad(
    const std::function<double(std::span<const double>)>& loss, std::span<const double> params,
    double h);

}  // namespace tta
