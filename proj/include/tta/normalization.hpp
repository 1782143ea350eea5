#pragma once

#include <cstddef>
#include <limits>
#include <vector>

#include "tta/numerics.hpp"
#include "tta/tensor.hpp"

namespace tta {

// Per-channel mean and variance.
struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> variance;

  ChannelStats() = default;
  explicit ChannelStats(std::size_t channels, double mean_fill = 0.0, double var_fill = 1.0)
      : mean(channels, mean_fill), variance(channels, var_fill) {}
  std::size_t channels() const { return mean.size(); }
};

// Per-(sample, channel) statistics stored row-major as B x C.
struct InstanceStats {
  std::size_t batch = 0;
  std::size_t channels = 0;
  std::vector<double> mean;
  std::vector<double> variance;

  double mean_at(std::size_t b, std::size_t c) const { return mean[b * channels + c]; }
  double variance_at(std::size_t b, std::size_t c) const { return variance[b * channels + c]; }
};

// Standard deviations of the sampling distributions of the instance mean and
// instance variance, assuming positions are drawn from N(mean, variance).
struct SamplingStdDevs {
  std::vector<double> mean;
  std::vector<double> variance;
};

// Per-channel mean and biased variance over all (b, l).
ChannelStats batch_stats(const Tensor& f);
// Per-(b, c) mean and biased variance over l. Requires L >= 2.
InstanceStats instance_stats(const Tensor& f);

// psi(x; lam): x - lam above lam, x + lam below -lam, 0 in [-lam, lam].
double soft_shrink(double x, double lam);

// alpha = infinity turns every shrinkage threshold infinite (pure BN).
inline constexpr double kInfiniteAlpha = std::numeric_limits<double>::infinity();

SamplingStdDevs sampling_std_devs(const ChannelStats& reference, std::size_t length);

// Shrinkage-corrected statistics used to normalize each (b, c) row:
//   mean = ref.mean + psi(inst.mean - ref.mean; alpha * s_mean)
//   var  = ref.var  + psi(inst.var  - ref.var;  alpha * s_var)
InstanceStats iabn_correct_stats(const InstanceStats& inst, const ChannelStats& reference,
                                 double alpha, std::size_t length);

enum class NormMode {
  kTrain,      // batch statistics, running statistics updated
  kEval,       // running statistics
  kTestBatch,  // batch statistics, running statistics untouched
};

// State shared by BN and IABN layers.
struct NormState {
  ChannelStats running;
  Parameter gamma;
  Parameter beta;
  double epsilon = 1e-5;
  double train_momentum = 0.1;
  // False until running statistics are populated by training, EMA updates,
  // or a checkpoint load.
  bool stats_ready = false;

  NormState() = default;
  explicit NormState(std::size_t channels);
  std::size_t channels() const { return running.channels(); }
};

class BatchNorm1d {
 public:
  BatchNorm1d() = default;
  explicit BatchNorm1d(std::size_t channels) : state_(channels) {}

  NormState& state() { return state_; }
  const NormState& state() const { return state_; }

  Tensor forward(const Tensor& x, NormMode mode, GradientTape* tape);

 private:
  NormState state_;
};

// Instance-aware batch normalization. The reference statistics are the
// running ones in kEval and the batch ones in kTrain / kTestBatch; each
// (b, c) row is normalized by the shrinkage-corrected statistics, so in
// kEval the output of a sample depends only on that sample.
class IabnLayer {
 public:
  IabnLayer() = default;
  IabnLayer(std::size_t channels, double alpha) : state_(channels), alpha_(alpha) {}

  // Shares affine parameters and running statistics with `bn`.
  static IabnLayer from_batch_norm(const BatchNorm1d& bn, double alpha);

  NormState& state() { return state_; }
  const NormState& state() const { return state_; }
  double alpha() const { return alpha_; }
  void set_alpha(double alpha);

  Tensor forward(const Tensor& x, NormMode mode, GradientTape* tape);

 private:
  NormState state_;
  double alpha_ = 4.0;
};

InstanceStats iabn_correct_stats(const InstanceStats& inst, const IabnLayer& layer,
                                 std::size_t length);

// mean <- (1 - m) mean + m * N/(N-1) * batch.mean, and likewise for variance.
void ema_update_stats(NormState& state, const ChannelStats& batch, double momentum,
                      std::size_t memory_size);

}  // namespace tta
