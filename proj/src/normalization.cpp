#include "tta/normalization.hpp"

#include <cmath>
#include <string>

#include "tta/error.hpp"

namespace tta {

ChannelStats batch_stats(const Tensor& f) {
  const std::size_t n = f.batch() * f.length();
  if (n == 0) throw ConfigError("batch_stats needs at least one value per channel");
  ChannelStats out(f.channels(), 0.0, 0.0);
  for (std::size_t c = 0; c < f.channels(); ++c) {
    double s = 0.0;
    for (std::size_t b = 0; b < f.batch(); ++b)
      for (double v : f.row(b, c)) s += v;
    const double mean = s / static_cast<double>(n);
    double ss = 0.0;
    for (std::size_t b = 0; b < f.batch(); ++b)
      for (double v : f.row(b, c)) ss += (v - mean) * (v - mean);
    out.mean[c] = mean;
    out.variance[c] = ss / static_cast<double>(n);
  }
  return out;
}

InstanceStats instance_stats(const Tensor& f) {
  if (f.length() < 2) {
    throw ConfigError("instance statistics need at least 2 positions, got " +
                      std::to_string(f.length()));
  }
  InstanceStats out;
  out.batch = f.batch();
  out.channels = f.channels();
  out.mean.resize(out.batch * out.channels);
  out.variance.resize(out.batch * out.channels);
  const double inv = 1.0 / static_cast<double>(f.length());
  for (std::size_t b = 0; b < f.batch(); ++b) {
    for (std::size_t c = 0; c < f.channels(); ++c) {
      auto r = f.row(b, c);
      double s = 0.0;
      for (double v : r) s += v;
      const double mean = s * inv;
      double ss = 0.0;
      for (double v : r) ss += (v - mean) * (v - mean);
      out.mean[b * out.channels + c] = mean;
      out.variance[b * out.channels + c] = ss * inv;
    }
  }
  return out;
}

double soft_shrink(double x, double lam) {
  if (x > lam) return x - lam;
  if (x < -lam) return x + lam;
  return 0.0;
}

namespace {

double mean_threshold(double alpha, double ref_var, std::size_t length) {
  if (std::isinf(alpha)) return kInfiniteAlpha;
  return alpha * std::sqrt(ref_var / static_cast<double>(length));
}

double variance_threshold(double alpha, double ref_var, std::size_t length) {
  if (std::isinf(alpha)) return kInfiniteAlpha;
  return alpha * ref_var * std::sqrt(2.0 / static_cast<double>(length - 1));
}

}  // namespace

SamplingStdDevs sampling_std_devs(const ChannelStats& reference, std::size_t length) {
  if (length < 2) throw ConfigError("sampling std devs need at least 2 positions");
  SamplingStdDevs out;
  for (double v : reference.variance) {
    out.mean.push_back(std::sqrt(v / static_cast<double>(length)));
    out.variance.push_back(std::sqrt(2.0 * v * v / static_cast<double>(length - 1)));
  }
  return out;
}

InstanceStats iabn_correct_stats(const InstanceStats& inst, const ChannelStats& reference,
                                 double alpha, std::size_t length) {
  if (length < 2) throw ConfigError("IABN needs at least 2 positions");
  if (reference.channels() != inst.channels) throw ConfigError("channel count mismatch");
  InstanceStats out = inst;
  for (std::size_t c = 0; c < inst.channels; ++c) {
    const double ref_mean = reference.mean[c];
    const double ref_var = reference.variance[c];
    const double lam_mean = mean_threshold(alpha, ref_var, length);
    const double lam_var = variance_threshold(alpha, ref_var, length);
    for (std::size_t b = 0; b < inst.batch; ++b) {
      const std::size_t i = b * inst.channels + c;
      out.mean[i] = ref_mean + soft_shrink(inst.mean[i] - ref_mean, lam_mean);
      out.variance[i] = ref_var + soft_shrink(inst.variance[i] - ref_var, lam_var);
    }
  }
  return out;
}

InstanceStats iabn_correct_stats(const InstanceStats& inst, const IabnLayer& layer,
                                 std::size_t length) {
  return iabn_correct_stats(inst, layer.state().running, layer.alpha(), length);
}

NormState::NormState(std::size_t channels)
    : running(channels, 0.0, 1.0), gamma("norm.gamma", channels, 1.0), beta("norm.beta", channels) {
  if (channels == 0) throw ConfigError("normalization layer needs at least one channel");
}

namespace {

// Shared BN / IABN kernel. With alpha = infinity every row uses the
// reference statistics unchanged, which is plain batch normalization.
Tensor normalize(const Tensor& x, NormMode mode, double alpha, NormState& st, GradientTape* tape,
                 const char* op) {
  const std::size_t B = x.batch();
  const std::size_t C = x.channels();
  const std::size_t L = x.length();
  if (C != st.channels()) {
    throw ConfigError(std::string(op) + ": expected " + std::to_string(st.channels()) +
                      " channels, got " + std::to_string(C));
  }
  if (!x.all_finite()) throw NumericError(std::string(op) + ": non-finite input");
  const bool shrink = !std::isinf(alpha);
  if (shrink && L < 2) throw ConfigError(std::string(op) + ": IABN needs at least 2 positions");
  const bool batch_ref = mode != NormMode::kEval;
  if (batch_ref && B * L < 2) {
    throw ConfigError(std::string(op) + ": batch statistics need at least 2 values per channel");
  }

  const ChannelStats reference = batch_ref ? batch_stats(x) : st.running;
  InstanceStats inst;
  if (shrink) inst = instance_stats(x);

  // Per-(b, c) normalization mean / inverse std and shrinkage branch signs
  // (+1 / -1 when psi is active, 0 in the dead zone).
  std::vector<double> mu(B * C), inv_std(B * C);
  std::vector<signed char> mean_sign(B * C, 0), var_sign(B * C, 0);
  std::vector<double> lam_mean(C, kInfiniteAlpha), lam_var(C, kInfiniteAlpha);
  for (std::size_t c = 0; c < C; ++c) {
    const double rm = reference.mean[c];
    const double rv = reference.variance[c];
    if (shrink) {
      lam_mean[c] = mean_threshold(alpha, rv, L);
      lam_var[c] = variance_threshold(alpha, rv, L);
    }
    for (std::size_t b = 0; b < B; ++b) {
      const std::size_t i = b * C + c;
      double m = rm;
      double v = rv;
      if (shrink) {
        const double dm = inst.mean[i] - rm;
        const double dv = inst.variance[i] - rv;
        m = rm + soft_shrink(dm, lam_mean[c]);
        v = rv + soft_shrink(dv, lam_var[c]);
        mean_sign[i] = dm > lam_mean[c] ? 1 : (dm < -lam_mean[c] ? -1 : 0);
        var_sign[i] = dv > lam_var[c] ? 1 : (dv < -lam_var[c] ? -1 : 0);
      }
      mu[i] = m;
      inv_std[i] = 1.0 / std::sqrt(v + st.epsilon);
    }
  }

  Tensor y(x.shape());
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t i = b * C + c;
      const double g = st.gamma.value[c];
      const double be = st.beta.value[c];
      auto xr = x.row(b, c);
      auto yr = y.row(b, c);
      for (std::size_t l = 0; l < L; ++l) yr[l] = g * (xr[l] - mu[i]) * inv_std[i] + be;
    }
  }
  if (!y.all_finite()) throw NumericError(std::string(op) + ": non-finite output");

  if (mode == NormMode::kTrain) {
    const double n = static_cast<double>(B * L);
    const double unbias = n / (n - 1.0);
    const double m = st.train_momentum;
    for (std::size_t c = 0; c < C; ++c) {
      st.running.mean[c] = (1.0 - m) * st.running.mean[c] + m * reference.mean[c];
      st.running.variance[c] =
          (1.0 - m) * st.running.variance[c] + m * reference.variance[c] * unbias;
    }
    st.stats_ready = true;
  }

  if (tape != nullptr) {
    tape->record(op, [x, &st, alpha, shrink, batch_ref, reference, inst = std::move(inst),
                      mu = std::move(mu), inv_std = std::move(inv_std),
                      mean_sign = std::move(mean_sign), var_sign = std::move(var_sign),
                      lam_mean = std::move(lam_mean)](const Tensor& dy) {
      const std::size_t B = x.batch();
      const std::size_t C = x.channels();
      const std::size_t L = x.length();
      const double dL = static_cast<double>(L);
      Tensor dx(x.shape());
      for (std::size_t c = 0; c < C; ++c) {
        const double g = st.gamma.value[c];
        double dgamma = 0.0;
        double dbeta = 0.0;
        double dref_mean = 0.0;
        double dref_var = 0.0;
        double dlam_mean = 0.0;
        double dlam_var = 0.0;
        for (std::size_t b = 0; b < B; ++b) {
          const std::size_t i = b * C + c;
          auto xr = x.row(b, c);
          auto dyr = dy.row(b, c);
          auto dxr = dx.row(b, c);
          double sum_dxhat = 0.0;
          double sum_dxhat_centered = 0.0;
          for (std::size_t l = 0; l < L; ++l) {
            const double centered = xr[l] - mu[i];
            dbeta += dyr[l];
            dgamma += dyr[l] * centered * inv_std[i];
            const double dxhat = dyr[l] * g;
            sum_dxhat += dxhat;
            sum_dxhat_centered += dxhat * centered;
            dxr[l] = dxhat * inv_std[i];
          }
          const double dmu = -inv_std[i] * sum_dxhat;
          const double dvar = -0.5 * inv_std[i] * inv_std[i] * inv_std[i] * sum_dxhat_centered;
          if (!shrink) {
            dref_mean += dmu;
            dref_var += dvar;
            continue;
          }
          // psi'(u) is 1 on the active branches and 0 in the dead zone
          // (including its boundary); d psi / d lam = -sign(u) when active.
          double dinst_mean = 0.0;
          double dinst_var = 0.0;
          if (mean_sign[i] != 0) {
            dinst_mean = dmu;
            dlam_mean -= mean_sign[i] * dmu;
          } else {
            dref_mean += dmu;
          }
          if (var_sign[i] != 0) {
            dinst_var = dvar;
            dlam_var -= var_sign[i] * dvar;
          } else {
            dref_var += dvar;
          }
          if (dinst_mean != 0.0 || dinst_var != 0.0) {
            const double im = inst.mean[i];
            for (std::size_t l = 0; l < L; ++l) {
              dxr[l] += dinst_mean / dL + dinst_var * 2.0 * (xr[l] - im) / dL;
            }
          }
        }
        if (st.gamma.trainable) st.gamma.grad[c] += dgamma;
        if (st.beta.trainable) st.beta.grad[c] += dbeta;
        if (!batch_ref) continue;
        // Reference statistics are functions of the whole batch.
        const double rv = reference.variance[c];
        if (shrink) {
          if (rv > 0.0) dref_var += dlam_mean * lam_mean[c] / (2.0 * rv);
          dref_var += dlam_var * alpha * std::sqrt(2.0 / (dL - 1.0));
        }
        const double n = static_cast<double>(B * L);
        const double rm = reference.mean[c];
        for (std::size_t b = 0; b < B; ++b) {
          auto xr = x.row(b, c);
          auto dxr = dx.row(b, c);
          for (std::size_t l = 0; l < L; ++l) {
            dxr[l] += dref_mean / n + dref_var * 2.0 * (xr[l] - rm) / n;
          }
        }
      }
      return dx;
    });
  }
  return y;
}

}  // namespace

Tensor BatchNorm1d::forward(const Tensor& x, NormMode mode, GradientTape* tape) {
  return normalize(x, mode, kInfiniteAlpha, state_, tape, "batch_norm");
}

IabnLayer IabnLayer::from_batch_norm(const BatchNorm1d& bn, double alpha) {
  if (!bn.state().stats_ready) {
    throw StateError("cannot convert a batch-norm layer without running statistics");
  }
  IabnLayer out;
  out.state_ = bn.state();
  out.set_alpha(alpha);
  return out;
}

void IabnLayer::set_alpha(double alpha) {
  if (!(alpha >= 0.0)) throw ConfigError("alpha must be non-negative");
  alpha_ = alpha;
}

Tensor IabnLayer::forward(const Tensor& x, NormMode mode, GradientTape* tape) {
  return normalize(x, mode, alpha_, state_, tape, "iabn");
}

void ema_update_stats(NormState& state, const ChannelStats& batch, double momentum,
                      std::size_t memory_size) {
  if (memory_size < 2) throw ConfigError("EMA update needs memory size N >= 2");
  if (!(momentum >= 0.0 && momentum <= 1.0)) throw ConfigError("momentum must lie in [0, 1]");
  if (batch.channels() != state.channels()) throw ConfigError("EMA update: channel mismatch");
  const double scale = static_cast<double>(memory_size) / static_cast<double>(memory_size - 1);
  for (std::size_t c = 0; c < state.channels(); ++c) {
    state.running.mean[c] = (1.0 - momentum) * state.running.mean[c] + momentum * scale * batch.mean[c];
    state.running.variance[c] =
        (1.0 - momentum) * state.running.variance[c] + momentum * scale * batch.variance[c];
  }
  state.stats_ready = true;
}

}  // namespace tta
