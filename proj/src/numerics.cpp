#include "tta/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "tta/error.hpp"

namespace tta {

namespace {

void require_finite(const Tensor& x, const char* op) {
  if (!x.all_finite()) throw NumericError(std::string(op) + ": non-finite input");
}

Tensor scalar_tensor(double v) { return Tensor({1, 1, 1}, std::vector<double>{v}); }

}  // namespace

// ---------------------------------------------------------------------------
// GradientTape

void GradientTape::record(std::string op, BackwardFn fn) {
  entries_.push_back({std::move(op), std::move(fn)});
}

std::vector<std::string> GradientTape::ops() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.op);
  return out;
}

Tensor GradientTape::backward(double loss_grad) { return backward(scalar_tensor(loss_grad)); }

Tensor GradientTape::backward(const Tensor& upstream) {
  if (entries_.empty()) throw StateError("backward called on an empty tape");
  Tensor grad = upstream;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) grad = it->fn(grad);
  entries_.clear();
  return grad;
}

// ---------------------------------------------------------------------------
// Dense

DenseLayer::DenseLayer(std::size_t in_features, std::size_t out_features)
    : in_(in_features),
      out_(out_features),
      weight_("dense.weight", in_features * out_features),
      bias_("dense.bias", out_features) {
  if (in_features == 0 || out_features == 0) throw ConfigError("dense layer needs nonzero dims");
}

void DenseLayer::init(Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in_));
  for (double& w : weight_.value) w = (2.0 * rng.uniform() - 1.0) * bound;
  std::fill(bias_.value.begin(), bias_.value.end(), 0.0);
}

Tensor DenseLayer::forward(const Tensor& x, GradientTape* tape) {
  const std::size_t features = x.channels() * x.length();
  if (features != in_) {
    throw ConfigError("dense: expected " + std::to_string(in_) + " input features, got " +
                      std::to_string(features));
  }
  require_finite(x, "dense");
  const std::size_t batch = x.batch();
  Tensor y({batch, out_, 1});
  for (std::size_t b = 0; b < batch; ++b) {
    auto in = x.sample_span(b);
    for (std::size_t o = 0; o < out_; ++o) {
      const double* w = weight_.value.data() + o * in_;
      double acc = bias_.value[o];
      for (std::size_t i = 0; i < in_; ++i) acc += w[i] * in[i];
      y.at(b, o, 0) = acc;
    }
  }
  if (tape != nullptr) {
    tape->record("dense", [this, x](const Tensor& dy) {
      const std::size_t batch = x.batch();
      Tensor dx(x.shape());
      auto dxd = dx.data();
      for (std::size_t b = 0; b < batch; ++b) {
        auto in = x.sample_span(b);
        for (std::size_t o = 0; o < out_; ++o) {
          const double g = dy.at(b, o, 0);
          if (g == 0.0) continue;
          const double* w = weight_.value.data() + o * in_;
          double* dxb = dxd.data() + b * in_;
          for (std::size_t i = 0; i < in_; ++i) dxb[i] += g * w[i];
          if (weight_.trainable) {
            double* gw = weight_.grad.data() + o * in_;
            for (std::size_t i = 0; i < in_; ++i) gw[i] += g * in[i];
          }
          if (bias_.trainable) bias_.grad[o] += g;
        }
      }
      return dx;
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Conv1d

Conv1dLayer::Conv1dLayer(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
                         std::size_t stride)
    : in_(in_channels),
      out_(out_channels),
      kernel_(kernel),
      stride_(stride),
      weight_("conv.weight", out_channels * in_channels * kernel),
      bias_("conv.bias", out_channels) {
  if (in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0) {
    throw ConfigError("conv1d needs positive channels, kernel and stride");
  }
}

std::size_t Conv1dLayer::output_length(std::size_t input_length) const {
  if (input_length < kernel_) {
    throw ConfigError("conv1d: kernel width " + std::to_string(kernel_) +
                      " exceeds input length " + std::to_string(input_length));
  }
  return (input_length - kernel_) / stride_ + 1;
}

void Conv1dLayer::init(Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in_ * kernel_));
  for (double& w : weight_.value) w = (2.0 * rng.uniform() - 1.0) * bound;
  std::fill(bias_.value.begin(), bias_.value.end(), 0.0);
}

Tensor Conv1dLayer::forward(const Tensor& x, GradientTape* tape) {
  if (x.channels() != in_) {
    throw ConfigError("conv1d: expected " + std::to_string(in_) + " channels, got " +
                      std::to_string(x.channels()));
  }
  require_finite(x, "conv1d");
  const std::size_t out_len = output_length(x.length());
  const std::size_t batch = x.batch();
  Tensor y({batch, out_, out_len});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t o = 0; o < out_; ++o) {
      auto yr = y.row(b, o);
      std::fill(yr.begin(), yr.end(), bias_.value[o]);
      for (std::size_t i = 0; i < in_; ++i) {
        auto xr = x.row(b, i);
        const double* w = weight_.value.data() + (o * in_ + i) * kernel_;
        for (std::size_t l = 0; l < out_len; ++l) {
          const double* xs = xr.data() + l * stride_;
          double acc = 0.0;
          for (std::size_t k = 0; k < kernel_; ++k) acc += w[k] * xs[k];
          yr[l] += acc;
        }
      }
    }
  }
  if (tape != nullptr) {
    tape->record("conv1d", [this, x, out_len](const Tensor& dy) {
      Tensor dx(x.shape());
      for (std::size_t b = 0; b < x.batch(); ++b) {
        for (std::size_t o = 0; o < out_; ++o) {
          auto dyr = dy.row(b, o);
          if (bias_.trainable) {
            double s = 0.0;
            for (double g : dyr) s += g;
            bias_.grad[o] += s;
          }
          for (std::size_t i = 0; i < in_; ++i) {
            auto xr = x.row(b, i);
            auto dxr = dx.row(b, i);
            const double* w = weight_.value.data() + (o * in_ + i) * kernel_;
            double* gw = weight_.grad.data() + (o * in_ + i) * kernel_;
            for (std::size_t l = 0; l < out_len; ++l) {
              const double g = dyr[l];
              if (g == 0.0) continue;
              const std::size_t start = l * stride_;
              for (std::size_t k = 0; k < kernel_; ++k) dxr[start + k] += g * w[k];
              if (weight_.trainable) {
                for (std::size_t k = 0; k < kernel_; ++k) gw[k] += g * xr[start + k];
              }
            }
          }
        }
      }
      return dx;
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Elementwise / pooling

Tensor relu(const Tensor& x, GradientTape* tape) {
  require_finite(x, "relu");
  Tensor y = x;
  for (double& v : y.data()) v = v > 0.0 ? v : 0.0;
  if (tape != nullptr) {
    tape->record("relu", [x](const Tensor& dy) {
      Tensor dx = dy;
      auto xd = x.data();
      auto d = dx.data();
      for (std::size_t i = 0; i < d.size(); ++i) {
        if (!(xd[i] > 0.0)) d[i] = 0.0;
      }
      return dx;
    });
  }
  return y;
}

Tensor global_average_pool(const Tensor& x, GradientTape* tape) {
  require_finite(x, "global_average_pool");
  Tensor y({x.batch(), x.channels(), 1});
  const double inv = 1.0 / static_cast<double>(x.length());
  for (std::size_t b = 0; b < x.batch(); ++b) {
    for (std::size_t c = 0; c < x.channels(); ++c) {
      double s = 0.0;
      for (double v : x.row(b, c)) s += v;
      y.at(b, c, 0) = s * inv;
    }
  }
  if (tape != nullptr) {
    tape->record("global_average_pool", [shape = x.shape(), inv](const Tensor& dy) {
      Tensor dx(shape);
      for (std::size_t b = 0; b < shape.batch; ++b) {
        for (std::size_t c = 0; c < shape.channels; ++c) {
          const double g = dy.at(b, c, 0) * inv;
          for (double& v : dx.row(b, c)) v = g;
        }
      }
      return dx;
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Softmax and losses

namespace {

std::vector<double> softmax_row(std::span<const double> z) {
  const double mx = *std::max_element(z.begin(), z.end());
  std::vector<double> p(z.size());
  double s = 0.0;
  for (std::size_t k = 0; k < z.size(); ++k) {
    p[k] = std::exp(z[k] - mx);
    s += p[k];
  }
  for (double& v : p) v /= s;
  return p;
}

void require_logits(const Tensor& logits) {
  if (logits.length() != 1 || logits.channels() == 0 || logits.batch() == 0) {
    throw ConfigError("logits must have shape (B, K, 1)");
  }
}

}  // namespace

std::vector<std::vector<double>> softmax(const Tensor& logits) {
  require_logits(logits);
  std::vector<std::vector<double>> rows;
  rows.reserve(logits.batch());
  for (std::size_t b = 0; b < logits.batch(); ++b) rows.push_back(softmax_row(logits.sample_span(b)));
  return rows;
}

double softmax_cross_entropy(std::span<const double> logits, int label) {
  if (label < 0 || static_cast<std::size_t>(label) >= logits.size()) {
    throw InputError("label " + std::to_string(label) + " out of range");
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  double s = 0.0;
  for (double z : logits) s += std::exp(z - mx);
  return -(logits[static_cast<std::size_t>(label)] - mx - std::log(s));
}

double softmax_cross_entropy(const Tensor& logits, std::span<const int> labels,
                             GradientTape* tape) {
  require_logits(logits);
  if (labels.size() != logits.batch()) throw ConfigError("one label per logits row required");
  const std::size_t batch = logits.batch();
  double loss = 0.0;
  for (std::size_t b = 0; b < batch; ++b) loss += softmax_cross_entropy(logits.sample_span(b), labels[b]);
  loss /= static_cast<double>(batch);
  if (!std::isfinite(loss)) throw NumericError("cross-entropy is not finite");
  if (tape != nullptr) {
    std::vector<int> y(labels.begin(), labels.end());
    tape->record("softmax_cross_entropy", [logits, y](const Tensor& up) {
      const double g = up.at(0, 0, 0) / static_cast<double>(logits.batch());
      Tensor dz(logits.shape());
      for (std::size_t b = 0; b < logits.batch(); ++b) {
        auto p = softmax_row(logits.sample_span(b));
        for (std::size_t k = 0; k < p.size(); ++k) {
          dz.at(b, k, 0) = g * (p[k] - (static_cast<int>(k) == y[b] ? 1.0 : 0.0));
        }
      }
      return dz;
    });
  }
  return loss;
}

double entropy_loss(const std::vector<std::vector<double>>& probabilities) {
  if (probabilities.empty()) throw InputError("entropy of an empty batch");
  double total = 0.0;
  for (const auto& row : probabilities) {
    double sum = 0.0;
    double h = 0.0;
    for (double p : row) {
      if (!(p >= 0.0)) throw InputError("probabilities must be non-negative");
      sum += p;
      if (p > 0.0) h -= p * std::log(std::max(p, kEntropyClamp));
    }
    if (std::abs(sum - 1.0) > 1e-6) throw InputError("probability row does not sum to 1");
    total += h;
  }
  return total / static_cast<double>(probabilities.size());
}

double entropy_from_logits(const Tensor& logits, GradientTape* tape) {
  auto probs = softmax(logits);
  const double loss = entropy_loss(probs);
  if (!std::isfinite(loss)) throw NumericError("entropy is not finite");
  if (tape != nullptr) {
    tape->record("entropy", [probs = std::move(probs), shape = logits.shape()](const Tensor& up) {
      // dH/dz_j = -p_j (log p_j + H)
      const double g = up.at(0, 0, 0) / static_cast<double>(shape.batch);
      Tensor dz(shape);
      for (std::size_t b = 0; b < shape.batch; ++b) {
        const auto& p = probs[b];
        double h = 0.0;
        std::vector<double> logp(p.size());
        for (std::size_t k = 0; k < p.size(); ++k) {
          logp[k] = std::log(std::max(p[k], kEntropyClamp));
          h -= p[k] * logp[k];
        }
        for (std::size_t k = 0; k < p.size(); ++k) dz.at(b, k, 0) = -g * p[k] * (logp[k] + h);
      }
      return dz;
    });
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Optimizers

std::size_t AdamState::tracked_scalars() const {
  std::size_t n = 0;
  for (const auto& m : first_) n += m.size();
  return n;
}

void AdamState::step(std::span<Parameter* const> params, double lr) {
  if (!(lr >= 0.0)) throw ConfigError("learning rate must be non-negative");
  std::vector<Parameter*> active;
  for (Parameter* p : params) {
    if (p->trainable) active.push_back(p);
  }
  if (step_ == 0) {
    first_.clear();
    second_.clear();
    for (Parameter* p : active) {
      first_.emplace_back(p->size(), 0.0);
      second_.emplace_back(p->size(), 0.0);
    }
  } else if (active.size() != first_.size()) {
    throw ConfigError("adam: trainable parameter set changed between steps");
  }
  for (std::size_t i = 0; i < active.size(); ++i) {
    if (active[i]->size() != first_[i].size() || active[i]->grad.size() != active[i]->size()) {
      throw ConfigError("adam: parameter shape mismatch for " + active[i]->name);
    }
  }
  ++step_;
  const double t = static_cast<double>(step_);
  const double c1 = 1.0 - std::pow(beta1, t);
  const double c2 = 1.0 - std::pow(beta2, t);
  for (std::size_t i = 0; i < active.size(); ++i) {
    Parameter& p = *active[i];
    auto& m = first_[i];
    auto& v = second_[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double g = p.grad[j];
      m[j] = beta1 * m[j] + (1.0 - beta1) * g;
      v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      p.value[j] -= lr * mhat / (std::sqrt(vhat) + epsilon);
    }
  }
}

void SgdMomentum::step(std::span<Parameter* const> params, double lr) {
  if (velocity_.empty()) {
    for (Parameter* p : params) velocity_.emplace_back(p->size(), 0.0);
  }
  if (velocity_.size() != params.size()) throw ConfigError("sgd: parameter set changed");
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = *params[i];
    if (!p.trainable) continue;
    auto& vel = velocity_[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      vel[j] = momentum_ * vel[j] + p.grad[j];
      p.value[j] -= lr * vel[j];
    }
  }
}

std::vector<double> finite_difference_grad(
    const std::function<double(std::span<const double>)>& loss, std::span<const double> params,
    double h) {
  if (!(h > 0.0)) throw ConfigError("finite-difference step must be positive");
  std::vector<double> theta(params.begin(), params.end());
  std::vector<double> grad(theta.size());
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double orig = theta[i];
    theta[i] = orig + h;
    const double fp = loss(theta);
    theta[i] = orig - h;
    const double fm = loss(theta);
    theta[i] = orig;
    grad[i] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

}  // namespace tta
