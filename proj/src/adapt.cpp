#include "tta/adapt.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include "tta/error.hpp"
#include "tta/format.hpp"

namespace tta {

namespace {

struct MethodInfo {
  Method method;
  const char* name;
  NormKind norm;
  bool batch;
};

constexpr MethodInfo kMethods[] = {
    {Method::kSource, "source", NormKind::kBatchNorm, true},
    {Method::kBnStats, "bn_stats", NormKind::kBatchNorm, true},
    {Method::kOnda, "onda", NormKind::kBatchNorm, true},
    {Method::kTent, "tent", NormKind::kBatchNorm, true},
    {Method::kPseudoLabel, "pl", NormKind::kBatchNorm, true},
    {Method::kNote, "note", NormKind::kInstanceAware, false},
    {Method::kNoteStar, "note_star", NormKind::kInstanceAware, true},
    {Method::kIabnOnly, "iabn", NormKind::kInstanceAware, false},
    {Method::kPbrsOnly, "pbrs", NormKind::kBatchNorm, false},
    {Method::kIabnRs, "iabn_rs", NormKind::kInstanceAware, false},
    {Method::kIabnStar, "iabn_star", NormKind::kBatchNorm, false},
};

const MethodInfo& info(Method method) {
  for (const auto& m : kMethods) {
    if (m.method == method) return m;
  }
  throw InputError("unknown method");
}

}  // namespace

std::string method_name(Method method) { return info(method).name; }

Method parse_method(const std::string& name) {
  for (const auto& m : kMethods) {
    if (name == m.name) return m.method;
  }
  throw InputError("unknown method '" + name + "'");
}

std::vector<Method> all_methods() {
  std::vector<Method> out;
  for (const auto& m : kMethods) out.push_back(m.method);
  return out;
}

NormKind required_norm(Method method) { return info(method).norm; }
bool is_batch_method(Method method) { return info(method).batch; }

void AdaptConfig::validate() const {
  if (memory_size < 2) throw ConfigError("memory size N must be at least 2");
  if (!(momentum > 0.0 && momentum <= 1.0)) throw ConfigError("momentum must lie in (0, 1]");
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("learning rate must be non-negative");
  if (!(alpha >= 0.0)) throw ConfigError("alpha must be non-negative");
  if (batch_size < 2) throw ConfigError("batch size must be at least 2");
  if (onda_frequency == 0) throw ConfigError("ONDA update frequency must be positive");
  if (!(onda_decay > 0.0 && onda_decay <= 1.0)) throw ConfigError("ONDA decay must lie in (0, 1]");
}

AdaptConfig default_config(Method method) {
  AdaptConfig c;
  c.method = method;
  switch (method) {
    case Method::kNote:
    case Method::kPbrsOnly:
    case Method::kIabnRs:
      c.memory_size = 64;
      c.momentum = 0.01;
      c.lr = 1e-4;
      c.alpha = 4.0;
      c.sampling = method == Method::kIabnRs ? SamplingPolicy::kReservoir
                                             : SamplingPolicy::kPredictionBalanced;
      break;
    case Method::kIabnOnly:
    case Method::kIabnStar:
      c.adapt = false;
      break;
    case Method::kNoteStar:
      c.lr = 1e-3;
      break;
    case Method::kTent:
    case Method::kPseudoLabel:
      c.lr = 1e-3;
      c.batch_size = 64;
      break;
    case Method::kOnda:
      c.onda_frequency = 10;
      c.onda_decay = 0.1;
      break;
    case Method::kSource:
    case Method::kBnStats:
      break;
  }
  return c;
}

// ---------------------------------------------------------------------------
// ErrorTrace

void ErrorTrace::push(int truth, int predicted) {
  true_labels.push_back(truth);
  predicted_labels.push_back(predicted);
  if (truth != predicted) ++running_errors;
  cumulative_error.push_back(static_cast<double>(running_errors) / static_cast<double>(size()));
}

std::size_t ErrorTrace::errors() const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < size(); ++i) n += true_labels[i] != predicted_labels[i];
  return n;
}

double ErrorTrace::final_error() const {
  if (size() == 0) return 0.0;
  return static_cast<double>(errors()) / static_cast<double>(size());
}

void ErrorTrace::write_csv(std::ostream& out) const {
  out << "t,true_label,predicted_label,cumulative_error\n";
  for (std::size_t i = 0; i < size(); ++i) {
    out << (i + 1) << ',' << true_labels[i] << ',' << predicted_labels[i] << ','
        << format_double(cumulative_error[i]) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Shared adaptation pieces

namespace {

// EMA of every normalization layer's running statistics toward the batch
// statistics of its input, with the N/(N-1) factor.
void ema_from_batch(Backbone& model, const Tensor& batch, double momentum, std::size_t n) {
  const auto taps = model.norm_inputs(batch);
  auto states = model.norm_states();
  for (std::size_t k = 0; k < states.size(); ++k) {
    ema_update_stats(*states[k], batch_stats(taps[k]), momentum, n);
  }
}

// One Adam step on gamma/beta minimizing prediction entropy of `batch`.
void entropy_step(Backbone& model, AdamState& optimizer, const Tensor& batch, NormMode mode,
                  double lr, std::vector<Prediction>* predictions = nullptr) {
  model.zero_grad();
  GradientTape tape;
  const Tensor logits = model.forward(batch, mode, &tape);
  if (predictions != nullptr) {
    for (auto& p : softmax(logits)) {
      const int label = static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
      predictions->push_back({label, std::move(p)});
    }
  }
  entropy_from_logits(logits, &tape);
  tape.backward();
  const auto params = model.affine_parameters();
  optimizer.step(params, lr);
}

void require_norm(const Backbone& model, Method method) {
  if (model.norm_kind() != required_norm(method)) {
    throw ConfigError("method " + method_name(method) + " needs a " +
                      norm_kind_name(required_norm(method)) + " checkpoint, got " +
                      norm_kind_name(model.norm_kind()));
  }
}

// Consecutive batches of `size`; a trailing remainder of one sample joins the
// previous batch so every batch has at least two samples.
std::vector<std::pair<std::size_t, std::size_t>> split_batches(std::size_t total, std::size_t size) {
  if (total < size) {
    throw InputError("stream of " + std::to_string(total) + " samples is shorter than one batch of " +
                     std::to_string(size));
  }
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t begin = 0; begin < total; begin += size) {
    out.emplace_back(begin, std::min(total, begin + size));
  }
  if (out.size() > 1 && out.back().second - out.back().first < 2) {
    out[out.size() - 2].second = total;
    out.pop_back();
  }
  return out;
}

}  // namespace

double prediction_entropy(Backbone& model, const Tensor& x) {
  return entropy_loss(softmax(model.forward(x, NormMode::kEval, nullptr)));
}

// ---------------------------------------------------------------------------
// NoteAdapter

NoteAdapter::NoteAdapter(Backbone model, AdaptConfig config, Rng rng)
    : model_(std::move(model)),
      config_(config),
      memory_(config.memory_size, rng.split("memory")) {
  config_.validate();
  if (model_.norm_kind() != NormKind::kInstanceAware) {
    throw ConfigError("NOTE needs a backbone with IABN layers");
  }
  if (!model_.stats_ready()) throw StateError("NOTE needs initialized normalization statistics");
  model_.freeze_all_but_affine();
}

Prediction NoteAdapter::infer(const Tensor& x) {
  Prediction p = predict(model_, x);
  memory_.offer(config_.sampling, x, p.label);
  ++seen_;
  if (config_.adapt && seen_ % config_.memory_size == 0) adapt_step();
  return p;
}

void NoteAdapter::adapt_step() {
  if (memory_.empty()) throw StateError("adapt step with an empty memory");
  const Tensor batch = memory_.batch();
  ema_from_batch(model_, batch, config_.momentum, config_.memory_size);
  if (config_.lr > 0.0) entropy_step(model_, optimizer_, batch, NormMode::kEval, config_.lr);
  ++adaptations_;
}

// ---------------------------------------------------------------------------
// run_tta

namespace {

ErrorTrace run_batch_method(Backbone& model, const Dataset& target, const StreamOrder& stream,
                            const AdaptConfig& config) {
  ErrorTrace trace;
  AdamState optimizer;
  model.freeze_all_but_affine();
  std::vector<Tensor> pending;
  std::size_t batches_since_update = 0;
  for (const auto& [begin, end] : split_batches(stream.size(), config.batch_size)) {
    std::span<const std::size_t> idx(stream.data() + begin, end - begin);
    const Tensor xb = target.inputs.gather(idx);
    std::vector<Prediction> preds;
    switch (config.method) {
      case Method::kSource:
        preds = predict_batch(model, xb, NormMode::kEval);
        break;
      case Method::kBnStats:
        preds = predict_batch(model, xb, NormMode::kTestBatch);
        break;
      case Method::kOnda: {
        preds = predict_batch(model, xb, NormMode::kEval);
        pending.push_back(xb);
        if (++batches_since_update == config.onda_frequency) {
          const Tensor all = Tensor::stack(pending);
          const auto taps = model.norm_inputs(all);
          auto states = model.norm_states();
          for (std::size_t k = 0; k < states.size(); ++k) {
            const ChannelStats s = batch_stats(taps[k]);
            const double n = static_cast<double>(taps[k].batch() * taps[k].length());
            const double d = config.onda_decay;
            for (std::size_t c = 0; c < s.channels(); ++c) {
              states[k]->running.mean[c] = (1.0 - d) * states[k]->running.mean[c] + d * s.mean[c];
              states[k]->running.variance[c] =
                  (1.0 - d) * states[k]->running.variance[c] + d * s.variance[c] * n / (n - 1.0);
            }
          }
          pending.clear();
          batches_since_update = 0;
        }
        break;
      }
      case Method::kTent:
        entropy_step(model, optimizer, xb, NormMode::kTestBatch, config.lr, &preds);
        break;
      case Method::kPseudoLabel: {
        model.zero_grad();
        GradientTape tape;
        const Tensor logits = model.forward(xb, NormMode::kTestBatch, &tape);
        std::vector<int> pseudo;
        for (auto& p : softmax(logits)) {
          const int label = static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
          pseudo.push_back(label);
          preds.push_back({label, std::move(p)});
        }
        softmax_cross_entropy(logits, pseudo, &tape);
        tape.backward();
        const auto params = model.affine_parameters();
        optimizer.step(params, config.lr);
        break;
      }
      case Method::kNoteStar:
        preds = predict_batch(model, xb, NormMode::kEval);
        if (config.adapt) {
          ema_from_batch(model, xb, config.momentum, xb.batch());
          if (config.lr > 0.0) entropy_step(model, optimizer, xb, NormMode::kEval, config.lr);
        }
        break;
      default:
        throw ConfigError("not a batch method: " + method_name(config.method));
    }
    for (std::size_t i = 0; i < idx.size(); ++i) trace.push(target.labels[idx[i]], preds[i].label);
  }
  return trace;
}

}  // namespace

ErrorTrace run_tta(const Backbone& source, const Dataset& target, const StreamOrder& stream,
                   const AdaptConfig& config, std::uint64_t seed) {
  return run_tta(source, target, stream, config, seed, nullptr);
}

ErrorTrace run_tta(const Backbone& source, const Dataset& target, const StreamOrder& stream,
                   const AdaptConfig& config, std::uint64_t seed, Backbone* adapted) {
  config.validate();
  target.validate();
  require_norm(source, config.method);
  if (!source.stats_ready()) throw StateError("source checkpoint has no normalization statistics");
  for (std::size_t i : stream) {
    if (i >= target.size()) throw InputError("stream index out of range");
  }

  Backbone model = source;
  ErrorTrace trace;
  if (is_batch_method(config.method)) {
    trace = run_batch_method(model, target, stream, config);
  } else {
    if (config.method == Method::kPbrsOnly) model.convert_bn_to_iabn(kInfiniteAlpha);
    if (config.method == Method::kIabnStar) model.convert_bn_to_iabn(config.alpha);
    NoteAdapter adapter(std::move(model), config, Rng(seed).split("note"));
    for (std::size_t i : stream) {
      const Prediction p = adapter.infer(target.inputs.sample(i));
      trace.push(target.labels[i], p.label);
    }
    model = adapter.model();
  }
  if (adapted != nullptr) *adapted = std::move(model);
  return trace;
}

}  // namespace tta
