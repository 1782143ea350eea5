// Acceptance suite: one PASS/FAIL line per criterion; exit status 1 if any
// criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "tta/adapt.hpp"
#include "tta/format.hpp"
#include "tta/harness.hpp"
#include "tta/normalization.hpp"
#include "tta/sampler.hpp"
#include "tta/streams.hpp"

using namespace tta;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(const char* format, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, format, args...);
  return buf;
}

Tensor random_tensor(Shape shape, Rng& rng, double mean, double sd) {
  Tensor t(shape);
  for (double& v : t.data()) v = rng.normal(mean, sd);
  return t;
}

void randomize_state(NormState& s, Rng& rng) {
  for (std::size_t c = 0; c < s.channels(); ++c) {
    s.running.mean[c] = rng.normal(0.0, 2.0);
    s.running.variance[c] = 0.05 + 4.0 * rng.uniform();
    s.gamma.value[c] = rng.normal(1.0, 0.5);
    s.beta.value[c] = rng.normal(0.0, 0.5);
  }
  s.stats_ready = true;
}

// Independent oracle: instance normalization (biased variance) or BN-eval,
// followed by the affine map.
Tensor reference_norm(const Tensor& x, const NormState& s, bool instance) {
  Tensor y(x.shape());
  const std::size_t L = x.shape().length;
  for (std::size_t b = 0; b < x.shape().batch; ++b) {
    for (std::size_t c = 0; c < x.shape().channels; ++c) {
      double mean = s.running.mean[c];
      double var = s.running.variance[c];
      if (instance) {
        mean = 0.0;
        for (std::size_t l = 0; l < L; ++l) mean += x.at(b, c, l);
        mean /= L;
        var = 0.0;
        for (std::size_t l = 0; l < L; ++l) var += (x.at(b, c, l) - mean) * (x.at(b, c, l) - mean);
        var /= L;
      }
      for (std::size_t l = 0; l < L; ++l) {
        y.at(b, c, l) =
            s.gamma.value[c] * (x.at(b, c, l) - mean) / std::sqrt(var + s.epsilon) + s.beta.value[c];
      }
    }
  }
  return y;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

Outcome limit_identities() {
  const auto start = Clock::now();
  Rng rng(101);
  double worst_in = 0.0;
  double worst_bn = 0.0;
  constexpr int kCases = 1000;
  for (int i = 0; i < kCases; ++i) {
    const std::size_t C = 1 + rng.index(4);
    const std::size_t L = 2 + rng.index(30);
    const Tensor x = random_tensor({1 + rng.index(4), C, L}, rng, rng.normal(0.0, 3.0),
                                   0.1 + 3.0 * rng.uniform());
    IabnLayer layer(C, 0.0);
    randomize_state(layer.state(), rng);
    worst_in = std::max(worst_in, max_abs_diff(layer.forward(x, NormMode::kEval, nullptr),
                                               reference_norm(x, layer.state(), true)));
    layer.set_alpha(kInfiniteAlpha);
    worst_bn = std::max(worst_bn, max_abs_diff(layer.forward(x, NormMode::kEval, nullptr),
                                               reference_norm(x, layer.state(), false)));
  }
  const double elapsed = seconds_since(start);
  return {worst_in <= 1e-9 && worst_bn <= 1e-9 && elapsed < 5.0,
          fmt("%d cases, max |IABN(0)-IN| %.2e, max |IABN(inf)-BN| %.2e, %.2f s", kCases, worst_in,
              worst_bn, elapsed)};
}

Outcome soft_shrink_algebra() {
  Rng rng(102);
  std::size_t violations = 0;
  constexpr int kSamples = 100000;
  for (int i = 0; i < kSamples; ++i) {
    const double x = rng.normal(0.0, 5.0);
    const double y = rng.normal(0.0, 5.0);
    const double lam = 5.0 * rng.uniform();
    const double ulps = 4e-16 * (std::abs(x) + std::abs(y) + lam);
    violations += soft_shrink(-x, lam) != -soft_shrink(x, lam);
    violations += std::abs(soft_shrink(x, lam) - soft_shrink(y, lam)) > std::abs(x - y) + ulps;
    violations += (soft_shrink(x, lam) == 0.0) != (std::abs(x) <= lam);
  }
  const InstanceStats inst = instance_stats(Tensor({1, 1, 5}, {0, 0, 0, 0, 10}));
  const InstanceStats out = iabn_correct_stats(inst, ChannelStats(1, 0.0, 1.0), 4.0, 5);
  const bool example = std::abs(out.mean_at(0, 0) - 0.21115) <= 1e-5 &&
                       std::abs(out.variance_at(0, 0) - 13.17157) <= 1e-5;
  return {violations == 0 && example,
          fmt("%zu violations over %d samples; worked example mu %.5f var %.5f", violations,
              kSamples, out.mean_at(0, 0), out.variance_at(0, 0))};
}

Outcome gradient_checks() {
  constexpr int kNets = 20;
  std::size_t coords = 0;
  std::size_t good = 0;
  double worst_abs = 0.0;
  for (int net = 0; net < kNets; ++net) {
    Rng rng(200 + net);
    BackboneSpec spec;
    spec.input_length = 16;
    spec.conv_channels = {3, 4};
    spec.kernel = 3;
    spec.classes = 4;
    spec.norm = NormKind::kInstanceAware;
    spec.alpha = 0.5 + 4.0 * rng.uniform();
    Backbone model = build_backbone(spec, 300 + net);
    for (NormState* s : model.norm_states()) randomize_state(*s, rng);
    const Tensor x = random_tensor({4, 1, 16}, rng, rng.normal(), 1.0 + rng.uniform());
    const std::vector<int> labels{0, 1, 2, 3};
    for (bool entropy : {true, false}) {
      auto loss = [&](GradientTape* tape) {
        const Tensor logits = model.forward(x, NormMode::kEval, tape);
        return entropy ? entropy_from_logits(logits, tape)
                       : softmax_cross_entropy(logits, labels, tape);
      };
      model.zero_grad();
      GradientTape tape;
      loss(&tape);
      tape.backward();
      for (Parameter* p : model.affine_parameters()) {
        const std::vector<double> theta = p->value;
        const auto numeric = finite_difference_grad(
            [&](std::span<const double> t) {
              p->value.assign(t.begin(), t.end());
              return loss(nullptr);
            },
            theta, 1e-4);
        p->value = theta;
        for (std::size_t i = 0; i < theta.size(); ++i) {
          const double err = std::abs(p->grad[i] - numeric[i]);
          const double scale = std::max({std::abs(p->grad[i]), std::abs(numeric[i]), 1e-7});
          worst_abs = std::max(worst_abs, err);
          ++coords;
          good += err / scale <= 1e-4;
        }
      }
    }
  }
  const double frac = static_cast<double>(good) / coords;
  return {frac >= 0.95 && worst_abs <= 1e-3,
          fmt("%zu/%zu coordinates within rel. 1e-4 (%.1f%%), max abs error %.2e over %d nets", good,
              coords, 100.0 * frac, worst_abs, kNets)};
}

bool within_3se(std::size_t hits, std::size_t trials, double p) {
  const double se = std::sqrt(p * (1.0 - p) / trials);
  return std::abs(static_cast<double>(hits) / trials - p) <= 3.0 * se;
}

Outcome reservoir_correctness() {
  constexpr std::size_t N = 8;
  constexpr std::size_t T = 64;
  constexpr std::size_t kSeeds = 10000;
  const std::vector<std::size_t> checked{9, 16, 24, 32, 48, 64};
  std::vector<std::size_t> rs_hits(T + 1, 0);
  std::vector<std::size_t> pbrs_hits(T + 1, 0);
  const Tensor sample({1, 1, 2}, 0.0);
  for (std::size_t s = 0; s < kSeeds; ++s) {
    MemoryBank rs(N, Rng(s));
    MemoryBank pbrs(N, Rng(s).split("pbrs"));
    for (std::size_t t = 1; t <= T; ++t) {
      if (rs.offer_reservoir(sample, static_cast<int>(t % 5))) ++rs_hits[t];
      if (pbrs.offer_prediction_balanced(sample, 2)) ++pbrs_hits[t];
    }
  }
  std::size_t failures = 0;
  std::ostringstream detail;
  for (std::size_t t : checked) {
    const double p = static_cast<double>(N) / t;
    failures += !within_3se(rs_hits[t], kSeeds, p);
    failures += !within_3se(pbrs_hits[t], kSeeds, p);
    detail << " t=" << t << ": " << format_double(static_cast<double>(rs_hits[t]) / kSeeds, 4) << "/"
           << format_double(static_cast<double>(pbrs_hits[t]) / kSeeds, 4) << " vs "
           << format_double(p, 4);
  }
  return {failures == 0, "RS/PBRS inclusion over 1e4 seeds (N=8, T=64):" + detail.str()};
}

double class_count_std(const MemoryBank& bank, int classes) {
  const auto counts = bank.class_counts();
  std::vector<double> v(classes, 0.0);
  for (const auto& [c, n] : counts) v[c] = static_cast<double>(n);
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / classes;
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / classes);
}

Outcome pbrs_balance() {
  constexpr int kClasses = 10;
  constexpr int kSeeds = 20;
  std::vector<int> labels;
  for (int c = 0; c < kClasses; ++c) labels.insert(labels.end(), 500, c);
  const Tensor sample({1, 1, 2}, 0.0);
  double pbrs_std = 0.0;
  double rs_std = 0.0;
  for (int seed = 0; seed < kSeeds; ++seed) {
    StreamSpec spec;
    spec.delta = 0.1;
    spec.seed = 1000 + seed;
    const StreamOrder order = make_dirichlet_stream(labels, spec);
    MemoryBank pbrs(64, Rng(seed));
    MemoryBank rs(64, Rng(seed));
    for (std::size_t idx : order) {
      pbrs.offer_prediction_balanced(sample, labels[idx]);
      rs.offer_reservoir(sample, labels[idx]);
    }
    pbrs_std += class_count_std(pbrs, kClasses) / kSeeds;
    rs_std += class_count_std(rs, kClasses) / kSeeds;
  }
  return {pbrs_std < rs_std,
          fmt("mean per-class count std PBRS %.3f vs RS %.3f (5000 offers, N=64, %d seeds)", pbrs_std,
              rs_std, kSeeds)};
}

Outcome ema_fixed_point() {
  NormState state(1);
  const double v = 1.7;
  const std::size_t N = 64;
  const double target = v * N / (N - 1.0);
  int steps = 0;
  while (steps < 2000) {
    ema_update_stats(state, ChannelStats(1, v, v), 0.01, N);
    ++steps;
    if (std::abs(state.running.mean[0] - target) <= 1e-6 &&
        std::abs(state.running.variance[0] - target) <= 1e-6)
      break;
  }
  const double err = std::max(std::abs(state.running.mean[0] - target),
                              std::abs(state.running.variance[0] - target));
  return {err <= 1e-6, fmt("|stat - v*N/(N-1)| = %.2e after %d steps (m=0.01, N=64)", err, steps)};
}

Outcome batch_free_inference(Backbone model, const Dataset& data) {
  Rng rng(700);
  std::size_t mismatches = 0;
  std::size_t checked = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t B = 2 + rng.index(63);
    std::vector<std::size_t> idx(B);
    for (auto& i : idx) i = rng.index(data.size());
    const Tensor x = data.inputs.gather(idx);
    const auto batch = predict_batch(model, x);
    for (std::size_t b = 0; b < B; ++b) {
      const Prediction single = predict(model, x.sample(b));
      mismatches += single.label != batch[b].label || single.probabilities != batch[b].probabilities;
      ++checked;
    }
  }
  return {mismatches == 0,
          fmt("%zu/%zu single-sample predictions bit-identical to in-batch ones (100 batches)",
              checked - mismatches, checked)};
}

const AggregateRow& find_row(const ExperimentReport& r, const std::string& method,
                             const std::string& stream) {
  for (const auto& row : r.aggregate)
    if (row.method == method && row.stream_kind == stream) return row;
  throw std::runtime_error("missing aggregate row " + method + "/" + stream);
}

Outcome non_iid_robustness(SourceModelCache& cache) {
  const auto start = Clock::now();
  ExperimentConfig config;
  config.methods = {Method::kSource, Method::kBnStats, Method::kNote};
  config.streams = {StreamKind::kDirichlet, StreamKind::kIid};
  const ExperimentReport r = run_experiment(config, &cache);
  const double elapsed = seconds_since(start);
  const double bn_dir = find_row(r, "bn_stats", "dirichlet").mean_error;
  const double bn_iid = find_row(r, "bn_stats", "iid").mean_error;
  const double note_dir = find_row(r, "note", "dirichlet").mean_error;
  const double note_iid = find_row(r, "note", "iid").mean_error;
  const bool a = bn_dir - bn_iid >= 0.05;
  const bool b = note_dir <= bn_dir;
  const bool c = std::abs(note_iid - note_dir) <= 0.05;
  return {a && b && c && elapsed < 120.0,
          fmt("(a) BN-stats dir %.1f%% vs iid %.1f%% %s; (b) NOTE dir %.1f%% <= BN-stats %s; "
              "(c) NOTE iid %.1f%% vs dir %s; source %.1f%%; %.1f s",
              100 * bn_dir, 100 * bn_iid, a ? "ok" : "FAIL", 100 * note_dir, b ? "ok" : "FAIL",
              100 * note_iid, c ? "ok" : "FAIL",
              100 * find_row(r, "source", "dirichlet").mean_error, elapsed)};
}

Outcome ablation_ordering(SourceModelCache& cache) {
  ExperimentConfig config;
  config.methods = {Method::kNote, Method::kIabnOnly, Method::kPbrsOnly};
  config.streams = {StreamKind::kDirichlet};
  const ExperimentReport r = run_experiment(config, &cache);
  const double both = find_row(r, "note", "dirichlet").mean_error;
  const double iabn = find_row(r, "iabn", "dirichlet").mean_error;
  const double pbrs = find_row(r, "pbrs", "dirichlet").mean_error;
  return {both <= iabn + 0.01 && both <= pbrs + 0.01,
          fmt("IABN+PBRS %.1f%%, IABN-only %.1f%%, PBRS-only %.1f%% (delta=0.1, 3 seeds)", 100 * both,
              100 * iabn, 100 * pbrs)};
}

Outcome freeze_audit(SourceModelCache& cache) {
  ExperimentConfig config;
  const Backbone& source = cache.get(config, NormKind::kInstanceAware, 0);
  std::stringstream ckpt;
  write_checkpoint(ckpt, source, TrainingMeta{});
  const Backbone reference = read_checkpoint(ckpt);

  const Dataset target = gen_synthetic_dataset(config.task, Split::kTarget, 0);
  StreamSpec spec;
  spec.seed = 5;
  const StreamOrder order = make_dirichlet_stream(target.labels, spec);
  NoteAdapter adapter(reference, default_config(Method::kNote), Rng(0));
  for (std::size_t idx : order) adapter.infer(target.inputs.sample(idx));

  const auto before = reference.parameters();
  const auto after = adapter.model().parameters();
  std::size_t frozen_changed = 0;
  std::size_t affine_changed = 0;
  std::size_t trainable = 0;
  for (std::size_t i = 0; i < before.size(); ++i) {
    const bool affine = before[i]->name.find(".norm.") != std::string::npos;
    if (after[i]->trainable) trainable += after[i]->size();
    for (std::size_t k = 0; k < before[i]->size(); ++k) {
      if (before[i]->value[k] != after[i]->value[k]) ++(affine ? affine_changed : frozen_changed);
    }
  }
  const std::size_t expected = 2 * adapter.model().norm_channels();
  const std::size_t updated = adapter.optimizer().tracked_scalars();
  return {frozen_changed == 0 && updated == expected && trainable == expected,
          fmt("%zu non-affine scalars changed; optimizer updated %zu scalars (2*sum C = %zu, %zu "
              "changed, %zu adapt steps) of %zu total",
              frozen_changed, updated, expected, affine_changed, adapter.adaptations(),
              adapter.model().parameter_count())};
}

}  // namespace

int main() {
  SourceModelCache cache;
  std::map<int, std::pair<std::string, Outcome>> results;
  auto run = [&](int id, const std::string& name, const std::function<Outcome()>& fn) {
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::printf("[%s] criterion %d (%s): %s\n", o.pass ? "PASS" : "FAIL", id, name.c_str(),
                o.detail.c_str());
    std::fflush(stdout);
    results[id] = {name, o};
  };

  run(1, "limit identities", limit_identities);
  run(2, "soft-shrinkage algebra", soft_shrink_algebra);
  run(3, "gradient checks", gradient_checks);
  run(4, "reservoir correctness", reservoir_correctness);
  run(5, "PBRS balance dominance", pbrs_balance);
  run(6, "EMA fixed point", ema_fixed_point);
  // Criterion 8 runs before 7 so its timing includes source training.
  Outcome eight;
  try {
    eight = non_iid_robustness(cache);
  } catch (const std::exception& e) {
    eight = {false, std::string("exception: ") + e.what()};
  }
  run(7, "batch-free inference", [&] {
    ExperimentConfig config;
    const Dataset data = gen_synthetic_dataset(config.task, Split::kTarget, 0);
    return batch_free_inference(cache.get(config, NormKind::kInstanceAware, 0), data);
  });
  run(8, "non-i.i.d. robustness", [&] { return eight; });
  run(9, "ablation ordering", [&] { return ablation_ordering(cache); });
  run(10, "parameter-freeze audit", [&] { return freeze_audit(cache); });

  std::size_t failed = 0;
  for (const auto& [id, r] : results) failed += !r.second.pass;
  std::printf("%zu/%zu criteria passed\n", results.size() - failed, results.size());
  return failed == 0 ? 0 : 1;
}
