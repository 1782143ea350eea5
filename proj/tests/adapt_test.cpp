#include <cmath>
#include <numeric>
#include <sstream>

#include <gtest/gtest.h>

#include "tta/adapt.hpp"
#include "tta/error.hpp"
#include "tta/harness.hpp"

namespace tta {
namespace {

struct Fixture {
  SyntheticTaskSpec task;
  Dataset source;
  Dataset target;
  Backbone bn;
  Backbone iabn;
};

// Small source models shared by every test in this file.
const Fixture& fixture() {
  static const Fixture f = [] {
    Fixture x;
    x.task.source_per_class = 80;
    x.task.target_per_class = 40;
    x.source = gen_synthetic_dataset(x.task, Split::kSource, 0);
    x.target = gen_synthetic_dataset(x.task, Split::kTarget, 0);
    TrainConfig cfg;
    cfg.epochs = 20;
    for (NormKind norm : {NormKind::kBatchNorm, NormKind::kInstanceAware}) {
      BackboneSpec spec;
      spec.norm = norm;
      Backbone model = build_backbone(spec, 0);
      train_source(model, x.source, cfg);
      (norm == NormKind::kBatchNorm ? x.bn : x.iabn) = std::move(model);
    }
    return x;
  }();
  return f;
}

const Backbone& source_for(Method m) {
  return required_norm(m) == NormKind::kBatchNorm ? fixture().bn : fixture().iabn;
}

bool same_values(const Backbone& a, const Backbone& b, bool affine) {
  const auto pa = a.parameters();
  const auto pb = b.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) {
    const bool is_affine = pa[i]->name.find(".norm.") != std::string::npos;
    if (is_affine == affine && pa[i]->value != pb[i]->value) return false;
  }
  return true;
}

TEST(DefaultConfig, PublishedValues) {
  const AdaptConfig note = default_config(Method::kNote);
  EXPECT_EQ(note.alpha, 4.0);
  EXPECT_EQ(note.memory_size, 64u);
  EXPECT_EQ(note.momentum, 0.01);
  EXPECT_EQ(note.lr, 1e-4);
  const AdaptConfig onda = default_config(Method::kOnda);
  EXPECT_EQ(onda.onda_frequency, 10u);
  EXPECT_EQ(onda.onda_decay, 0.1);
  EXPECT_EQ(default_config(Method::kTent).lr, 1e-3);
  EXPECT_EQ(default_config(Method::kTent).batch_size, 64u);
  EXPECT_EQ(default_config(Method::kPseudoLabel).lr, 1e-3);
  EXPECT_EQ(default_config(Method::kPseudoLabel).batch_size, 64u);
  EXPECT_EQ(default_config(Method::kNoteStar).lr, 1e-3);
  EXPECT_EQ(default_config(Method::kIabnRs).sampling, SamplingPolicy::kReservoir);
  EXPECT_FALSE(default_config(Method::kIabnOnly).adapt);
  EXPECT_THROW(parse_method("lame"), InputError);
  for (Method m : all_methods()) EXPECT_EQ(parse_method(method_name(m)), m);
}

TEST(ErrorTrace, CumulativeErrorAndCsv) {
  ErrorTrace trace;
  trace.push(1, 1);
  trace.push(0, 2);
  trace.push(3, 3);
  trace.push(2, 0);
  EXPECT_EQ(trace.errors(), 2u);
  for (std::size_t t = 0; t < trace.size(); ++t) {
    std::size_t wrong = 0;
    for (std::size_t i = 0; i <= t; ++i) wrong += trace.true_labels[i] != trace.predicted_labels[i];
    EXPECT_DOUBLE_EQ(trace.cumulative_error[t], static_cast<double>(wrong) / (t + 1));
  }
  EXPECT_DOUBLE_EQ(trace.final_error(), 0.5);
  std::ostringstream out;
  trace.write_csv(out);
  EXPECT_EQ(out.str().substr(0, out.str().find('\n')), "t,true_label,predicted_label,cumulative_error");
}

TEST(NoteInfer, RequiresIabnBackbone) {
  EXPECT_THROW(NoteAdapter(fixture().bn, default_config(Method::kNote), Rng(0)), ConfigError);
  BackboneSpec spec;
  spec.norm = NormKind::kInstanceAware;
  EXPECT_THROW(NoteAdapter(build_backbone(spec, 0), default_config(Method::kNote), Rng(0)),
               StateError);
  NoteAdapter adapter(fixture().iabn, default_config(Method::kNote), Rng(0));
  EXPECT_THROW(adapter.adapt_step(), StateError);
}

TEST(NoteInfer, OneAdaptStepPerMemorySize) {
  const Fixture& f = fixture();
  NoteAdapter adapter(f.iabn, default_config(Method::kNote), Rng(1));
  for (std::size_t i = 0; i < 200; ++i) {
    adapter.infer(f.target.inputs.sample(i * 2));
    EXPECT_EQ(adapter.adaptations(), adapter.samples_seen() / 64);
  }
}

TEST(NoteInfer, CausalPredictions) {
  const Fixture& f = fixture();
  const StreamOrder a = make_iid_stream(f.target.labels, 1);
  StreamOrder b = a;
  std::reverse(b.begin() + 100, b.end());
  NoteAdapter na(f.iabn, default_config(Method::kNote), Rng(2));
  NoteAdapter nb(f.iabn, default_config(Method::kNote), Rng(2));
  for (std::size_t i = 0; i < a.size(); ++i) {
    const Prediction pa = na.infer(f.target.inputs.sample(a[i]));
    const Prediction pb = nb.infer(f.target.inputs.sample(b[i]));
    if (i < 100) EXPECT_EQ(pa.probabilities, pb.probabilities) << i;
  }
}

TEST(NoteAdaptStep, ZeroLearningRateOnlyChangesStats) {
  const Fixture& f = fixture();
  AdaptConfig cfg = default_config(Method::kNote);
  cfg.lr = 0.0;
  NoteAdapter adapter(f.iabn, cfg, Rng(3));
  for (std::size_t i = 0; i < 64; ++i) adapter.infer(f.target.inputs.sample(i * 5));
  EXPECT_EQ(adapter.adaptations(), 1u);
  EXPECT_TRUE(same_values(adapter.model(), f.iabn, true));
  EXPECT_TRUE(same_values(adapter.model(), f.iabn, false));
  bool stats_moved = false;
  for (std::size_t k = 0; k < f.iabn.norm_states().size(); ++k) {
    stats_moved |= adapter.model().norm_states()[k]->running.mean !=
                   f.iabn.norm_states()[k]->running.mean;
  }
  EXPECT_TRUE(stats_moved);
}

TEST(NoteAdaptStep, UpdatesExactlyTheAffineParameters) {
  const Fixture& f = fixture();
  NoteAdapter adapter(f.iabn, default_config(Method::kNote), Rng(4));
  for (std::size_t i = 0; i < 128; ++i) adapter.infer(f.target.inputs.sample(i * 3));
  EXPECT_EQ(adapter.optimizer().tracked_scalars(), 2 * adapter.model().norm_channels());
  EXPECT_EQ(adapter.model().affine_parameter_count(), 2u * (8 + 16));
  EXPECT_LT(adapter.model().affine_parameter_count() * 10, adapter.model().parameter_count());
  EXPECT_TRUE(same_values(adapter.model(), f.iabn, false));
  EXPECT_FALSE(same_values(adapter.model(), f.iabn, true));
}

// One small Adam step on the memory entropy, compared with the same step at
// lr = 0 so the EMA update is common to both sides.
TEST(NoteAdaptStep, EntropyDescends) {
  const Fixture& f = fixture();
  int non_increasing = 0;
  constexpr int kSeeds = 50;
  for (int seed = 0; seed < kSeeds; ++seed) {
    AdaptConfig cfg = default_config(Method::kNote);
    cfg.adapt = false;
    const StreamOrder order = make_iid_stream(f.target.labels, seed);
    NoteAdapter with_step(f.iabn, cfg, Rng(seed));
    for (std::size_t i = 0; i < 64; ++i) with_step.infer(f.target.inputs.sample(order[i]));
    cfg.lr = 0.0;
    NoteAdapter without(f.iabn, cfg, Rng(seed));
    for (std::size_t i = 0; i < 64; ++i) without.infer(f.target.inputs.sample(order[i]));
    ASSERT_EQ(without.memory().batch(), with_step.memory().batch());
    const Tensor memory = with_step.memory().batch();
    with_step.adapt_step();
    without.adapt_step();
    non_increasing +=
        prediction_entropy(with_step.model(), memory) <= prediction_entropy(without.model(), memory);
  }
  EXPECT_GE(non_increasing, kSeeds * 9 / 10);
}

TEST(RunTta, SourceIsOrderFree) {
  const Fixture& f = fixture();
  const StreamOrder iid = make_iid_stream(f.target.labels, 1);
  const StreamOrder sorted = make_sorted_stream(f.target.labels);
  const AdaptConfig cfg = default_config(Method::kSource);
  const ErrorTrace a = run_tta(f.bn, f.target, iid, cfg, 0);
  const ErrorTrace b = run_tta(f.bn, f.target, sorted, cfg, 0);
  std::vector<int> pa(f.target.size());
  std::vector<int> pb(f.target.size());
  for (std::size_t i = 0; i < iid.size(); ++i) {
    pa[iid[i]] = a.predicted_labels[i];
    pb[sorted[i]] = b.predicted_labels[i];
  }
  EXPECT_EQ(pa, pb);
  EXPECT_EQ(a.errors(), b.errors());
}

TEST(RunTta, BnStatsIsOrderSensitive) {
  const Fixture& f = fixture();
  const AdaptConfig cfg = default_config(Method::kBnStats);
  const ErrorTrace iid = run_tta(f.bn, f.target, make_iid_stream(f.target.labels, 1), cfg, 0);
  const ErrorTrace sorted = run_tta(f.bn, f.target, make_sorted_stream(f.target.labels), cfg, 0);
  EXPECT_NE(iid.errors(), sorted.errors());
}

TEST(RunTta, TentWithZeroLearningRateEqualsBnStats) {
  const Fixture& f = fixture();
  const StreamOrder order = make_iid_stream(f.target.labels, 3);
  AdaptConfig tent = default_config(Method::kTent);
  tent.lr = 0.0;
  const ErrorTrace a = run_tta(f.bn, f.target, order, tent, 0);
  const ErrorTrace b = run_tta(f.bn, f.target, order, default_config(Method::kBnStats), 0);
  EXPECT_EQ(a.predicted_labels, b.predicted_labels);
}

TEST(RunTta, NoteWithHugeMemoryEqualsIabnOnly) {
  const Fixture& f = fixture();
  const StreamOrder order = make_iid_stream(f.target.labels, 4);
  AdaptConfig note = default_config(Method::kNote);
  note.memory_size = f.target.size() + 1;
  const ErrorTrace a = run_tta(f.iabn, f.target, order, note, 0);
  const ErrorTrace b = run_tta(f.iabn, f.target, order, default_config(Method::kIabnOnly), 0);
  EXPECT_EQ(a.predicted_labels, b.predicted_labels);
}

TEST(RunTta, NoteFreezesNonAffineWeights) {
  const Fixture& f = fixture();
  Backbone adapted;
  run_tta(f.iabn, f.target, make_iid_stream(f.target.labels, 5), default_config(Method::kNote), 0,
          &adapted);
  EXPECT_TRUE(same_values(adapted, f.iabn, false));
  EXPECT_FALSE(same_values(adapted, f.iabn, true));
}

TEST(RunTta, InputChecks) {
  const Fixture& f = fixture();
  const StreamOrder short_stream{0, 1, 2};
  EXPECT_THROW(run_tta(f.bn, f.target, short_stream, default_config(Method::kTent), 0), InputError);
  EXPECT_THROW(run_tta(f.bn, f.target, make_iid_stream(f.target.labels, 0),
                       default_config(Method::kNote), 0),
               ConfigError);
}

TEST(RunTta, EveryMethodRunsAndIsDeterministic) {
  const Fixture& f = fixture();
  StreamSpec spec;
  spec.seed = 6;
  const StreamOrder order = make_dirichlet_stream(f.target.labels, spec);
  for (Method m : all_methods()) {
    const ErrorTrace a = run_tta(source_for(m), f.target, order, default_config(m), 9);
    const ErrorTrace b = run_tta(source_for(m), f.target, order, default_config(m), 9);
    EXPECT_EQ(a.size(), f.target.size()) << method_name(m);
    EXPECT_EQ(a.predicted_labels, b.predicted_labels) << method_name(m);
  }
}

// A batch holding one class only: standardizing with its own statistics
// removes the class-specific offset and scale the source model relies on.
TEST(RunTta, SingleClassBatchesHurtBnStats) {
  const Fixture& f = fixture();
  int not_better = 0;
  constexpr int kSeeds = 10;
  Backbone model = f.bn;
  for (int seed = 0; seed < kSeeds; ++seed) {
    const Dataset clean = gen_synthetic_dataset(f.task, Split::kSource, 100 + seed, 64);
    const int cls = seed % static_cast<int>(f.task.classes);
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < clean.size(); ++i)
      if (clean.labels[i] == cls) idx.push_back(i);
    const Tensor batch = clean.inputs.gather(idx);
    std::size_t bn_right = 0;
    std::size_t src_right = 0;
    const auto bn_pred = predict_batch(model, batch, NormMode::kTestBatch);
    const auto src_pred = predict_batch(model, batch, NormMode::kEval);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      bn_right += bn_pred[i].label == cls;
      src_right += src_pred[i].label == cls;
    }
    not_better += bn_right <= src_right;
  }
  EXPECT_GE(not_better, kSeeds * 6 / 10);
}

}  // namespace
}  // namespace tta
