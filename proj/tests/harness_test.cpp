#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <gtest/gtest.h>

#include "tta/error.hpp"
#include "tta/harness.hpp"

namespace fs = std::filesystem;

namespace tta {
namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("tta_harness_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

ExperimentConfig small_config() {
  ExperimentConfig c;
  c.task.source_per_class = 30;
  c.task.target_per_class = 20;
  c.training.epochs = 3;
  c.seeds = {0, 1};
  c.methods = {Method::kSource, Method::kBnStats, Method::kNote};
  return c;
}

TEST(SyntheticData, CountsAndLabels) {
  SyntheticTaskSpec spec;
  const Dataset d = gen_synthetic_dataset(spec, Split::kSource, 0);
  EXPECT_EQ(d.size(), spec.classes * spec.source_per_class);
  std::map<int, std::size_t> counts;
  for (int y : d.labels) ++counts[y];
  for (const auto& [c, n] : counts) EXPECT_EQ(n, spec.source_per_class) << c;
  EXPECT_EQ(gen_synthetic_dataset(spec, Split::kTarget, 0, 7).size(), spec.classes * 7);
  EXPECT_EQ(d.inputs.shape(), (Shape{d.size(), spec.channels, spec.length}));
}

TEST(SyntheticData, NoShiftNoNoiseMatchesSource) {
  SyntheticTaskSpec spec;
  spec.noise = 0.0;
  spec.offset_jitter = 0.0;
  spec.shift = {};
  EXPECT_EQ(gen_synthetic_dataset(spec, Split::kSource, 3).inputs,
            gen_synthetic_dataset(spec, Split::kTarget, 3, spec.source_per_class).inputs);
}

TEST(SyntheticData, ShiftIsAffineInTheCleanSignal) {
  SyntheticTaskSpec spec;
  spec.noise = 0.0;
  spec.offset_jitter = 0.0;
  spec.shift = {{0.7}, {1.5}};
  const Dataset src = gen_synthetic_dataset(spec, Split::kSource, 3);
  const Dataset tgt = gen_synthetic_dataset(spec, Split::kTarget, 3, spec.source_per_class);
  ASSERT_EQ(src.labels, tgt.labels);
  for (std::size_t i = 0; i < src.inputs.size(); ++i)
    EXPECT_NEAR(tgt.inputs.data()[i], 1.5 * src.inputs.data()[i] + 0.7, 1e-12);
}

TEST(SyntheticData, InvalidSpecs) {
  SyntheticTaskSpec spec;
  spec.noise = -1.0;
  EXPECT_THROW(spec.validate(), ConfigError);
  spec = {};
  spec.shift.scale = {0.0};
  EXPECT_THROW(spec.validate(), ConfigError);
  spec = {};
  spec.classes = 1;
  EXPECT_THROW(spec.validate(), ConfigError);
}

TEST(Config, JsonRoundTrip) {
  ExperimentConfig c = small_config();
  c.delta = 0.5;
  c.streams = {StreamKind::kSorted};
  const ExperimentConfig back = parse_experiment_config(experiment_config_to_json(c));
  EXPECT_EQ(experiment_config_to_json(back), experiment_config_to_json(c));
  nlohmann::json j = experiment_config_to_json(c);
  j["version"] = 99;
  EXPECT_THROW(parse_experiment_config(j), ConfigError);
  j = experiment_config_to_json(c);
  j["methods"] = nlohmann::json::array({"lame"});
  EXPECT_THROW(parse_experiment_config(j), ConfigError);
  j = experiment_config_to_json(c);
  j["seeds"] = nlohmann::json::array();
  EXPECT_THROW(parse_experiment_config(j), ConfigError);
  EXPECT_THROW(load_experiment_config("/nonexistent/config.json"), ConfigError);
}

TEST(Experiment, ArtifactsAreDeterministicAndRecomputable) {
  ExperimentConfig c = small_config();
  const fs::path a = scratch_dir("a");
  const fs::path b = scratch_dir("b");
  c.output_dir = a.string();
  const ExperimentReport report = run_experiment(c);
  c.output_dir = b.string();
  run_experiment(c);

  EXPECT_EQ(report.aggregate.size(), c.methods.size() * c.streams.size());
  std::size_t files = 0;
  for (const auto& entry : fs::directory_iterator(a)) {
    ++files;
    EXPECT_EQ(slurp(entry.path()), slurp(b / entry.path().filename())) << entry.path();
  }
  EXPECT_EQ(files, c.methods.size() * c.streams.size() * c.seeds.size() + 1);

  // Recompute every aggregate row from the trace files on disk.
  for (const AggregateRow& row : report.aggregate) {
    std::vector<double> finals;
    for (std::uint64_t seed : row.seeds) {
      std::ifstream in(a / ("trace_" + row.method + "_" + row.stream_kind + "_seed" +
                            std::to_string(seed) + ".csv"));
      std::string line;
      std::getline(in, line);
      std::size_t n = 0;
      std::size_t wrong = 0;
      while (std::getline(in, line)) {
        std::stringstream ss(line);
        std::string t, truth, pred;
        std::getline(ss, t, ',');
        std::getline(ss, truth, ',');
        std::getline(ss, pred, ',');
        ++n;
        wrong += truth != pred;
      }
      finals.push_back(static_cast<double>(wrong) / n);
    }
    double mean = 0.0;
    for (double f : finals) mean += f;
    mean /= finals.size();
    double var = 0.0;
    for (double f : finals) var += (f - mean) * (f - mean);
    EXPECT_NEAR(row.mean_error, mean, 1e-12);
    EXPECT_NEAR(row.std_error, std::sqrt(var / finals.size()), 1e-12);
  }
  const std::string agg = slurp(a / "aggregate.csv");
  EXPECT_EQ(agg.substr(0, agg.find('\n')), "method,stream_kind,delta,mean_error,std_error,seeds");
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Experiment, CheckpointsSaveAndLoad) {
  ExperimentConfig c = small_config();
  c.seeds = {4};
  const fs::path dir = scratch_dir("ckpt");
  c.checkpoint_dir = dir.string();
  c.save_checkpoints = true;
  const ExperimentReport saved = run_experiment(c);
  EXPECT_TRUE(fs::exists(dir / checkpoint_filename(NormKind::kBatchNorm, 4)));
  EXPECT_TRUE(fs::exists(dir / checkpoint_filename(NormKind::kInstanceAware, 4)));
  c.save_checkpoints = false;
  const ExperimentReport loaded = run_experiment(c);
  for (std::size_t i = 0; i < saved.runs.size(); ++i)
    EXPECT_EQ(saved.runs[i].trace.predicted_labels, loaded.runs[i].trace.predicted_labels);
  fs::remove(dir / checkpoint_filename(NormKind::kInstanceAware, 4));
  EXPECT_THROW(run_experiment(c), IoError);
  fs::remove_all(dir);
}

TEST(Experiment, DeltaSweepHasEveryDelta) {
  ExperimentConfig c = small_config();
  c.seeds = {0};
  c.methods = {Method::kBnStats};
  const auto rows = run_sweep(c, SweepParam::kDelta);
  ASSERT_EQ(rows.size(), kSweepDeltas.size());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    EXPECT_EQ(rows[k].value, kSweepDeltas[k]);
    EXPECT_EQ(rows[k].row.stream_kind, "dirichlet");
  }
}

// Source model error rises on the shifted target; converting its BN layers
// to IABN at test time does not make it worse.
TEST(Experiment, ShiftHurtsSourceModel) {
  ExperimentConfig c;
  c.seeds = {0, 1, 2};
  c.methods = {Method::kSource, Method::kIabnStar};
  c.streams = {StreamKind::kIid};
  SourceModelCache cache;
  const ExperimentReport report = run_experiment(c, &cache);
  double held_out = 0.0;
  for (std::uint64_t seed : c.seeds) {
    Backbone model = cache.get(c, NormKind::kBatchNorm, seed);
    const Dataset test = gen_synthetic_dataset(c.task, Split::kSource, 1000 + seed);
    held_out += 1.0 - accuracy(model, test);
  }
  held_out /= c.seeds.size();
  ASSERT_EQ(report.aggregate.size(), 2u);
  EXPECT_GT(report.aggregate[0].mean_error, held_out);
  EXPECT_LE(report.aggregate[1].mean_error, report.aggregate[0].mean_error);
}

}  // namespace
}  // namespace tta
