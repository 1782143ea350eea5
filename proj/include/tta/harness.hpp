#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tta/adapt.hpp"
#include "tta/dataset.hpp"
#include "tta/model.hpp"

namespace tta {

// Test-time covariate shift: x -> scale * x + offset, per channel.
struct ShiftSpec {
  std::vector<double> offset;  // empty = no offset
  std::vector<double> scale;   // empty = unit scale
};

// Per-class template waveforms plus Gaussian noise. Templates depend only on
// template_seed so every experiment seed sees the same task.
struct SyntheticTaskSpec {
  std::size_t classes = 10;
  std::size_t length = 32;
  std::size_t channels = 1;
  std::size_t source_per_class = 200;
  std::size_t target_per_class = 100;
  double noise = 0.5;
  // Per-sample multiplicative gain drawn from U(1 - jitter, 1 + jitter).
  double gain_jitter = 0.0;
  // Per-sample, per-channel additive offset drawn from U(-jitter, jitter).
  double offset_jitter = 0.5;
  ShiftSpec shift{{1.0}, {1.0}};
  std::uint64_t template_seed = 7;

  void validate() const;
};

enum class Split { kSource, kTarget };

// (classes, channels, length) tensor of class templates.
Tensor make_templates(const SyntheticTaskSpec& spec);
// Class-major dataset: templates + noise, shifted for the target split.
Dataset gen_synthetic_dataset(const SyntheticTaskSpec& spec, Split split, std::uint64_t seed,
                              std::optional<std::size_t> per_class = std::nullopt);

enum class StreamKind { kDirichlet, kIid, kSorted };
std::string stream_kind_name(StreamKind kind);
StreamKind parse_stream_kind(const std::string& name);

StreamOrder make_stream(StreamKind kind, std::span<const int> labels, double delta,
                        std::size_t tokens, std::uint64_t seed);

inline constexpr int kConfigVersion = 1;

struct ExperimentConfig {
  SyntheticTaskSpec task;
  // input_channels, input_length and classes follow the task.
  BackboneSpec backbone;
  TrainConfig training;
  std::vector<StreamKind> streams{StreamKind::kDirichlet, StreamKind::kIid};
  double delta = 0.1;
  std::size_t tokens = 0;  // 0 = one token per class
  std::vector<Method> methods{Method::kSource, Method::kBnStats, Method::kNote};
  std::vector<std::uint64_t> seeds{0, 1, 2};
  // Per-method overrides of the default adaptation config.
  std::vector<AdaptConfig> adapt_overrides;
  std::string output_dir;      // empty = no files written
  std::string checkpoint_dir;  // empty = train source models in-process
  bool save_checkpoints = false;

  void validate() const;
  AdaptConfig adapt_config(Method method) const;
  BackboneSpec backbone_for(NormKind norm) const;
};

ExperimentConfig parse_experiment_config(const nlohmann::json& j);
nlohmann::json experiment_config_to_json(const ExperimentConfig& config);
ExperimentConfig load_experiment_config(const std::string& path);

// Checkpoint file name used for (norm kind, seed) in checkpoint_dir.
std::string checkpoint_filename(NormKind norm, std::uint64_t seed);

struct RunResult {
  Method method;
  StreamKind stream;
  double delta;
  std::uint64_t seed;
  ErrorTrace trace;
};

struct AggregateRow {
  std::string method;
  std::string stream_kind;
  double delta = 0.0;  // only meaningful for dirichlet streams
  double mean_error = 0.0;
  double std_error = 0.0;  // population standard deviation over seeds
  std::vector<std::uint64_t> seeds;
};

struct ExperimentReport {
  std::vector<RunResult> runs;
  std::vector<AggregateRow> aggregate;
};

// Caches trained source models across calls, keyed by (norm kind, seed).
class SourceModelCache {
 public:
  const Backbone& get(const ExperimentConfig& config, NormKind norm, std::uint64_t seed);
  void clear() { entries_.clear(); }

 private:
  struct Entry {
    std::string key;
    Backbone model;
  };
  std::vector<Entry> entries_;
};

ExperimentReport run_experiment(const ExperimentConfig& config, SourceModelCache* cache = nullptr);
std::vector<AggregateRow> aggregate_runs(const std::vector<RunResult>& runs);

// Columns: method,stream_kind,delta,mean_error,std_error,seeds.
void write_aggregate_csv(std::ostream& out, const std::vector<AggregateRow>& rows);

enum class SweepParam { kDelta, kBatchSize };
SweepParam parse_sweep_param(const std::string& name);
inline const std::vector<double> kSweepDeltas{10.0, 1.0, 0.1, 0.01};
inline const std::vector<std::size_t> kSweepBatchSizes{16, 32, 64, 128};

struct SweepRow {
  std::string param;
  double value = 0.0;
  AggregateRow row;
};

// Delta sweep: dirichlet streams at every delta in kSweepDeltas. Batch-size
// sweep: batch size (and NOTE memory size) at every value in
// kSweepBatchSizes on the configured streams.
std::vector<SweepRow> run_sweep(const ExperimentConfig& config, SweepParam param,
                                SourceModelCache* cache = nullptr);
// Columns: param,value,method,stream_kind,delta,mean_error,std_error,seeds.
void write_sweep_csv(std::ostream& out, const std::vector<SweepRow>& rows);

// Command-line entry point. Exit codes: 0 success, 1 runtime failure,
// 2 malformed arguments or config, 3 I/O failure.
int cli_main(int argc, const char* const* argv);

}  // namespace tta
