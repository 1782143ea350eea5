#include "tta/harness.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "tta/error.hpp"
#include "tta/format.hpp"

namespace tta {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Synthetic task

void SyntheticTaskSpec::validate() const {
  if (classes < 2) throw ConfigError("task: at least two classes required");
  if (channels == 0 || length < 2) throw ConfigError("task: empty sample shape");
  if (!(noise >= 0.0)) throw ConfigError("task: noise must be non-negative");
  if (!(gain_jitter >= 0.0 && gain_jitter < 1.0)) throw ConfigError("task: gain jitter must lie in [0, 1)");
  if (!(offset_jitter >= 0.0)) throw ConfigError("task: offset jitter must be non-negative");
  if (!shift.offset.empty() && shift.offset.size() != channels) {
    throw ConfigError("task: shift offset needs one entry per channel");
  }
  if (!shift.scale.empty() && shift.scale.size() != channels) {
    throw ConfigError("task: shift scale needs one entry per channel");
  }
  for (double s : shift.scale) {
    if (!(s > 0.0)) throw ConfigError("task: shift scale must be positive");
  }
}

Tensor make_templates(const SyntheticTaskSpec& spec) {
  spec.validate();
  Rng rng = Rng(spec.template_seed).split("templates");
  Tensor t({spec.classes, spec.channels, spec.length});
  const double two_pi = 2.0 * M_PI;
  for (std::size_t k = 0; k < spec.classes; ++k) {
    for (std::size_t c = 0; c < spec.channels; ++c) {
      // Two sinusoids with class-specific frequency, phase, and amplitude.
      const double f1 = 1.0 + static_cast<double>(rng.index(4));
      const double f2 = 2.0 + static_cast<double>(rng.index(5));
      const double p1 = two_pi * rng.uniform();
      const double p2 = two_pi * rng.uniform();
      const double a1 = 0.5 + rng.uniform();
      const double a2 = 0.25 + 0.5 * rng.uniform();
      const double dc = rng.uniform() - 0.5;
      auto row = t.row(k, c);
      for (std::size_t l = 0; l < spec.length; ++l) {
        const double u = static_cast<double>(l) / static_cast<double>(spec.length);
        row[l] = dc + a1 * std::sin(two_pi * f1 * u + p1) + a2 * std::sin(two_pi * f2 * u + p2);
      }
    }
  }
  for (std::size_t a = 0; a < spec.classes; ++a) {
    for (std::size_t b = a + 1; b < spec.classes; ++b) {
      double d = 0.0;
      auto ta = t.sample_span(a);
      auto tb = t.sample_span(b);
      for (std::size_t i = 0; i < ta.size(); ++i) d += (ta[i] - tb[i]) * (ta[i] - tb[i]);
      if (std::sqrt(d) < 1e-6) throw ConfigError("task: degenerate (identical) class templates");
    }
  }
  return t;
}

Dataset gen_synthetic_dataset(const SyntheticTaskSpec& spec, Split split, std::uint64_t seed,
                              std::optional<std::size_t> per_class) {
  const Tensor templates = make_templates(spec);
  const std::size_t count =
      per_class.value_or(split == Split::kSource ? spec.source_per_class : spec.target_per_class);
  Rng rng = Rng(seed).split(split == Split::kSource ? "source-data" : "target-data");
  Dataset data;
  data.inputs = Tensor({spec.classes * count, spec.channels, spec.length});
  data.labels.reserve(spec.classes * count);
  std::size_t b = 0;
  for (std::size_t k = 0; k < spec.classes; ++k) {
    for (std::size_t i = 0; i < count; ++i, ++b) {
      const double gain =
          spec.gain_jitter > 0.0 ? 1.0 + spec.gain_jitter * (2.0 * rng.uniform() - 1.0) : 1.0;
      for (std::size_t c = 0; c < spec.channels; ++c) {
        const double jitter =
            spec.offset_jitter > 0.0 ? spec.offset_jitter * (2.0 * rng.uniform() - 1.0) : 0.0;
        auto tr = templates.row(k, c);
        auto xr = data.inputs.row(b, c);
        const double scale =
            split == Split::kTarget && !spec.shift.scale.empty() ? spec.shift.scale[c] : 1.0;
        const double offset =
            split == Split::kTarget && !spec.shift.offset.empty() ? spec.shift.offset[c] : 0.0;
        for (std::size_t l = 0; l < spec.length; ++l) {
          const double clean = gain * tr[l] + jitter + (spec.noise > 0.0 ? rng.normal(0.0, spec.noise) : 0.0);
          xr[l] = scale * clean + offset;
        }
      }
      data.labels.push_back(static_cast<int>(k));
    }
  }
  return data;
}

// ---------------------------------------------------------------------------
// Streams

std::string stream_kind_name(StreamKind kind) {
  switch (kind) {
    case StreamKind::kDirichlet:
      return "dirichlet";
    case StreamKind::kIid:
      return "iid";
    case StreamKind::kSorted:
      return "sorted";
  }
  return "?";
}

StreamKind parse_stream_kind(const std::string& name) {
  if (name == "dirichlet") return StreamKind::kDirichlet;
  if (name == "iid") return StreamKind::kIid;
  if (name == "sorted") return StreamKind::kSorted;
  throw InputError("unknown stream kind '" + name + "'");
}

StreamOrder make_stream(StreamKind kind, std::span<const int> labels, double delta,
                        std::size_t tokens, std::uint64_t seed) {
  switch (kind) {
    case StreamKind::kDirichlet: {
      StreamSpec spec;
      spec.delta = delta;
      spec.tokens = tokens;
      spec.seed = seed;
      return make_dirichlet_stream(labels, spec);
    }
    case StreamKind::kIid:
      return make_iid_stream(labels, seed);
    case StreamKind::kSorted:
      return make_sorted_stream(labels);
  }
  throw InputError("unknown stream kind");
}

// ---------------------------------------------------------------------------
// Config

void ExperimentConfig::validate() const {
  task.validate();
  backbone_for(NormKind::kBatchNorm).validate();
  if (seeds.empty()) throw ConfigError("config: at least one seed required");
  if (methods.empty()) throw ConfigError("config: at least one method required");
  if (streams.empty()) throw ConfigError("config: at least one stream kind required");
  if (!(delta > 0.0)) throw ConfigError("config: delta must be positive");
  for (Method m : methods) adapt_config(m).validate();
}

AdaptConfig ExperimentConfig::adapt_config(Method method) const {
  for (const auto& o : adapt_overrides) {
    if (o.method == method) return o;
  }
  return default_config(method);
}

BackboneSpec ExperimentConfig::backbone_for(NormKind norm) const {
  BackboneSpec spec = backbone;
  spec.input_channels = task.channels;
  spec.input_length = task.length;
  spec.classes = task.classes;
  spec.norm = norm;
  return spec;
}

namespace {

template <typename T>
void read_opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

double read_alpha(const json& v) {
  if (v.is_string() && v.get<std::string>() == "inf") return kInfiniteAlpha;
  return v.get<double>();
}

json alpha_json(double alpha) { return std::isinf(alpha) ? json("inf") : json(alpha); }

AdaptConfig parse_adapt(const std::string& name, const json& j) {
  AdaptConfig c = default_config(parse_method(name));
  read_opt(j, "memory_size", c.memory_size);
  read_opt(j, "momentum", c.momentum);
  read_opt(j, "lr", c.lr);
  if (j.contains("alpha")) c.alpha = read_alpha(j.at("alpha"));
  read_opt(j, "batch_size", c.batch_size);
  read_opt(j, "onda_frequency", c.onda_frequency);
  read_opt(j, "onda_decay", c.onda_decay);
  read_opt(j, "adapt", c.adapt);
  if (j.contains("sampling")) {
    const auto s = j.at("sampling").get<std::string>();
    if (s == "pbrs") c.sampling = SamplingPolicy::kPredictionBalanced;
    else if (s == "reservoir") c.sampling = SamplingPolicy::kReservoir;
    else throw ConfigError("unknown sampling policy '" + s + "'");
  }
  return c;
}

json adapt_json(const AdaptConfig& c) {
  return json{{"memory_size", c.memory_size},
              {"momentum", c.momentum},
              {"lr", c.lr},
              {"alpha", alpha_json(c.alpha)},
              {"batch_size", c.batch_size},
              {"onda_frequency", c.onda_frequency},
              {"onda_decay", c.onda_decay},
              {"adapt", c.adapt},
              {"sampling", c.sampling == SamplingPolicy::kReservoir ? "reservoir" : "pbrs"}};
}

}  // namespace

ExperimentConfig parse_experiment_config(const json& j) {
  try {
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    if (j.value("version", -1) != kConfigVersion) {
      throw ConfigError("config: unsupported or missing version (expected " +
                        std::to_string(kConfigVersion) + ")");
    }
    ExperimentConfig c;
    if (j.contains("task")) {
      const auto& t = j.at("task");
      read_opt(t, "classes", c.task.classes);
      read_opt(t, "length", c.task.length);
      read_opt(t, "channels", c.task.channels);
      read_opt(t, "source_per_class", c.task.source_per_class);
      read_opt(t, "target_per_class", c.task.target_per_class);
      read_opt(t, "noise", c.task.noise);
      read_opt(t, "gain_jitter", c.task.gain_jitter);
      read_opt(t, "offset_jitter", c.task.offset_jitter);
      read_opt(t, "template_seed", c.task.template_seed);
      if (t.contains("shift")) {
        read_opt(t.at("shift"), "offset", c.task.shift.offset);
        read_opt(t.at("shift"), "scale", c.task.shift.scale);
      }
    }
    if (j.contains("backbone")) {
      const auto& b = j.at("backbone");
      read_opt(b, "conv_channels", c.backbone.conv_channels);
      read_opt(b, "kernel", c.backbone.kernel);
      if (b.contains("alpha")) c.backbone.alpha = read_alpha(b.at("alpha"));
    }
    if (j.contains("training")) {
      const auto& t = j.at("training");
      read_opt(t, "epochs", c.training.epochs);
      read_opt(t, "lr", c.training.lr);
      read_opt(t, "batch_size", c.training.batch_size);
      read_opt(t, "momentum", c.training.momentum);
    }
    if (j.contains("stream")) {
      const auto& s = j.at("stream");
      if (s.contains("kinds")) {
        c.streams.clear();
        for (const auto& k : s.at("kinds")) c.streams.push_back(parse_stream_kind(k.get<std::string>()));
      }
      read_opt(s, "delta", c.delta);
      read_opt(s, "tokens", c.tokens);
    }
    if (j.contains("methods")) {
      c.methods.clear();
      for (const auto& m : j.at("methods")) c.methods.push_back(parse_method(m.get<std::string>()));
    }
    read_opt(j, "seeds", c.seeds);
    if (j.contains("adapt")) {
      for (const auto& [name, value] : j.at("adapt").items()) {
        c.adapt_overrides.push_back(parse_adapt(name, value));
      }
    }
    read_opt(j, "output_dir", c.output_dir);
    read_opt(j, "checkpoint_dir", c.checkpoint_dir);
    read_opt(j, "save_checkpoints", c.save_checkpoints);
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const InputError& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

json experiment_config_to_json(const ExperimentConfig& c) {
  json j;
  j["version"] = kConfigVersion;
  j["task"] = {{"classes", c.task.classes},
               {"length", c.task.length},
               {"channels", c.task.channels},
               {"source_per_class", c.task.source_per_class},
               {"target_per_class", c.task.target_per_class},
               {"noise", c.task.noise},
               {"gain_jitter", c.task.gain_jitter},
               {"offset_jitter", c.task.offset_jitter},
               {"template_seed", c.task.template_seed},
               {"shift", {{"offset", c.task.shift.offset}, {"scale", c.task.shift.scale}}}};
  j["backbone"] = {{"conv_channels", c.backbone.conv_channels},
                   {"kernel", c.backbone.kernel},
                   {"alpha", alpha_json(c.backbone.alpha)}};
  j["training"] = {{"epochs", c.training.epochs},
                   {"lr", c.training.lr},
                   {"batch_size", c.training.batch_size},
                   {"momentum", c.training.momentum}};
  json kinds = json::array();
  for (StreamKind k : c.streams) kinds.push_back(stream_kind_name(k));
  j["stream"] = {{"kinds", kinds}, {"delta", c.delta}, {"tokens", c.tokens}};
  json methods = json::array();
  for (Method m : c.methods) methods.push_back(method_name(m));
  j["methods"] = methods;
  j["seeds"] = c.seeds;
  json adapt = json::object();
  for (const auto& o : c.adapt_overrides) adapt[method_name(o.method)] = adapt_json(o);
  j["adapt"] = adapt;
  j["output_dir"] = c.output_dir;
  j["checkpoint_dir"] = c.checkpoint_dir;
  j["save_checkpoints"] = c.save_checkpoints;
  return j;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file: " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path + " is not valid JSON: " + e.what());
  }
  return parse_experiment_config(j);
}

std::string checkpoint_filename(NormKind norm, std::uint64_t seed) {
  return "source_" + norm_kind_name(norm) + "_seed" + std::to_string(seed) + ".ckpt";
}

// ---------------------------------------------------------------------------
// Experiments

const Backbone& SourceModelCache::get(const ExperimentConfig& config, NormKind norm,
                                      std::uint64_t seed) {
  const BackboneSpec spec = config.backbone_for(norm);
  std::ostringstream key;
  key << experiment_config_to_json(config)["task"].dump() << '|'
      << norm_kind_name(spec.norm) << '/' << json(spec.conv_channels).dump() << '/'
      << spec.kernel << '/' << format_double(spec.alpha, 17) << '|' << config.training.epochs << '|' << format_double(config.training.lr, 17)
      << '|' << config.training.batch_size << '|' << config.checkpoint_dir << '|' << seed;
  for (const auto& e : entries_) {
    if (e.key == key.str()) return e.model;
  }
  Backbone model;
  if (!config.checkpoint_dir.empty() && !config.save_checkpoints) {
    const auto path = std::filesystem::path(config.checkpoint_dir) / checkpoint_filename(norm, seed);
    model = load_checkpoint(path.string());
    if (model.norm_kind() != norm) throw ConfigError("checkpoint " + path.string() + " has the wrong norm kind");
  } else {
    model = build_backbone(spec, seed);
    const Dataset source = gen_synthetic_dataset(config.task, Split::kSource, seed);
    TrainConfig training = config.training;
    training.seed = seed;
    const TrainingMeta meta = train_source(model, source, training);
    if (!config.checkpoint_dir.empty()) {
      std::filesystem::create_directories(config.checkpoint_dir);
      const auto path = std::filesystem::path(config.checkpoint_dir) / checkpoint_filename(norm, seed);
      save_checkpoint(path.string(), model, meta);
    }
  }
  entries_.push_back({key.str(), std::move(model)});
  return entries_.back().model;
}

std::vector<AggregateRow> aggregate_runs(const std::vector<RunResult>& runs) {
  std::vector<AggregateRow> rows;
  std::vector<std::vector<double>> errors;
  for (const auto& r : runs) {
    const std::string m = method_name(r.method);
    const std::string s = stream_kind_name(r.stream);
    auto it = std::find_if(rows.begin(), rows.end(), [&](const AggregateRow& row) {
      return row.method == m && row.stream_kind == s && row.delta == r.delta;
    });
    if (it == rows.end()) {
      rows.push_back({m, s, r.delta, 0.0, 0.0, {}});
      errors.emplace_back();
      it = rows.end() - 1;
    }
    const auto i = static_cast<std::size_t>(it - rows.begin());
    it->seeds.push_back(r.seed);
    errors[i].push_back(r.trace.final_error());
  }
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& e = errors[i];
    const double n = static_cast<double>(e.size());
    const double mean = std::accumulate(e.begin(), e.end(), 0.0) / n;
    double ss = 0.0;
    for (double v : e) ss += (v - mean) * (v - mean);
    rows[i].mean_error = mean;
    rows[i].std_error = std::sqrt(ss / n);
  }
  return rows;
}

namespace {

std::string delta_field(const AggregateRow& row) {
  return row.stream_kind == "dirichlet" ? format_double(row.delta) : std::string();
}

std::string seeds_field(const std::vector<std::uint64_t>& seeds) {
  std::string out;
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    if (i > 0) out += ';';
    out += std::to_string(seeds[i]);
  }
  return out;
}

std::ofstream open_output(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

}  // namespace

void write_aggregate_csv(std::ostream& out, const std::vector<AggregateRow>& rows) {
  out << "method,stream_kind,delta,mean_error,std_error,seeds\n";
  for (const auto& r : rows) {
    out << r.method << ',' << r.stream_kind << ',' << delta_field(r) << ','
        << format_double(r.mean_error) << ',' << format_double(r.std_error) << ','
        << seeds_field(r.seeds) << '\n';
  }
}

ExperimentReport run_experiment(const ExperimentConfig& config, SourceModelCache* cache) {
  config.validate();
  SourceModelCache local;
  SourceModelCache& models = cache != nullptr ? *cache : local;
  if (!config.output_dir.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(config.output_dir, ec);
    if (ec) throw IoError("cannot create output directory " + config.output_dir);
  }
  ExperimentReport report;
  for (std::uint64_t seed : config.seeds) {
    const Dataset target = gen_synthetic_dataset(config.task, Split::kTarget, seed);
    for (StreamKind kind : config.streams) {
      const StreamOrder stream = make_stream(kind, target.labels, config.delta, config.tokens,
                                             Rng(seed).split("stream").seed());
      for (Method method : config.methods) {
        const Backbone& source = models.get(config, required_norm(method), seed);
        AdaptConfig adapt = config.adapt_config(method);
        RunResult run{method, kind, config.delta, seed,
                      run_tta(source, target, stream, adapt, Rng(seed).split("adapt").seed())};
        if (!config.output_dir.empty()) {
          const auto path = std::filesystem::path(config.output_dir) /
                            ("trace_" + method_name(method) + "_" + stream_kind_name(kind) + "_seed" +
                             std::to_string(seed) + ".csv");
          auto out = open_output(path);
          run.trace.write_csv(out);
        }
        report.runs.push_back(std::move(run));
      }
    }
  }
  report.aggregate = aggregate_runs(report.runs);
  if (!config.output_dir.empty()) {
    auto out = open_output(std::filesystem::path(config.output_dir) / "aggregate.csv");
    write_aggregate_csv(out, report.aggregate);
  }
  return report;
}

SweepParam parse_sweep_param(const std::string& name) {
  if (name == "delta") return SweepParam::kDelta;
  if (name == "batch-size") return SweepParam::kBatchSize;
  throw InputError("unknown sweep parameter '" + name + "' (expected delta or batch-size)");
}

std::vector<SweepRow> run_sweep(const ExperimentConfig& config, SweepParam param,
                                SourceModelCache* cache) {
  SourceModelCache local;
  SourceModelCache& models = cache != nullptr ? *cache : local;
  std::vector<SweepRow> rows;
  auto run_point = [&](ExperimentConfig point, const std::string& name, double value) {
    const std::string base = config.output_dir;
    if (!base.empty()) {
      point.output_dir = (std::filesystem::path(base) / (name + "_" + format_double(value))).string();
    }
    for (auto& row : run_experiment(point, &models).aggregate) rows.push_back({name, value, row});
  };
  if (param == SweepParam::kDelta) {
    for (double delta : kSweepDeltas) {
      ExperimentConfig point = config;
      point.streams = {StreamKind::kDirichlet};
      point.delta = delta;
      run_point(point, "delta", delta);
    }
  } else {
    for (std::size_t bs : kSweepBatchSizes) {
      ExperimentConfig point = config;
      point.adapt_overrides.clear();
      for (Method m : config.methods) {
        AdaptConfig a = config.adapt_config(m);
        a.batch_size = bs;
        a.memory_size = bs;
        point.adapt_overrides.push_back(a);
      }
      run_point(point, "batch_size", static_cast<double>(bs));
    }
  }
  if (!config.output_dir.empty()) {
    auto out = open_output(std::filesystem::path(config.output_dir) /
                           (param == SweepParam::kDelta ? "sweep_delta.csv" : "sweep_batch_size.csv"));
    write_sweep_csv(out, rows);
  }
  return rows;
}

void write_sweep_csv(std::ostream& out, const std::vector<SweepRow>& rows) {
  out << "param,value,method,stream_kind,delta,mean_error,std_error,seeds\n";
  for (const auto& s : rows) {
    const auto& r = s.row;
    out << s.param << ',' << format_double(s.value) << ',' << r.method << ',' << r.stream_kind << ','
        << delta_field(r) << ',' << format_double(r.mean_error) << ',' << format_double(r.std_error)
        << ',' << seeds_field(r.seeds) << '\n';
  }
}

}  // namespace tta
