#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "tta/adapt.hpp"
#include "tta/error.hpp"
#include "tta/harness.hpp"
#include "tta/normalization.hpp"
#include "tta/sampler.hpp"
#include "tta/streams.hpp"

namespace py = pybind11;
using namespace tta;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  if (a.ndim() != 3) throw InputError("expected an array of shape (batch, channels, length)");
  Shape s{static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)),
          static_cast<std::size_t>(a.shape(2))};
  return Tensor(s, std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  Array out({t.shape().batch, t.shape().channels, t.shape().length});
  std::copy(t.values().begin(), t.values().end(), out.mutable_data());
  return out;
}

ExperimentConfig config_from(const std::string& json_text) {
  if (json_text.empty()) return ExperimentConfig{};
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  if (!j.contains("version")) j["version"] = kConfigVersion;
  return parse_experiment_config(j);
}

py::dict stats_dict(const InstanceStats& s) {
  py::dict d;
  py::array_t<double> mean({s.batch, s.channels});
  py::array_t<double> var({s.batch, s.channels});
  std::copy(s.mean.begin(), s.mean.end(), mean.mutable_data());
  std::copy(s.variance.begin(), s.variance.end(), var.mutable_data());
  d["mean"] = mean;
  d["variance"] = var;
  return d;
}

py::dict trace_dict(const ErrorTrace& t) {
  py::dict d;
  d["true_labels"] = t.true_labels;
  d["predicted_labels"] = t.predicted_labels;
  d["cumulative_error"] = t.cumulative_error;
  d["final_error"] = t.final_error();
  return d;
}

py::list aggregate_list(const std::vector<AggregateRow>& rows) {
  py::list out;
  for (const auto& r : rows) {
    py::dict d;
    d["method"] = r.method;
    d["stream_kind"] = r.stream_kind;
    d["delta"] = r.delta;
    d["mean_error"] = r.mean_error;
    d["std_error"] = r.std_error;
    d["seeds"] = r.seeds;
    out.append(d);
  }
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Test-time adaptation with instance-aware normalization and balanced memory";

  auto base = py::register_exception<Error>(m, "TtaError", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", base);
  py::register_exception<NumericError>(m, "NumericError", base);
  py::register_exception<InputError>(m, "InputError", base);
  py::register_exception<StateError>(m, "StateError", base);
  py::register_exception<IoError>(m, "IoError", base);

  m.attr("INFINITE_ALPHA") = kInfiniteAlpha;

  // Normalization primitives.
  m.def("soft_shrink", &soft_shrink, py::arg("x"), py::arg("lam"));
  m.def(
      "batch_stats",
      [](const Array& x) {
        const ChannelStats s = batch_stats(to_tensor(x));
        return py::make_tuple(s.mean, s.variance);
      },
      py::arg("x"), "Per-channel mean and biased variance over (batch, length).");
  m.def(
      "instance_stats", [](const Array& x) { return stats_dict(instance_stats(to_tensor(x))); },
      py::arg("x"));
  m.def(
      "iabn_correct_stats",
      [](const Array& x, std::vector<double> mean, std::vector<double> variance, double alpha) {
        const Tensor t = to_tensor(x);
        ChannelStats ref;
        ref.mean = std::move(mean);
        ref.variance = std::move(variance);
        return stats_dict(iabn_correct_stats(instance_stats(t), ref, alpha, t.shape().length));
      },
      py::arg("x"), py::arg("running_mean"), py::arg("running_var"), py::arg("alpha"));
  m.def(
      "iabn_forward",
      [](const Array& x, std::vector<double> mean, std::vector<double> variance,
         std::vector<double> gamma, std::vector<double> beta, double alpha) {
        const Tensor t = to_tensor(x);
        IabnLayer layer(t.shape().channels, alpha);
        NormState& s = layer.state();
        if (mean.size() != s.channels() || variance.size() != s.channels() ||
            gamma.size() != s.channels() || beta.size() != s.channels()) {
          throw ConfigError("statistics and affine parameters need one entry per channel");
        }
        s.running.mean = std::move(mean);
        s.running.variance = std::move(variance);
        s.gamma.value = std::move(gamma);
        s.beta.value = std::move(beta);
        s.stats_ready = true;
        return to_array(layer.forward(t, NormMode::kEval, nullptr));
      },
      py::arg("x"), py::arg("running_mean"), py::arg("running_var"), py::arg("gamma"),
      py::arg("beta"), py::arg("alpha") = 4.0);
  m.def(
      "ema_update",
      [](std::vector<double> mean, std::vector<double> variance, std::vector<double> batch_mean,
         std::vector<double> batch_var, double momentum, std::size_t memory_size) {
        NormState s(mean.size());
        s.running.mean = std::move(mean);
        s.running.variance = std::move(variance);
        ChannelStats batch;
        batch.mean = std::move(batch_mean);
        batch.variance = std::move(batch_var);
        ema_update_stats(s, batch, momentum, memory_size);
        return py::make_tuple(s.running.mean, s.running.variance);
      },
      py::arg("running_mean"), py::arg("running_var"), py::arg("batch_mean"), py::arg("batch_var"),
      py::arg("momentum"), py::arg("memory_size"));

  // Streams.
  m.def(
      "dirichlet_stream",
      [](const std::vector<int>& labels, double delta, std::size_t tokens, std::uint64_t seed) {
        StreamSpec spec;
        spec.delta = delta;
        spec.tokens = tokens;
        spec.seed = seed;
        return make_dirichlet_stream(labels, spec);
      },
      py::arg("labels"), py::arg("delta") = 0.1, py::arg("tokens") = 0, py::arg("seed") = 0);
  m.def(
      "iid_stream",
      [](const std::vector<int>& labels, std::uint64_t seed) { return make_iid_stream(labels, seed); },
      py::arg("labels"), py::arg("seed") = 0);
  m.def(
      "sorted_stream", [](const std::vector<int>& labels) { return make_sorted_stream(labels); },
      py::arg("labels"));

  // Memory.
  py::class_<MemoryBank>(m, "MemoryBank")
      .def(py::init([](std::size_t capacity, std::uint64_t seed) {
             if (capacity == 0) throw ConfigError("memory capacity must be positive");
             return MemoryBank(capacity, Rng(seed));
           }),
           py::arg("capacity"), py::arg("seed") = 0)
      .def(
          "offer",
          [](MemoryBank& bank, const Array& sample, int label, const std::string& policy) {
            const SamplingPolicy p =
                policy == "pbrs" ? SamplingPolicy::kPredictionBalanced
                : policy == "reservoir"
                    ? SamplingPolicy::kReservoir
                    : throw InputError("policy must be 'pbrs' or 'reservoir'");
            return bank.offer(p, to_tensor(sample), label);
          },
          py::arg("sample"), py::arg("label"), py::arg("policy") = "pbrs")
      .def_property_readonly("size", &MemoryBank::size)
      .def_property_readonly("capacity", &MemoryBank::capacity)
      .def("labels", &MemoryBank::labels)
      .def("class_counts", &MemoryBank::class_counts)
      .def("seen", &MemoryBank::seen)
      .def("batch", [](const MemoryBank& bank) { return to_array(bank.batch()); });

  // Models.
  py::class_<Backbone>(m, "Backbone")
      .def_property_readonly("norm", [](const Backbone& b) { return norm_kind_name(b.norm_kind()); })
      .def_property_readonly("parameter_count", &Backbone::parameter_count)
      .def_property_readonly("affine_parameter_count", &Backbone::affine_parameter_count)
      .def(
          "predict",
          [](Backbone& b, const Array& x) {
            py::list out;
            for (const Prediction& p : predict_batch(b, to_tensor(x))) {
              out.append(py::make_tuple(p.label, p.probabilities));
            }
            return out;
          },
          py::arg("x"), "Eval-mode (label, probabilities) for every sample of x.")
      .def("convert_to_iabn", &Backbone::convert_bn_to_iabn, py::arg("alpha"))
      .def(
          "save", [](const Backbone& b, const std::string& path) { save_checkpoint(path, b, {}); },
          py::arg("path"));
  m.def(
      "load_checkpoint", [](const std::string& path) { return load_checkpoint(path); },
      py::arg("path"));

  // Harness.
  m.def(
      "gen_synthetic_dataset",
      [](const std::string& split, std::uint64_t seed, const std::string& config) {
        const ExperimentConfig c = config_from(config);
        const Split s = split == "source" ? Split::kSource
                        : split == "target" ? Split::kTarget
                                            : throw InputError("split must be 'source' or 'target'");
        const Dataset d = gen_synthetic_dataset(c.task, s, seed);
        return py::make_tuple(to_array(d.inputs), d.labels);
      },
      py::arg("split"), py::arg("seed") = 0, py::arg("config") = "");
  m.def(
      "train_source",
      [](const std::string& norm, std::uint64_t seed, const std::string& config) {
        const ExperimentConfig c = config_from(config);
        Backbone model = build_backbone(c.backbone_for(parse_norm_kind(norm)), seed);
        TrainConfig training = c.training;
        training.seed = seed;
        const Dataset data = gen_synthetic_dataset(c.task, Split::kSource, seed);
        const TrainingMeta meta = train_source(model, data, training);
        return py::make_tuple(std::move(model), meta.final_train_accuracy);
      },
      py::arg("norm") = "bn", py::arg("seed") = 0, py::arg("config") = "",
      "Train a source model on the synthetic source split; returns (model, train accuracy).");
  m.def(
      "run_tta",
      [](const Backbone& model, const Array& inputs, const std::vector<int>& labels,
         const std::vector<std::size_t>& stream, const std::string& method, std::uint64_t seed) {
        Dataset target{to_tensor(inputs), labels};
        return trace_dict(run_tta(model, target, stream, default_config(parse_method(method)), seed));
      },
      py::arg("model"), py::arg("inputs"), py::arg("labels"), py::arg("stream"),
      py::arg("method") = "note", py::arg("seed") = 0);
  m.def(
      "run_experiment",
      [](const std::string& config) { return aggregate_list(run_experiment(config_from(config)).aggregate); },
      py::arg("config") = "", "Run an experiment grid; returns the aggregate rows.");
  m.def("methods", [] {
    std::vector<std::string> names;
    for (Method mth : all_methods()) names.push_back(method_name(mth));
    return names;
  });
}
