#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "tta/error.hpp"
#include "tta/harness.hpp"

namespace tta {

namespace {

ExperimentConfig config_or_default(const std::string& path) {
  if (path.empty()) return ExperimentConfig{};
  return load_experiment_config(path);
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  return out;
}

std::vector<int> read_labels_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read labels file " + path);
  std::vector<int> labels;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      labels.push_back(std::stoi(line));
    } catch (const std::exception&) {
      throw InputError("malformed label line '" + line + "'");
    }
  }
  return labels;
}

Dataset read_dataset_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read dataset " + path);
  return read_dataset_csv(in);
}

}  // namespace

int cli_main(int argc, const char* const* argv) {
  CLI::App app{"Streaming test-time adaptation experiments (IABN + PBRS)"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_path;
  std::uint64_t seed = 0;

  auto* gen = app.add_subcommand("gen-data", "Write a synthetic dataset split as CSV");
  std::string split_name = "source";
  gen->add_option("--config", config_path, "Experiment config (JSON); task section is used");
  gen->add_option("--split", split_name, "source or target")->check(CLI::IsMember({"source", "target"}));
  gen->add_option("--seed", seed, "Data seed");
  gen->add_option("--out", out_path, "Output CSV")->required();

  auto* train = app.add_subcommand("train", "Train a source model and write a checkpoint");
  std::string norm_name = "bn";
  std::string data_path;
  train->add_option("--config", config_path, "Experiment config (JSON)");
  train->add_option("--norm", norm_name, "bn or iabn")->check(CLI::IsMember({"bn", "iabn"}));
  train->add_option("--data", data_path, "Training CSV (default: synthetic source split)");
  train->add_option("--seed", seed, "Initialization / shuffling seed");
  train->add_option("--out", out_path, "Checkpoint path")->required();

  auto* eval = app.add_subcommand("adapt-eval", "Run an experiment grid from a JSON config");
  eval->add_option("--config", config_path, "Experiment config (JSON)")->required();
  eval->add_option("--out", out_path, "Output directory (overrides output_dir)");
  std::vector<std::uint64_t> seeds;
  eval->add_option("--seed", seeds, "Seed(s) (overrides seeds)");

  auto* sweep = app.add_subcommand("sweep", "Sweep Dirichlet delta or batch size");
  std::string param_name;
  sweep->add_option("--param", param_name, "delta or batch-size")
      ->required()
      ->check(CLI::IsMember({"delta", "batch-size"}));
  sweep->add_option("--config", config_path, "Experiment config (JSON)");
  sweep->add_option("--out", out_path, "Output directory");
  sweep->add_option("--seed", seeds, "Seed(s) (overrides seeds)");

  auto* stream = app.add_subcommand("stream-gen", "Write a stream order (one index per line)");
  std::string kind_name = "dirichlet";
  std::string labels_path;
  double delta = 0.1;
  std::size_t tokens = 0;
  stream->add_option("--kind", kind_name, "dirichlet, iid or sorted")
      ->check(CLI::IsMember({"dirichlet", "iid", "sorted"}));
  stream->add_option("--labels", labels_path, "Labels file, one class id per line");
  stream->add_option("--data", data_path, "Dataset CSV to take labels from");
  stream->add_option("--delta", delta, "Dirichlet concentration");
  stream->add_option("--tokens", tokens, "Dirichlet tokens (0 = one per class)");
  stream->add_option("--seed", seed, "Stream seed");
  stream->add_option("--out", out_path, "Output file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) {
      const ExperimentConfig config = config_or_default(config_path);
      const Dataset data = gen_synthetic_dataset(
          config.task, split_name == "source" ? Split::kSource : Split::kTarget, seed);
      auto out = open_out(out_path);
      write_dataset_csv(out, data);
    } else if (train->parsed()) {
      const ExperimentConfig config = config_or_default(config_path);
      const Dataset data = data_path.empty()
                               ? gen_synthetic_dataset(config.task, Split::kSource, seed)
                               : read_dataset_file(data_path);
      Backbone model = build_backbone(config.backbone_for(parse_norm_kind(norm_name)), seed);
      TrainConfig training = config.training;
      training.seed = seed;
      const TrainingMeta meta = train_source(model, data, training);
      save_checkpoint(out_path, model, meta);
      std::cout << "train accuracy " << meta.final_train_accuracy << '\n';
    } else if (eval->parsed() || sweep->parsed()) {
      ExperimentConfig config = config_or_default(config_path);
      if (!out_path.empty()) config.output_dir = out_path;
      if (!seeds.empty()) config.seeds = seeds;
      if (eval->parsed()) {
        const auto report = run_experiment(config);
        write_aggregate_csv(std::cout, report.aggregate);
      } else {
        const auto rows = run_sweep(config, parse_sweep_param(param_name));
        write_sweep_csv(std::cout, rows);
      }
    } else if (stream->parsed()) {
      std::vector<int> labels;
      if (!labels_path.empty()) {
        labels = read_labels_file(labels_path);
      } else if (!data_path.empty()) {
        labels = read_dataset_file(data_path).labels;
      } else {
        throw ConfigError("stream-gen needs --labels or --data");
      }
      const StreamOrder order = make_stream(parse_stream_kind(kind_name), labels, delta, tokens, seed);
      auto out = open_out(out_path);
      write_stream_order(out, order);
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace tta
