#include "tta/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "tta/error.hpp"

namespace tta {

std::string norm_kind_name(NormKind kind) {
  return kind == NormKind::kBatchNorm ? "bn" : "iabn";
}

NormKind parse_norm_kind(const std::string& name) {
  if (name == "bn") return NormKind::kBatchNorm;
  if (name == "iabn") return NormKind::kInstanceAware;
  throw InputError("unknown normalization kind '" + name + "'");
}

void BackboneSpec::validate() const {
  if (input_channels == 0 || input_length == 0) throw ConfigError("backbone: empty input");
  if (conv_channels.empty()) throw ConfigError("backbone: at least one conv block required");
  if (classes < 2) throw ConfigError("backbone: at least two classes required");
  if (kernel == 0) throw ConfigError("backbone: kernel must be positive");
  std::size_t length = input_length;
  for (std::size_t ch : conv_channels) {
    if (ch == 0) throw ConfigError("backbone: conv channel count must be positive");
    if (length < kernel) throw ConfigError("backbone: sequence too short for the conv stack");
    length = length - kernel + 1;
    if (norm == NormKind::kInstanceAware && length < 2) {
      throw ConfigError("backbone: IABN needs at least 2 positions per channel");
    }
  }
  if (!(alpha >= 0.0)) throw ConfigError("backbone: alpha must be non-negative");
}

namespace {

NormState& state_of(NormLayer& layer) {
  return std::visit([](auto& l) -> NormState& { return l.state(); }, layer);
}

const NormState& state_of(const NormLayer& layer) {
  return std::visit([](const auto& l) -> const NormState& { return l.state(); }, layer);
}

Tensor norm_forward(NormLayer& layer, const Tensor& x, NormMode mode, GradientTape* tape) {
  return std::visit([&](auto& l) { return l.forward(x, mode, tape); }, layer);
}

}  // namespace

Backbone build_backbone(const BackboneSpec& spec, std::uint64_t seed) {
  spec.validate();
  Backbone model;
  model.spec_ = spec;
  Rng rng = Rng(seed).split("backbone-init");
  std::size_t in = spec.input_channels;
  for (std::size_t k = 0; k < spec.conv_channels.size(); ++k) {
    const std::size_t out = spec.conv_channels[k];
    ConvBlock block{Conv1dLayer(in, out, spec.kernel), BatchNorm1d(out)};
    if (spec.norm == NormKind::kInstanceAware) block.norm = IabnLayer(out, spec.alpha);
    block.conv.init(rng);
    const std::string prefix = "block" + std::to_string(k) + ".";
    block.conv.weight().name = prefix + "conv.weight";
    block.conv.bias().name = prefix + "conv.bias";
    state_of(block.norm).gamma.name = prefix + "norm.gamma";
    state_of(block.norm).beta.name = prefix + "norm.beta";
    model.blocks_.push_back(std::move(block));
    in = out;
  }
  model.classifier_ = DenseLayer(in, spec.classes);
  model.classifier_.init(rng);
  model.classifier_.weight().name = "classifier.weight";
  model.classifier_.bias().name = "classifier.bias";
  return model;
}

Tensor Backbone::forward(const Tensor& x, NormMode mode, GradientTape* tape) {
  if (x.channels() != spec_.input_channels || x.length() != spec_.input_length) {
    throw ConfigError("backbone: input shape mismatch");
  }
  Tensor h = x;
  for (auto& block : blocks_) {
    h = block.conv.forward(h, tape);
    h = norm_forward(block.norm, h, mode, tape);
    h = relu(h, tape);
  }
  h = global_average_pool(h, tape);
  return classifier_.forward(h, tape);
}

std::vector<Tensor> Backbone::norm_inputs(const Tensor& x) {
  std::vector<Tensor> taps;
  Tensor h = x;
  for (auto& block : blocks_) {
    h = block.conv.forward(h, nullptr);
    taps.push_back(h);
    h = norm_forward(block.norm, h, NormMode::kEval, nullptr);
    h = relu(h, nullptr);
  }
  return taps;
}

std::vector<Parameter*> Backbone::parameters() {
  std::vector<Parameter*> out;
  for (auto& block : blocks_) {
    out.push_back(&block.conv.weight());
    out.push_back(&block.conv.bias());
    out.push_back(&state_of(block.norm).gamma);
    out.push_back(&state_of(block.norm).beta);
  }
  out.push_back(&classifier_.weight());
  out.push_back(&classifier_.bias());
  return out;
}

std::vector<const Parameter*> Backbone::parameters() const {
  auto mut = const_cast<Backbone*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

std::vector<Parameter*> Backbone::affine_parameters() {
  std::vector<Parameter*> out;
  for (auto& block : blocks_) {
    out.push_back(&state_of(block.norm).gamma);
    out.push_back(&state_of(block.norm).beta);
  }
  return out;
}

std::vector<NormState*> Backbone::norm_states() {
  std::vector<NormState*> out;
  for (auto& block : blocks_) out.push_back(&state_of(block.norm));
  return out;
}

std::vector<const NormState*> Backbone::norm_states() const {
  std::vector<const NormState*> out;
  for (const auto& block : blocks_) out.push_back(&state_of(block.norm));
  return out;
}

std::size_t Backbone::parameter_count() const {
  std::size_t n = 0;
  for (const Parameter* p : parameters()) n += p->size();
  return n;
}

std::size_t Backbone::affine_parameter_count() const { return 2 * norm_channels(); }

std::size_t Backbone::norm_channels() const {
  std::size_t n = 0;
  for (const auto* s : norm_states()) n += s->channels();
  return n;
}

void Backbone::set_all_trainable(bool trainable) {
  for (Parameter* p : parameters()) p->trainable = trainable;
}

void Backbone::freeze_all_but_affine() {
  set_all_trainable(false);
  for (Parameter* p : affine_parameters()) p->trainable = true;
}

void Backbone::zero_grad() {
  for (Parameter* p : parameters()) p->zero_grad();
}

bool Backbone::stats_ready() const {
  const auto states = norm_states();
  return std::all_of(states.begin(), states.end(), [](const NormState* s) { return s->stats_ready; });
}

void Backbone::convert_bn_to_iabn(double alpha) {
  for (auto& block : blocks_) {
    if (auto* bn = std::get_if<BatchNorm1d>(&block.norm)) {
      block.norm = IabnLayer::from_batch_norm(*bn, alpha);
    }
  }
  spec_.norm = NormKind::kInstanceAware;
  spec_.alpha = alpha;
}

// ---------------------------------------------------------------------------
// Training and inference

TrainingMeta train_source(Backbone& model, const Dataset& data, const TrainConfig& config) {
  data.validate();
  if (data.size() == 0) throw InputError("train_source: empty dataset");
  if (config.batch_size < 2) throw ConfigError("train_source: batch size must be at least 2");
  TrainingMeta meta{config.seed, config.epochs, config.lr, config.batch_size, 0.0};
  if (config.epochs == 0) return meta;

  model.set_all_trainable(true);
  Rng rng = Rng(config.seed).split("train-shuffle");
  SgdMomentum optimizer(config.momentum);
  const auto params = model.parameters();
  const std::size_t n = data.size();
  const std::size_t steps_per_epoch = std::max<std::size_t>(1, n / config.batch_size);
  const double total_steps = static_cast<double>(steps_per_epoch * config.epochs);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t step = 0;
  std::size_t correct = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng.engine());
    correct = 0;
    std::size_t seen = 0;
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      const std::size_t begin = s * config.batch_size;
      // The last step absorbs the remainder.
      const std::size_t end = s + 1 == steps_per_epoch ? n : begin + config.batch_size;
      std::span<const std::size_t> idx(order.data() + begin, end - begin);
      Tensor x = data.inputs.gather(idx);
      std::vector<int> y;
      y.reserve(idx.size());
      for (std::size_t i : idx) y.push_back(data.labels[i]);

      const double lr =
          0.5 * config.lr * (1.0 + std::cos(M_PI * static_cast<double>(step) / total_steps));
      model.zero_grad();
      GradientTape tape;
      Tensor logits = model.forward(x, NormMode::kTrain, &tape);
      const double loss = softmax_cross_entropy(logits, y, &tape);
      if (!std::isfinite(loss)) throw NumericError("source training diverged");
      tape.backward();
      optimizer.step(params, lr);
      for (std::size_t b = 0; b < y.size(); ++b) {
        auto row = logits.sample_span(b);
        const auto best = std::max_element(row.begin(), row.end()) - row.begin();
        if (best == y[b]) ++correct;
      }
      seen += y.size();
      ++step;
    }
    meta.final_train_accuracy = static_cast<double>(correct) / static_cast<double>(seen);
  }
  for (const Parameter* p : params) {
    for (double v : p->value) {
      if (!std::isfinite(v)) throw NumericError("source training produced non-finite weights");
    }
  }
  return meta;
}

std::vector<Prediction> predict_batch(Backbone& model, const Tensor& x, NormMode mode) {
  if (mode == NormMode::kTrain) throw ConfigError("predict: train mode is not an inference mode");
  if (mode == NormMode::kEval && !model.stats_ready()) {
    throw StateError("predict: normalization statistics are not initialized");
  }
  if (mode == NormMode::kTestBatch && x.batch() < 2) {
    throw StateError("predict: test-batch statistics are degenerate for a single sample");
  }
  const Tensor logits = model.forward(x, mode, nullptr);
  std::vector<Prediction> out;
  for (auto& p : softmax(logits)) {
    const int label = static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
    out.push_back({label, std::move(p)});
  }
  return out;
}

Prediction predict(Backbone& model, const Tensor& x) {
  if (x.batch() != 1) throw InputError("predict: expected a single sample");
  return predict_batch(model, x, NormMode::kEval).front();
}

double accuracy(Backbone& model, const Dataset& data, NormMode mode) {
  const auto preds = predict_batch(model, data.inputs, mode);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) correct += preds[i].label == data.labels[i];
  return static_cast<double>(correct) / static_cast<double>(preds.size());
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'T', 'T', 'A', 'C', 'K', 'P', 'T', '\0'};
constexpr std::uint32_t kVersion = 1;

class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void raw(std::string_view s) { bytes_.append(s); }
  const std::string& bytes() const { return bytes_; }

 private:
  std::string bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(bytes_[pos_++]);
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(u8()) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string_view raw(std::size_t n) {
    need(n);
    auto out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw InputError("checkpoint: truncated data");
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

void write_section(ByteWriter& out, const char (&tag)[5], const std::string& payload) {
  out.raw(std::string_view(tag, 4));
  out.u64(payload.size());
  out.raw(payload);
}

nlohmann::json arch_json(const BackboneSpec& spec) {
  nlohmann::json j;
  j["input_channels"] = spec.input_channels;
  j["input_length"] = spec.input_length;
  j["conv_channels"] = spec.conv_channels;
  j["kernel"] = spec.kernel;
  j["classes"] = spec.classes;
  j["norm"] = norm_kind_name(spec.norm);
  if (std::isinf(spec.alpha)) {
    j["alpha"] = "inf";
  } else {
    j["alpha"] = spec.alpha;
  }
  return j;
}

BackboneSpec spec_from_json(const nlohmann::json& j) {
  BackboneSpec spec;
  spec.input_channels = j.at("input_channels").get<std::size_t>();
  spec.input_length = j.at("input_length").get<std::size_t>();
  spec.conv_channels = j.at("conv_channels").get<std::vector<std::size_t>>();
  spec.kernel = j.at("kernel").get<std::size_t>();
  spec.classes = j.at("classes").get<std::size_t>();
  spec.norm = parse_norm_kind(j.at("norm").get<std::string>());
  const auto& a = j.at("alpha");
  spec.alpha = a.is_string() && a.get<std::string>() == "inf" ? kInfiniteAlpha : a.get<double>();
  return spec;
}

}  // namespace

void write_checkpoint(std::ostream& out, const Backbone& model, const TrainingMeta& meta) {
  ByteWriter w;
  w.raw(std::string_view(kMagic, 8));
  w.u32(kVersion);
  w.u32(4);

  write_section(w, "ARCH", arch_json(model.spec()).dump());

  nlohmann::json mj;
  mj["seed"] = meta.seed;
  mj["epochs"] = meta.epochs;
  mj["lr"] = meta.lr;
  mj["batch_size"] = meta.batch_size;
  mj["final_train_accuracy"] = meta.final_train_accuracy;
  write_section(w, "META", mj.dump());

  ByteWriter pw;
  const auto params = model.parameters();
  pw.u64(params.size());
  for (const Parameter* p : params) {
    pw.u32(static_cast<std::uint32_t>(p->name.size()));
    pw.raw(p->name);
    pw.u64(p->size());
    for (double v : p->value) pw.f64(v);
  }
  write_section(w, "PARM", pw.bytes());

  ByteWriter sw;
  const auto states = model.norm_states();
  sw.u64(states.size());
  for (const NormState* s : states) {
    sw.u64(s->channels());
    for (double v : s->running.mean) sw.f64(v);
    for (double v : s->running.variance) sw.f64(v);
    sw.u8(s->stats_ready ? 1 : 0);
  }
  write_section(w, "STAT", sw.bytes());

  out.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
  if (!out) throw IoError("checkpoint: write failed");
}

Backbone read_checkpoint(std::istream& in, TrainingMeta* meta) {
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  ByteReader r(bytes);
  if (r.raw(8) != std::string_view(kMagic, 8)) throw InputError("checkpoint: bad magic");
  const std::uint32_t version = r.u32();
  if (version != kVersion) throw InputError("checkpoint: unsupported version " + std::to_string(version));
  const std::uint32_t count = r.u32();

  std::string arch, meta_json, params, stats;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string tag(r.raw(4));
    const std::uint64_t len = r.u64();
    std::string payload(r.raw(len));
    if (tag == "ARCH") arch = std::move(payload);
    else if (tag == "META") meta_json = std::move(payload);
    else if (tag == "PARM") params = std::move(payload);
    else if (tag == "STAT") stats = std::move(payload);
    // Unknown sections are skipped.
  }
  if (arch.empty() || params.empty() || stats.empty()) throw InputError("checkpoint: missing section");

  Backbone model;
  try {
    model = build_backbone(spec_from_json(nlohmann::json::parse(arch)), 0);
    if (meta != nullptr && !meta_json.empty()) {
      const auto mj = nlohmann::json::parse(meta_json);
      meta->seed = mj.at("seed").get<std::uint64_t>();
      meta->epochs = mj.at("epochs").get<std::size_t>();
      meta->lr = mj.at("lr").get<double>();
      meta->batch_size = mj.at("batch_size").get<std::size_t>();
      meta->final_train_accuracy = mj.at("final_train_accuracy").get<double>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("checkpoint: bad JSON section: ") + e.what());
  }

  ByteReader pr(params);
  auto targets = model.parameters();
  if (pr.u64() != targets.size()) throw InputError("checkpoint: parameter count mismatch");
  for (Parameter* p : targets) {
    const std::string name(pr.raw(pr.u32()));
    if (name != p->name) throw InputError("checkpoint: expected parameter " + p->name + ", found " + name);
    if (pr.u64() != p->size()) throw InputError("checkpoint: size mismatch for " + name);
    for (double& v : p->value) v = pr.f64();
  }
  if (!pr.done()) throw InputError("checkpoint: trailing parameter data");

  ByteReader sr(stats);
  auto states = model.norm_states();
  if (sr.u64() != states.size()) throw InputError("checkpoint: norm layer count mismatch");
  for (NormState* s : states) {
    if (sr.u64() != s->channels()) throw InputError("checkpoint: norm channel mismatch");
    for (double& v : s->running.mean) v = sr.f64();
    for (double& v : s->running.variance) v = sr.f64();
    s->stats_ready = sr.u8() != 0;
  }
  if (!sr.done()) throw InputError("checkpoint: trailing statistics data");
  return model;
}

void save_checkpoint(const std::string& path, const Backbone& model, const TrainingMeta& meta) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path);
  write_checkpoint(out, model, meta);
}

Backbone load_checkpoint(const std::string& path, TrainingMeta* meta) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  return read_checkpoint(in, meta);
}

}  // namespace tta
