#include "tuap/alpha_models.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <random>

#include "json.hpp"
#include "tuap/error.hpp"
#include "tuap/io.hpp"

namespace tuap {

using nn::Activation;
using nn::LayerSpec;
using nn::Matrix;

namespace {

constexpr char kNormalizerMagic[] = "TUAPNRM1";

std::array<int, kFeatureCount> make_sequence_columns() {
  std::array<int, kFeatureCount> cols{};
  for (int t = 0; t < 5; ++t) {
    cols[static_cast<std::size_t>(t * 3 + 0)] = kReturnsOffset + t;
    cols[static_cast<std::size_t>(t * 3 + 1)] = kStdsOffset + t;
    cols[static_cast<std::size_t>(t * 3 + 2)] = kTrendsOffset + t;
  }
  cols[15] = kMinuteIndex;
  cols[16] = kHourIndex;
  return cols;
}

Matrix gather_rows(const Matrix& x, std::span<const std::size_t> idx) {
  Matrix out(static_cast<nn::Index>(idx.size()), x.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<nn::Index>(i)) = x.row(static_cast<nn::Index>(idx[i]));
  return out;
}

std::vector<int> argmax_rows(const Matrix& logits) {
  std::vector<int> out(static_cast<std::size_t>(logits.rows()));
  for (nn::Index r = 0; r < logits.rows(); ++r) out[static_cast<std::size_t>(r)] = logits(r, 1) > logits(r, 0) ? 1 : 0;
  return out;
}

Matrix model_input(const TrainedModel& model, std::span<const FeatureVector> features) {
  std::vector<FeatureVector> z;
  z.reserve(features.size());
  for (const auto& f : features) z.push_back(model.normalizer.apply(f));
  return adapt(model.arch.kind, z);
}

nlohmann::json spec_json(const LayerSpec& s) {
  return {{"kind", nn::to_string(s.kind)},
          {"units", s.units},
          {"activation", nn::to_string(s.activation)},
          {"kernel", s.kernel},
          {"return_sequences", s.return_sequences}};
}

}  // namespace

std::string to_string(ArchKind kind) {
  switch (kind) {
    case ArchKind::dnn:
      return "dnn";
    case ArchKind::cnn:
      return "cnn";
    case ArchKind::rnn:
      return "rnn";
  }
  return "?";
}

ArchKind parse_arch(const std::string& name) {
  if (name == "dnn" || name == "DNN") return ArchKind::dnn;
  if (name == "cnn" || name == "CNN") return ArchKind::cnn;
  if (name == "rnn" || name == "RNN") return ArchKind::rnn;
  throw ValidationError("unknown architecture '" + name + "' (expected dnn, cnn or rnn)");
}

AlphaArch AlphaArch::make(ArchKind kind) {
  AlphaArch a;
  a.kind = kind;
  switch (kind) {
    case ArchKind::dnn:
      a.input = {0, 0, kFeatureCount};
      for (nn::Index w : {128, 64, 32, 16, 8}) a.layers.push_back(LayerSpec::dense(w, Activation::relu));
      break;
    case ArchKind::cnn:
      a.input = {5, 3, 2};
      a.layers = {LayerSpec::conv1d(16, 3, Activation::relu), LayerSpec::dense(32, Activation::relu),
                  LayerSpec::dense(16, Activation::relu)};
      break;
    case ArchKind::rnn:
      a.input = {5, 3, 2};
      a.layers = {LayerSpec::lstm(32, true), LayerSpec::lstm(16, false), LayerSpec::dense(8, Activation::relu)};
      break;
  }
  a.layers.push_back(LayerSpec::softmax(2));
  return a;
}

const std::array<int, kFeatureCount>& adapter_columns(ArchKind kind) {
  static const std::array<int, kFeatureCount> flat = [] {
    std::array<int, kFeatureCount> c{};
    std::iota(c.begin(), c.end(), 0);
    return c;
  }();
  static const std::array<int, kFeatureCount> sequence = make_sequence_columns();
  return kind == ArchKind::dnn ? flat : sequence;
}

Matrix adapt(ArchKind kind, std::span<const FeatureVector> normalized) {
  const auto& cols = adapter_columns(kind);
  Matrix out(static_cast<nn::Index>(normalized.size()), kFeatureCount);
  for (std::size_t r = 0; r < normalized.size(); ++r)
    for (int j = 0; j < kFeatureCount; ++j)
      out(static_cast<nn::Index>(r), j) = normalized[r](cols[static_cast<std::size_t>(j)]);
  return out;
}

FeatureVector unadapt(ArchKind kind, const Matrix& row) {
  if (row.rows() != 1 || row.cols() != kFeatureCount) throw ValidationError("unadapt expects one 17-column row");
  const auto& cols = adapter_columns(kind);
  FeatureVector f;
  for (int j = 0; j < kFeatureCount; ++j) f(cols[static_cast<std::size_t>(j)]) = row(0, j);
  return f;
}

TrainedModel build(const AlphaArch& arch, std::uint64_t seed) {
  TrainedModel m;
  m.arch = arch;
  m.graph = nn::ModelGraph(arch.input, arch.layers, seed);
  m.meta.seed = seed;
  return m;
}

std::vector<int> labels_of(std::span<const WindowSample> samples) {
  std::vector<int> y;
  y.reserve(samples.size());
  for (const auto& s : samples) y.push_back(s.label);
  return y;
}

TrainResult train(TrainedModel model, std::span<const WindowSample> samples, const TrainConfig& config,
                  const std::optional<Normalizer>& normalizer) {
  if (samples.empty()) throw ValidationError("training set is empty");
  const auto features = extract_all(samples);
  model.normalizer = normalizer ? *normalizer : Normalizer::fit(features);
  const auto labels = labels_of(samples);
  return train_features(std::move(model), features, labels, config);
}

TrainResult train_features(TrainedModel model, std::span<const FeatureVector> features, std::span<const int> labels,
                           const TrainConfig& config) {
  if (features.empty()) throw ValidationError("training set is empty");
  if (features.size() != labels.size()) throw ValidationError("feature and label counts differ");
  const auto ones = std::count(labels.begin(), labels.end(), 1);
  if (ones == 0 || ones == static_cast<std::ptrdiff_t>(labels.size()))
    throw ValidationError("training set holds a single class");
  if (config.epochs < 1 || config.batch_size < 1 || config.learning_rate < 0)
    throw ValidationError("invalid training configuration");
  if (!model.normalizer.fitted()) model.normalizer = Normalizer::fit(features);

  const Matrix x = model_input(model, features);
  const std::size_t n = features.size();
  std::size_t n_val = static_cast<std::size_t>(config.validation_fraction * static_cast<double>(n));
  if (n_val < 2 || n - n_val < 2) n_val = 0;
  const std::size_t n_fit = n - n_val;
  const Matrix x_val = x.bottomRows(static_cast<nn::Index>(n_val));
  const std::vector<int> y_val(labels.begin() + static_cast<std::ptrdiff_t>(n_fit), labels.end());

  std::mt19937_64 rng(io::derive_seed(config.seed, 0x7472));
  auto opt = nn::OptimizerState::adam(model.graph, config.learning_rate, config.seed);
  std::vector<std::size_t> order(n_fit);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto batch = static_cast<std::size_t>(config.batch_size);

  double best = std::numeric_limits<double>::infinity();
  nn::ModelGraph best_graph = model.graph;
  int stale = 0, epoch = 0;
  for (; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t m = std::min(batch, order.size() - start);
      const std::span<const std::size_t> idx(order.data() + start, m);
      std::vector<int> y(m);
      for (std::size_t i = 0; i < m; ++i) y[i] = labels[idx[i]];
      total += nn::train_step(model.graph, opt, gather_rows(x, idx), y) * static_cast<double>(m);
    }
    const double monitored = n_val > 0 ? nn::cross_entropy(nn::forward(model.graph, x_val).logits, y_val).loss
                                       : total / static_cast<double>(n_fit);
    if (monitored < best * (1.0 - config.min_improvement)) {
      best = monitored;
      best_graph = model.graph;
      stale = 0;
    } else if (++stale >= config.patience) {
      ++epoch;
      break;
    }
  }
  model.graph = std::move(best_graph);

  TrainResult result;
  result.report = evaluate_predictions(argmax_rows(nn::forward(model.graph, x).logits), labels, "train");
  model.meta.seed = config.seed;
  model.meta.epochs_run = epoch;
  model.meta.final_loss = best;
  model.meta.train_da = result.report.da;
  model.meta.train_size = features.size();
  result.model = std::move(model);
  return result;
}

Prediction predict(const TrainedModel& model, const WindowSample& window) {
  const FeatureVector f = extract_features(window);
  const Matrix p = nn::softmax(nn::forward(model.graph, model_input(model, std::span(&f, 1))).logits);
  Prediction out;
  out.probabilities = {p(0, 0), p(0, 1)};
  out.label = p(0, 1) > p(0, 0) ? 1 : 0;
  return out;
}

std::vector<int> predict_features(const TrainedModel& model, std::span<const FeatureVector> features) {
  if (features.empty()) return {};
  return argmax_rows(nn::forward(model.graph, model_input(model, features)).logits);
}

std::vector<int> predict_labels(const TrainedModel& model, std::span<const WindowSample> windows) {
  return predict_features(model, extract_all(windows));
}

PriceGradients price_gradients(const TrainedModel& model, std::span<const WindowSample> windows,
                               std::span<const Closes> closes, int target_class) {
  if (windows.size() != closes.size()) throw ValidationError("price_gradients: window/close count mismatch");
  if (target_class < 0 || target_class > 1) throw ValidationError("target class must be 0 or 1");
  PriceGradients out;
  if (windows.empty()) return out;
  std::vector<FeatureVector> features;
  features.reserve(windows.size());
  for (std::size_t i = 0; i < windows.size(); ++i)
    features.push_back(features_from_closes(closes[i], windows[i].anchor_timestamp));
  const nn::ForwardPass pass = nn::forward(model.graph, model_input(model, features));
  out.predictions = argmax_rows(pass.logits);

  // Per-sample loss gradient: softmax minus the one-hot target.
  Matrix dlogits = nn::softmax(pass.logits);
  dlogits.col(target_class).array() -= 1.0;
  const nn::Gradients g = nn::backward(model.graph, pass.cache, dlogits);
  const FeatureVector scale = model.normalizer.scale();
  out.gradients.reserve(windows.size());
  for (std::size_t i = 0; i < windows.size(); ++i) {
    const FeatureVector dz = unadapt(model.arch.kind, g.input.row(static_cast<nn::Index>(i)));
    const FeatureVector dx = dz.cwiseProduct(scale);
    out.gradients.push_back(feature_input_jacobian(closes[i]).transpose() * dx);
  }
  return out;
}

Closes input_price_gradient(const TrainedModel& model, const WindowSample& window, int target_class) {
  const Closes c = window_closes(window);
  return price_gradients(model, std::span(&window, 1), std::span(&c, 1), target_class).gradients.front();
}

EvalReport evaluate_predictions(std::span<const int> predicted, std::span<const int> actual, std::string set_id) {
  if (predicted.size() != actual.size()) throw ValidationError("prediction and label counts differ");
  if (actual.empty()) throw ValidationError("cannot evaluate an empty set");
  EvalReport r;
  r.set_id = std::move(set_id);
  r.total = actual.size();
  for (std::size_t i = 0; i < actual.size(); ++i) {
    if (actual[i] < 0 || actual[i] > 1 || predicted[i] < 0 || predicted[i] > 1)
      throw ValidationError("labels must be 0 or 1");
    ++r.confusion[static_cast<std::size_t>(actual[i])][static_cast<std::size_t>(predicted[i])];
  }
  const std::size_t correct = r.confusion[0][0] + r.confusion[1][1];
  r.da = 100.0 * static_cast<double>(correct) / static_cast<double>(r.total);
  for (std::size_t c = 0; c < 2; ++c) {
    const std::size_t n = r.confusion[c][0] + r.confusion[c][1];
    r.class_accuracy[c] = n == 0 ? 0.0 : 100.0 * static_cast<double>(r.confusion[c][c]) / static_cast<double>(n);
  }
  return r;
}

EvalReport directional_accuracy(const TrainedModel& model, std::span<const WindowSample> samples,
                                std::string set_id) {
  const auto predicted = predict_labels(model, samples);
  const auto actual = labels_of(samples);
  return evaluate_predictions(predicted, actual, std::move(set_id));
}

std::vector<std::uint8_t> serialize_normalizer(const Normalizer& n) {
  io::ByteWriter w;
  w.bytes(std::string_view(kNormalizerMagic, 8));
  w.u32(kFeatureCount);
  for (int i = 0; i < kFeatureCount; ++i) w.f64(n.mean()(i));
  for (int i = 0; i < kFeatureCount; ++i) w.f64(n.std()(i));
  return w.finish();
}

Normalizer deserialize_normalizer(std::vector<std::uint8_t> bytes) {
  io::ByteReader r(std::move(bytes), "normalizer file");
  if (r.bytes(8) != std::string(kNormalizerMagic, 8)) throw FormatError("normalizer file: bad magic");
  if (r.u32() != kFeatureCount) throw FormatError("normalizer file: feature count mismatch");
  FeatureVector mean, sd;
  for (int i = 0; i < kFeatureCount; ++i) mean(i) = r.f64();
  for (int i = 0; i < kFeatureCount; ++i) sd(i) = r.f64();
  if (!r.at_end()) throw FormatError("normalizer file: trailing bytes");
  return Normalizer(mean, sd);
}

void save_bundle(const TrainedModel& model, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nn::save_weights(model.graph, dir / "weights.bin");
  io::write_file_atomic(dir / "normalizer.bin", serialize_normalizer(model.normalizer));
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& s : model.arch.layers) layers.push_back(spec_json(s));
  const nlohmann::json manifest = {
      {"format", "tuap-model-bundle"},
      {"version", 1},
      {"arch", to_string(model.arch.kind)},
      {"input", {{"seq_len", model.arch.input.seq_len},
                 {"channels", model.arch.input.channels},
                 {"tail", model.arch.input.tail}}},
      {"layers", layers},
      {"files", {{"weights", "weights.bin"}, {"normalizer", "normalizer.bin"}}},
      {"meta",
       {{"seed", model.meta.seed},
        {"epochs_run", model.meta.epochs_run},
        {"final_loss", model.meta.final_loss},
        {"train_da", model.meta.train_da},
        {"train_size", model.meta.train_size}}},
  };
  io::write_text_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

TrainedModel load_bundle(const std::filesystem::path& dir) {
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(io::read_text(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("model bundle " + dir.string() + ": bad manifest: " + e.what());
  }
  if (manifest.value("format", "") != "tuap-model-bundle")
    throw FormatError("model bundle " + dir.string() + ": not a model bundle");
  TrainedModel m;
  m.arch = AlphaArch::make(parse_arch(manifest.at("arch").get<std::string>()));
  m.graph = nn::load_weights(dir / manifest["files"].value("weights", "weights.bin"), m.arch.input, m.arch.layers);
  m.normalizer =
      deserialize_normalizer(io::read_file(dir / manifest["files"].value("normalizer", "normalizer.bin")));
  const auto& meta = manifest.at("meta");
  m.meta.seed = meta.at("seed").get<std::uint64_t>();
  m.meta.epochs_run = meta.at("epochs_run").get<int>();
  m.meta.final_loss = meta.at("final_loss").get<double>();
  m.meta.train_da = meta.at("train_da").get<double>();
  m.meta.train_size = meta.at("train_size").get<std::size_t>();
  return m;
}

}  // namespace tuap
