#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tuap/features.hpp"
#include "tuap/market_data.hpp"
#include "tuap/nn.hpp"

namespace tuap {

enum class ArchKind { dnn, cnn, rnn };

std::string to_string(ArchKind kind);
ArchKind parse_arch(const std::string& name);
inline constexpr std::array<ArchKind, 3> kAllArchs{ArchKind::dnn, ArchKind::cnn, ArchKind::rnn};

/// Layer plan plus the input layout the adapter produces.
struct AlphaArch {
  ArchKind kind = ArchKind::dnn;
  nn::InputShape input;
  std::vector<nn::LayerSpec> layers;

  static AlphaArch make(ArchKind kind);
};

/// Model column j holds feature adapter_columns(kind)[j]. The DNN sees the
/// flat vector; CNN and RNN see five steps of (return, std, trend) followed
/// by minute and hour.
const std::array<int, kFeatureCount>& adapter_columns(ArchKind kind);
nn::Matrix adapt(ArchKind kind, std::span<const FeatureVector> normalized);
FeatureVector unadapt(ArchKind kind, const nn::Matrix& row);

struct TrainConfig {
  int epochs = 50;
  int batch_size = 32;
  double learning_rate = 1e-3;
  int patience = 5;
  double min_improvement = 1e-4;  // relative loss improvement that resets patience
  /// Chronological tail of the training set whose loss drives early
  /// stopping; the weights of the best epoch are kept. 0 monitors the
  /// training loss instead.
  double validation_fraction = 0.1;
  std::uint64_t seed = 1;
};

struct TrainMeta {
  std::uint64_t seed = 0;
  int epochs_run = 0;
  double final_loss = 0.0;  // monitored loss at the kept epoch
  double train_da = 0.0;
  std::size_t train_size = 0;
};

struct TrainedModel {
  AlphaArch arch;
  nn::ModelGraph graph;
  Normalizer normalizer;
  TrainMeta meta;
};

struct EvalReport {
  std::string set_id;
  double da = 0.0;                         // percent
  std::array<double, 2> class_accuracy{};  // percent, per true label
  std::array<std::array<std::size_t, 2>, 2> confusion{};  // [actual][predicted]
  std::size_t total = 0;
};

/// Untrained weights and an unfitted normalizer.
TrainedModel build(const AlphaArch& arch, std::uint64_t seed);

struct TrainResult {
  TrainedModel model;
  EvalReport report;
};

/// Fits the normalizer on `samples` unless one is supplied (shared
/// preprocessing), then trains with Adam and plateau early stopping.
/// Throws ValidationError if the set is empty or holds a single class.
TrainResult train(TrainedModel model, std::span<const WindowSample> samples, const TrainConfig& config,
                  const std::optional<Normalizer>& normalizer = std::nullopt);
TrainResult train_features(TrainedModel model, std::span<const FeatureVector> features, std::span<const int> labels,
                           const TrainConfig& config);

struct Prediction {
  int label = 0;
  std::array<double, 2> probabilities{};
};

Prediction predict(const TrainedModel& model, const WindowSample& window);
std::vector<int> predict_labels(const TrainedModel& model, std::span<const WindowSample> windows);
std::vector<int> predict_features(const TrainedModel& model, std::span<const FeatureVector> features);

/// Per-sample gradient of the target-class cross-entropy with respect to
/// the window's 30 closes.
Closes input_price_gradient(const TrainedModel& model, const WindowSample& window, int target_class);

struct PriceGradients {
  std::vector<Closes> gradients;
  std::vector<int> predictions;  // at the evaluated point
};

/// Batched version for windows whose closes are overridden by `closes`.
PriceGradients price_gradients(const TrainedModel& model, std::span<const WindowSample> windows,
                               std::span<const Closes> closes, int target_class);

EvalReport evaluate_predictions(std::span<const int> predicted, std::span<const int> actual, std::string set_id);
EvalReport directional_accuracy(const TrainedModel& model, std::span<const WindowSample> samples,
                                std::string set_id = "");

std::vector<int> labels_of(std::span<const WindowSample> samples);

/// Directory holding manifest.json, weights.bin and normalizer.bin.
void save_bundle(const TrainedModel& model, const std::filesystem::path& dir);
TrainedModel load_bundle(const std::filesystem::path& dir);

std::vector<std::uint8_t> serialize_normalizer(const Normalizer& n);
Normalizer deserialize_normalizer(std::vector<std::uint8_t> bytes);

}  // namespace tuap
