#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tuap/alpha_models.hpp"
#include "tuap/attack.hpp"
#include "tuap/market_data.hpp"

namespace tuap {

// --- supervised detectors ------------------------------------------------------

/// Windows as presented to a detector; flag 1 marks a perturbed window.
struct DetectorDataset {
  std::vector<WindowSample> windows;
  std::vector<WindowSample> twins;  // the benign original of each window
  std::vector<int> flags;
  double ratio = 0.0;  // requested perturbed share

  std::size_t perturbed() const;
  std::vector<FeatureVector> features() const;
};

struct DetectorSetConfig {
  double ratio = 0.1;
  std::size_t week_size = 1500;  // samples per T'_i; ratio * week_size come from T_i
  std::uint64_t seed = 1;
};

struct DetectorSets {
  DetectorDataset train;
  std::array<DetectorDataset, kTestSets> tests;
};

/// Train mixes every craft-period window, `ratio` of them perturbed. Each
/// T'_i perturbs ratio * week_size samples of T_i and fills the rest with
/// benign windows of the same week. Throws ValidationError when the week
/// cannot supply the benign share or T_i is too small.
DetectorSets build_detector_sets(std::span<const WindowSample> craft_pool, const Offsets& tuap,
                                 std::span<const std::vector<WindowSample>> tests,
                                 std::span<const std::vector<WindowSample>> test_pools,
                                 const DetectorSetConfig& config);

/// Flags one window per returned entry.
using Detector = std::function<std::vector<int>(const DetectorDataset&)>;

/// z-scored features, Euclidean distance, majority vote (ties are benign).
class KnnDetector {
 public:
  KnnDetector(const DetectorDataset& train, int k = 5);
  std::vector<int> predict(std::span<const FeatureVector> features) const;
  std::vector<int> operator()(const DetectorDataset& d) const { return predict(d.features()); }

 private:
  int k_;
  Normalizer normalizer_;
  std::vector<FeatureVector> points_;
  std::vector<int> flags_;
};

struct AnnDetectorConfig {
  int epochs = 30;
  int batch_size = 32;
  double learning_rate = 1e-3;
  bool oversample = true;  // replicate perturbed samples up to the benign count
  std::uint64_t seed = 1;
};

/// dense(32, relu) -> dense(16, relu) -> 2-way softmax on z-scored features.
class AnnDetector {
 public:
  AnnDetector(const DetectorDataset& train, const AnnDetectorConfig& config = {});
  AnnDetector(std::span<const FeatureVector> features, std::span<const int> flags,
              const AnnDetectorConfig& config = {});
  std::vector<int> predict(std::span<const FeatureVector> features) const;
  std::vector<int> operator()(const DetectorDataset& d) const { return predict(d.features()); }

 private:
  TrainedModel model_;
};

struct WeekDetection {
  std::string set_id;
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  std::optional<double> precision;  // percent; empty when nothing was flagged
  std::optional<double> recall;     // percent; empty when nothing was perturbed
};

struct DetectionReport {
  std::string detector;
  std::vector<WeekDetection> weeks;
};

WeekDetection score_detection(std::span<const int> predicted, std::span<const int> actual, std::string set_id);
DetectionReport evaluate_detector(const std::string& name, const Detector& detector,
                                  std::span<const DetectorDataset> tests);
std::string detection_csv(const DetectionReport& report);

// --- adversarial retraining -------------------------------------------------------

struct RetrainConfig {
  std::vector<double> fractions{0.0, 0.1, 0.2, 0.3, 0.4, 0.5};
  TrainConfig training;  // use the baseline's config so phi = 0 reproduces it
};

struct RetrainCell {
  double fraction = 0.0;
  std::string status = "ok";  // or the divergence message
  std::size_t perturbed = 0;
  std::array<double, kTestSets> tfr{};  // on T_i + TUAP
  std::array<double, kTestSets> da{};   // on clean T_i
  double mean_tfr = 0.0;
  double mean_da = 0.0;
};

struct RetrainReport {
  std::string arch;
  int target_class = 1;
  std::vector<RetrainCell> cells;
};

/// Retrains from scratch on (1 - phi) clean and phi perturbed training
/// windows (labels unchanged), sharing the baseline normalizer. The
/// perturbed windows of a smaller phi are a prefix of those of a larger one.
RetrainReport adversarial_retrain(const TrainedModel& baseline, std::span<const WindowSample> train_set,
                                  const Tuap& tuap, std::span<const std::vector<WindowSample>> tests,
                                  const RetrainConfig& config);
std::string retrain_csv(const RetrainReport& report);

// --- multi-broker cross-check ----------------------------------------------------

struct Mismatch {
  Minutes timestamp = 0;
  std::vector<double> closes;  // one per stream
  double deviation = 0.0;      // (max - min) / min over the streams' closes
  std::string action = "dropped";
};

struct FilterResult {
  StockSeries series;
  std::vector<Mismatch> mismatches;
  std::size_t minutes = 0;  // minutes compared
};

/// Per minute: emits the median bar when the relative close spread is
/// within `tolerance` (a fraction, 5e-5 = 0.005%), otherwise drops the minute
/// and records it. Streams must share the symbol and timestamps.
FilterResult multi_broker_filter(std::span<const StockSeries> streams, double tolerance);
std::string mismatch_csv(const FilterResult& result, std::size_t streams);

/// A broker feed carrying `offsets` on every minute: minute m of each day's
/// consecutive 30-minute blocks gets close * (1 + offsets(m mod 30)).
StockSeries perturb_stream(const StockSeries& series, const Offsets& offsets);

}  // namespace tuap
