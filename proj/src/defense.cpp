#include "tuap/defense.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "tuap/error.hpp"
#include "tuap/io.hpp"

namespace tuap {

namespace {

std::vector<std::size_t> permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(p.begin(), p.end(), rng);
  return p;
}

std::size_t share(double ratio, std::size_t n) {
  return static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n)));
}

void check_two_flags(std::span<const int> flags) {
  const auto ones = std::count(flags.begin(), flags.end(), 1);
  if (ones == 0 || ones == static_cast<std::ptrdiff_t>(flags.size()))
    throw ValidationError("detector training set holds a single class");
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : (v[n / 2 - 1] + v[n / 2]) / 2.0;
}

std::string opt(const std::optional<double>& v) { return v ? io::format_double(*v) : "null"; }

}  // namespace

std::size_t DetectorDataset::perturbed() const {
  return static_cast<std::size_t>(std::count(flags.begin(), flags.end(), 1));
}

std::vector<FeatureVector> DetectorDataset::features() const { return extract_all(windows); }

DetectorSets build_detector_sets(std::span<const WindowSample> craft_pool, const Offsets& tuap,
                                 std::span<const std::vector<WindowSample>> tests,
                                 std::span<const std::vector<WindowSample>> test_pools,
                                 const DetectorSetConfig& config) {
  if (!(config.ratio >= 0.0 && config.ratio <= 1.0)) throw ValidationError("perturbed ratio must lie in [0, 1]");
  if (tests.size() != kTestSets || test_pools.size() != kTestSets)
    throw ValidationError("detector sets need six test weeks");
  if (craft_pool.empty()) throw ValidationError("craft-period pool is empty");

  std::set<Minutes> craft_anchors;
  for (const auto& w : craft_pool) craft_anchors.insert(w.anchor_timestamp);

  DetectorSets out;
  {
    DetectorDataset& d = out.train;
    d.ratio = config.ratio;
    const auto perm = permutation(craft_pool.size(), io::derive_seed(config.seed, 0x6474));
    std::vector<char> hit(craft_pool.size(), 0);
    for (std::size_t i = 0; i < share(config.ratio, craft_pool.size()); ++i) hit[perm[i]] = 1;
    for (std::size_t i = 0; i < craft_pool.size(); ++i) {
      d.twins.push_back(craft_pool[i]);
      d.windows.push_back(hit[i] ? apply_perturbation(craft_pool[i], tuap) : craft_pool[i]);
      d.flags.push_back(hit[i]);
    }
  }

  for (std::size_t week = 0; week < kTestSets; ++week) {
    const std::string name = "T" + std::to_string(week + 1);
    const std::size_t n_pert = share(config.ratio, config.week_size);
    const std::size_t n_benign = config.week_size - n_pert;
    if (n_pert > tests[week].size())
      throw ValidationError(name + " holds " + std::to_string(tests[week].size()) + " samples, " +
                            std::to_string(n_pert) + " perturbed requested");
    const auto perm = permutation(tests[week].size(), io::derive_seed(config.seed, 0x100 + week));
    std::vector<std::pair<WindowSample, int>> mix;
    std::set<Minutes> used;
    for (std::size_t i = 0; i < n_pert; ++i) {
      const WindowSample& w = tests[week][perm[i]];
      used.insert(w.anchor_timestamp);
      mix.emplace_back(w, 1);
    }
    std::vector<const WindowSample*> benign;
    for (const auto& w : test_pools[week])
      if (!used.count(w.anchor_timestamp)) benign.push_back(&w);
    if (benign.size() < n_benign)
      throw ValidationError("insufficient benign pool: " + name + " has " + std::to_string(benign.size()) +
                            " benign windows, " + std::to_string(n_benign) + " needed");
    const auto bperm = permutation(benign.size(), io::derive_seed(config.seed, 0x200 + week));
    for (std::size_t i = 0; i < n_benign; ++i) mix.emplace_back(*benign[bperm[i]], 0);
    std::sort(mix.begin(), mix.end(),
              [](const auto& a, const auto& b) { return a.first.anchor_timestamp < b.first.anchor_timestamp; });

    DetectorDataset& d = out.tests[week];
    d.ratio = config.ratio;
    for (const auto& [w, flag] : mix) {
      if (craft_anchors.count(w.anchor_timestamp))
        throw ValidationError("window " + format_timestamp(w.anchor_timestamp) + " is in both craft and " + name);
      d.twins.push_back(w);
      d.windows.push_back(flag ? apply_perturbation(w, tuap) : w);
      d.flags.push_back(flag);
    }
  }
  return out;
}

KnnDetector::KnnDetector(const DetectorDataset& train, int k) : k_(k) {
  if (k < 1) throw ValidationError("k must be at least 1");
  if (train.windows.size() < static_cast<std::size_t>(k)) throw ValidationError("fewer training windows than k");
  check_two_flags(train.flags);
  const auto features = train.features();
  normalizer_ = Normalizer::fit(features);
  for (const auto& f : features) points_.push_back(normalizer_.apply(f));
  flags_ = train.flags;
}

std::vector<int> KnnDetector::predict(std::span<const FeatureVector> features) const {
  std::vector<int> out;
  out.reserve(features.size());
  std::vector<std::pair<double, std::size_t>> dist(points_.size());
  const auto k = static_cast<std::size_t>(k_);
  for (const auto& f : features) {
    const FeatureVector z = normalizer_.apply(f);
    for (std::size_t i = 0; i < points_.size(); ++i) dist[i] = {(points_[i] - z).squaredNorm(), i};
    std::nth_element(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k - 1), dist.end());
    std::sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k));
    std::size_t votes = 0;
    for (std::size_t i = 0; i < k; ++i) votes += static_cast<std::size_t>(flags_[dist[i].second]);
    out.push_back(2 * votes > k ? 1 : 0);
  }
  return out;
}

AnnDetector::AnnDetector(const DetectorDataset& train, const AnnDetectorConfig& config)
    : AnnDetector(train.features(), train.flags, config) {}

AnnDetector::AnnDetector(std::span<const FeatureVector> features, std::span<const int> flags,
                         const AnnDetectorConfig& config) {
  if (features.size() != flags.size()) throw ValidationError("feature and flag counts differ");
  check_two_flags(flags);
  std::vector<FeatureVector> x(features.begin(), features.end());
  std::vector<int> y(flags.begin(), flags.end());
  if (config.oversample) {
    std::vector<std::size_t> pos;
    for (std::size_t i = 0; i < flags.size(); ++i)
      if (flags[i] == 1) pos.push_back(i);
    const std::size_t neg = flags.size() - pos.size();
    if (pos.size() < neg) {
      const std::size_t extra = neg - pos.size();
      const auto perm = permutation(pos.size(), io::derive_seed(config.seed, 0x6f76));
      for (std::size_t i = 0; i < extra; ++i) {
        x.push_back(features[pos[perm[i % pos.size()]]]);
        y.push_back(1);
      }
    }
  }
  AlphaArch arch;
  arch.kind = ArchKind::dnn;
  arch.input = {0, 0, kFeatureCount};
  arch.layers = {nn::LayerSpec::dense(32, nn::Activation::relu), nn::LayerSpec::dense(16, nn::Activation::relu),
                 nn::LayerSpec::softmax(2)};
  TrainConfig tc;
  tc.epochs = config.epochs;
  tc.batch_size = config.batch_size;
  tc.learning_rate = config.learning_rate;
  tc.validation_fraction = 0.0;
  tc.seed = config.seed;
  model_ = train_features(build(arch, config.seed), x, y, tc).model;
}

std::vector<int> AnnDetector::predict(std::span<const FeatureVector> features) const {
  return predict_features(model_, features);
}

WeekDetection score_detection(std::span<const int> predicted, std::span<const int> actual, std::string set_id) {
  if (predicted.size() != actual.size()) throw ValidationError("prediction and flag counts differ");
  WeekDetection w;
  w.set_id = std::move(set_id);
  for (std::size_t i = 0; i < actual.size(); ++i) {
    const bool p = predicted[i] == 1, a = actual[i] == 1;
    if (p && a) ++w.tp;
    if (p && !a) ++w.fp;
    if (!p && a) ++w.fn;
    if (!p && !a) ++w.tn;
  }
  if (w.tp + w.fp > 0) w.precision = 100.0 * static_cast<double>(w.tp) / static_cast<double>(w.tp + w.fp);
  if (w.tp + w.fn > 0) w.recall = 100.0 * static_cast<double>(w.tp) / static_cast<double>(w.tp + w.fn);
  return w;
}

DetectionReport evaluate_detector(const std::string& name, const Detector& detector,
                                  std::span<const DetectorDataset> tests) {
  DetectionReport r;
  r.detector = name;
  for (std::size_t i = 0; i < tests.size(); ++i)
    r.weeks.push_back(score_detection(detector(tests[i]), tests[i].flags, "T'" + std::to_string(i + 1)));
  return r;
}

std::string detection_csv(const DetectionReport& report) {
  std::ostringstream o;
  o << "detector,set,tp,fp,fn,tn,precision,recall\n";
  for (const auto& w : report.weeks)
    o << report.detector << ',' << w.set_id << ',' << w.tp << ',' << w.fp << ',' << w.fn << ',' << w.tn << ','
      << opt(w.precision) << ',' << opt(w.recall) << '\n';
  return o.str();
}

RetrainReport adversarial_retrain(const TrainedModel& baseline, std::span<const WindowSample> train_set,
                                  const Tuap& tuap, std::span<const std::vector<WindowSample>> tests,
                                  const RetrainConfig& config) {
  if (config.fractions.empty()) throw ValidationError("fraction grid is empty");
  for (double f : config.fractions)
    if (!(f >= 0.0 && f <= 1.0)) throw ValidationError("retraining fractions must lie in [0, 1]");
  if (tests.empty()) throw ValidationError("no test sets to evaluate");
  if (train_set.empty()) throw ValidationError("training set is empty");

  TrainConfig training = config.training;
  training.seed = baseline.meta.seed;
  const auto perm = permutation(train_set.size(), io::derive_seed(training.seed, 0x7265));

  RetrainReport report;
  report.arch = to_string(baseline.arch.kind);
  report.target_class = tuap.target_class;
  for (double fraction : config.fractions) {
    RetrainCell cell;
    cell.fraction = fraction;
    cell.perturbed = share(fraction, train_set.size());
    std::vector<WindowSample> windows(train_set.begin(), train_set.end());
    for (std::size_t i = 0; i < cell.perturbed; ++i) windows[perm[i]] = apply_perturbation(windows[perm[i]], tuap.offsets);
    try {
      const TrainedModel m =
          train(build(baseline.arch, training.seed), windows, training, baseline.normalizer).model;
      for (std::size_t t = 0; t < tests.size() && t < kTestSets; ++t) {
        cell.tfr[t] = tfr(m, tests[t], tuap.offsets, tuap.target_class);
        cell.da[t] = directional_accuracy(m, tests[t]).da;
        cell.mean_tfr += cell.tfr[t];
        cell.mean_da += cell.da[t];
      }
      const double n = static_cast<double>(std::min(tests.size(), kTestSets));
      cell.mean_tfr /= n;
      cell.mean_da /= n;
    } catch (const NumericalError& e) {
      cell.status = e.what();
    }
    report.cells.push_back(cell);
  }
  return report;
}

std::string retrain_csv(const RetrainReport& report) {
  std::ostringstream o;
  o << "arch,fraction,perturbed,status,mean_tfr,mean_da";
  for (std::size_t t = 1; t <= kTestSets; ++t) o << ",tfr_T" << t;
  for (std::size_t t = 1; t <= kTestSets; ++t) o << ",da_T" << t;
  o << '\n';
  for (const auto& c : report.cells) {
    std::string status = c.status;
    std::replace(status.begin(), status.end(), ',', ';');
    o << report.arch << ',' << io::format_double(c.fraction) << ',' << c.perturbed << ',' << status << ','
      << io::format_double(c.mean_tfr) << ',' << io::format_double(c.mean_da);
    for (double v : c.tfr) o << ',' << io::format_double(v);
    for (double v : c.da) o << ',' << io::format_double(v);
    o << '\n';
  }
  return o.str();
}

FilterResult multi_broker_filter(std::span<const StockSeries> streams, double tolerance) {
  if (streams.size() < 2) throw ValidationError("cross-check needs at least two streams");
  if (!(tolerance >= 0.0)) throw ValidationError("tolerance must not be negative");
  const auto& ref = streams[0];
  for (const auto& s : streams) {
    if (s.symbol() != ref.symbol())
      throw ValidationError("streams carry different symbols: " + ref.symbol() + " vs " + s.symbol());
    if (s.size() != ref.size()) throw ValidationError("streams are not time-aligned: bar counts differ");
  }
  FilterResult out;
  out.minutes = ref.size();
  std::vector<MinuteBar> kept;
  const std::size_t k = streams.size();
  std::vector<double> opens(k), highs(k), lows(k), closes(k), volumes(k);
  for (std::size_t i = 0; i < ref.size(); ++i) {
    const Minutes t = ref.bars()[i].timestamp;
    for (std::size_t s = 0; s < k; ++s) {
      const MinuteBar& b = streams[s].bars()[i];
      if (b.timestamp != t) throw ValidationError("streams are not time-aligned at " + format_timestamp(t));
      opens[s] = b.open;
      highs[s] = b.high;
      lows[s] = b.low;
      closes[s] = b.close;
      volumes[s] = b.volume;
    }
    const auto [lo, hi] = std::minmax_element(closes.begin(), closes.end());
    const double deviation = (*hi - *lo) / *lo;
    if (deviation > tolerance) {
      out.mismatches.push_back({t, closes, deviation, "dropped"});
      continue;
    }
    MinuteBar b;
    b.timestamp = t;
    b.open = median(opens);
    b.close = median(closes);
    b.high = std::max({median(highs), b.open, b.close});
    b.low = std::min({median(lows), b.open, b.close});
    b.volume = median(volumes);
    kept.push_back(b);
  }
  out.series = StockSeries(ref.symbol(), std::move(kept));
  return out;
}

std::string mismatch_csv(const FilterResult& result, std::size_t streams) {
  std::ostringstream o;
  o << "timestamp";
  for (std::size_t s = 0; s < streams; ++s) o << ",close_" << s + 1;
  o << ",max_deviation,action\n";
  for (const auto& m : result.mismatches) {
    o << format_timestamp(m.timestamp);
    for (double c : m.closes) o << ',' << io::format_double(c);
    o << ',' << io::format_double(m.deviation) << ',' << m.action << '\n';
  }
  return o.str();
}

StockSeries perturb_stream(const StockSeries& series, const Offsets& offsets) {
  std::vector<MinuteBar> bars(series.bars().begin(), series.bars().end());
  for (const auto& day : series.calendar())
    for (std::size_t j = 0; j < day.count; ++j) {
      MinuteBar& b = bars[day.first + j];
      const double c = b.close * (1.0 + offsets(static_cast<int>(j % kWindowLength)));
      if (!(c > 0.0)) throw ValidationError("perturbation destroys positivity");
      b.close = c;
      b.high = std::max(b.high, c);
      b.low = std::min(b.low, c);
    }
  return StockSeries(series.symbol(), std::move(bars));
}

}  // namespace tuap
