#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "doctest.h"
#include "test_support.hpp"
#include "tuap/defense.hpp"
#include "tuap/error.hpp"
#include "tuap/experiments.hpp"

using namespace tuap;

namespace {

ExperimentPlan small_plan() {
  ExperimentPlan p;
  p.stocks = {parse_stock("AAA::80")};
  p.models = {ArchKind::dnn};
  p.train_days = 4;
  p.training.epochs = 2;
  p.seed = 17;
  return p;
}

const StockRun& shared_run() {
  static const StockRun run = [] {
    const ExperimentPlan p = small_plan();
    return prepare_stock(p, p.stocks[0]);
  }();
  return run;
}

Offsets ramp(double scale) {
  Offsets v;
  for (int i = 0; i < kWindowLength; ++i) v(i) = scale * (i % 2 ? 1.0 : -1.0) * (1.0 + i / 30.0);
  return v;
}

DetectorSets sets(double ratio, std::size_t week_size = 1500) {
  const StockRun& run = shared_run();
  DetectorSetConfig c;
  c.ratio = ratio;
  c.week_size = week_size;
  c.seed = 3;
  return build_detector_sets(run.split.craft_pool, ramp(2e-4), run.split.tests, run.split.test_pools, c);
}

std::vector<WindowSample> random_windows(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<WindowSample> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(testing::random_window(rng, 50.0 + static_cast<double>(i % 9)));
  return out;
}

}  // namespace

TEST_CASE("detector sets honour the requested perturbed share") {
  const DetectorSets zero = sets(0.0);
  CHECK(zero.train.perturbed() == 0);
  for (const auto& t : zero.tests) {
    CHECK(t.perturbed() == 0);
    CHECK(t.windows.size() == 1500);
  }

  const DetectorSets s = sets(0.1);
  const std::size_t n = shared_run().split.craft_pool.size();
  CHECK(s.train.windows.size() == n);
  CHECK(s.train.perturbed() == static_cast<std::size_t>(std::llround(0.1 * static_cast<double>(n))));
  for (const auto& t : s.tests) {
    CHECK(t.perturbed() == 150);
    CHECK(t.windows.size() == 1500);
    CHECK(std::is_sorted(t.windows.begin(), t.windows.end(),
                         [](const auto& a, const auto& b) { return a.anchor_timestamp < b.anchor_timestamp; }));
  }

  CHECK_THROWS_AS(sets(1.5), ValidationError);
  CHECK_THROWS_WITH_AS(sets(0.1, 1000000), doctest::Contains("perturbed requested"), ValidationError);
  CHECK_THROWS_WITH_AS(sets(0.0, 100000), doctest::Contains("insufficient benign pool"), ValidationError);
}

TEST_CASE("perturbed windows differ from their twins by exactly the offsets") {
  const DetectorSets s = sets(0.1);
  const Offsets v = ramp(2e-4);
  auto check_set = [&](const DetectorDataset& d) {
    for (std::size_t i = 0; i < d.windows.size(); ++i) {
      const auto& w = d.windows[i];
      const auto& t = d.twins[i];
      REQUIRE(w.anchor_timestamp == t.anchor_timestamp);
      for (int j = 0; j < kWindowLength; ++j) {
        const double rel = w.bars[j].close / t.bars[j].close - 1.0;
        if (d.flags[i])
          CHECK(rel == doctest::Approx(v(j)).epsilon(1e-9));
        else
          CHECK(rel == 0.0);
      }
    }
  };
  check_set(s.train);
  for (const auto& t : s.tests) check_set(t);
}

TEST_CASE("detector test weeks never reuse craft-period windows") {
  const DetectorSets s = sets(0.1);
  std::set<Minutes> craft;
  for (const auto& w : s.train.windows) craft.insert(w.anchor_timestamp);
  std::set<Minutes> seen;
  for (const auto& t : s.tests)
    for (const auto& w : t.windows) {
      CHECK(craft.count(w.anchor_timestamp) == 0);
      CHECK(seen.insert(w.anchor_timestamp).second);
    }
}

TEST_CASE("kNN with k = 1 recovers its own training flags") {
  DetectorDataset d;
  d.windows = random_windows(200, 5);
  for (std::size_t i = 0; i < d.windows.size(); ++i) d.flags.push_back(i % 10 == 0);
  d.twins = d.windows;
  const KnnDetector knn(d, 1);
  CHECK(knn(d) == d.flags);

  CHECK_THROWS_AS(KnnDetector(d, 0), ValidationError);
  DetectorDataset one = d;
  std::fill(one.flags.begin(), one.flags.end(), 0);
  CHECK_THROWS_AS(KnnDetector(one, 5), ValidationError);
}

TEST_CASE("ANN detector separates well-separated classes") {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n(0.0, 1.0);
  auto draw = [&](std::size_t count, int flag_every) {
    std::vector<FeatureVector> f;
    std::vector<int> flags;
    for (std::size_t i = 0; i < count; ++i) {
      const int flag = i % static_cast<std::size_t>(flag_every) == 0;
      FeatureVector x;
      for (int j = 0; j < kFeatureCount; ++j) x(j) = n(rng);
      x(0) += flag ? 6.0 : 0.0;
      f.push_back(x);
      flags.push_back(flag);
    }
    return std::pair{f, flags};
  };
  const auto [train_f, train_y] = draw(1000, 10);
  const auto [test_f, test_y] = draw(1000, 10);
  AnnDetectorConfig c;
  c.seed = 2;
  const AnnDetector ann(train_f, train_y, c);
  const WeekDetection w = score_detection(ann.predict(test_f), test_y, "held-out");
  REQUIRE(w.recall.has_value());
  CHECK(*w.recall >= 99.0);
  CHECK(*w.precision >= 95.0);
}

TEST_CASE("detection scoring") {
  const DetectorSets s = sets(0.1);
  const Detector oracle = [](const DetectorDataset& d) { return d.flags; };
  const Detector benign = [](const DetectorDataset& d) { return std::vector<int>(d.flags.size(), 0); };

  const DetectionReport r = evaluate_detector("oracle", oracle, s.tests);
  REQUIRE(r.weeks.size() == kTestSets);
  for (const auto& w : r.weeks) {
    CHECK(*w.precision == 100.0);
    CHECK(*w.recall == 100.0);
    CHECK(w.tp == 150);
    CHECK(w.tn == 1350);
  }
  CHECK(r.weeks[0].set_id == "T'1");

  const DetectionReport b = evaluate_detector("benign", benign, s.tests);
  CHECK(*b.weeks[0].recall == 0.0);
  CHECK_FALSE(b.weeks[0].precision.has_value());
  CHECK(detection_csv(b).find(",null,0\n") != std::string::npos);

  // 4 flagged, 3 of them right; 5 perturbed in total.
  const std::vector<int> actual{1, 1, 1, 1, 1, 0, 0, 0, 0, 0};
  const std::vector<int> pred{1, 1, 1, 0, 0, 1, 0, 0, 0, 0};
  const WeekDetection w = score_detection(pred, actual, "x");
  CHECK(w.tp == 3);
  CHECK(w.fp == 1);
  CHECK(w.fn == 2);
  CHECK(w.tn == 4);
  CHECK(*w.precision == doctest::Approx(75.0));
  CHECK(*w.recall == doctest::Approx(60.0));
  CHECK_THROWS_AS(score_detection(pred, std::vector<int>{1}, "x"), ValidationError);
}

TEST_CASE("retraining with no perturbed share reproduces the baseline") {
  const ExperimentPlan plan = small_plan();
  const StockRun& run = shared_run();
  const TrainedModel baseline = train_for(plan, run, ArchKind::dnn);
  Tuap tuap;
  tuap.offsets = ramp(3e-4);
  tuap.target_class = 1;

  RetrainConfig c;
  c.fractions = {0.0, 0.2};
  c.training = plan.training;
  const RetrainReport r = adversarial_retrain(baseline, run.split.train, tuap, run.split.tests, c);
  REQUIRE(r.cells.size() == 2);
  CHECK(r.arch == "dnn");
  const RetrainCell& zero = r.cells[0];
  CHECK(zero.status == "ok");
  CHECK(zero.perturbed == 0);
  for (std::size_t t = 0; t < kTestSets; ++t) {
    CHECK(zero.tfr[t] == tfr(baseline, run.split.tests[t], tuap.offsets, 1));
    CHECK(zero.da[t] == directional_accuracy(baseline, run.split.tests[t]).da);
  }
  CHECK(r.cells[1].perturbed ==
        static_cast<std::size_t>(std::llround(0.2 * static_cast<double>(run.split.train.size()))));

  const std::string csv = retrain_csv(r);
  CHECK(csv.rfind("arch,fraction,perturbed,status,mean_tfr,mean_da,tfr_T1", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);

  c.fractions = {-0.1};
  CHECK_THROWS_AS(adversarial_retrain(baseline, run.split.train, tuap, run.split.tests, c), ValidationError);
}

TEST_CASE("multi-broker filter") {
  const StockSeries& clean = shared_run().series;
  const std::vector<StockSeries> same{clean, clean, clean};

  SUBCASE("identical feeds pass through unchanged") {
    const FilterResult r = multi_broker_filter(same, 5e-5);
    CHECK(r.mismatches.empty());
    CHECK(r.minutes == clean.size());
    CHECK(std::equal(r.series.bars().begin(), r.series.bars().end(), clean.bars().begin(), clean.bars().end()));
  }

  SUBCASE("a 0.02% perturbation trips a 0.005% tolerance on every minute") {
    const Offsets v = Offsets::Constant(2e-4);
    const std::vector<StockSeries> feeds{clean, clean, perturb_stream(clean, v)};
    const FilterResult tight = multi_broker_filter(feeds, 5e-5);
    CHECK(tight.mismatches.size() == clean.size());
    CHECK(tight.series.size() == 0);
    const FilterResult loose = multi_broker_filter(feeds, 5e-4);
    CHECK(loose.mismatches.empty());
    CHECK(std::equal(loose.series.bars().begin(), loose.series.bars().end(), clean.bars().begin(),
                     clean.bars().end()));
  }

  SUBCASE("dropped minutes are exactly those over tolerance") {
    const std::vector<StockSeries> feeds{clean, perturb_stream(clean, ramp(1e-4))};
    const double tol = 1.2e-4;
    const FilterResult r = multi_broker_filter(feeds, tol);
    CHECK(r.series.size() + r.mismatches.size() == clean.size());
    std::set<Minutes> dropped;
    for (const auto& m : r.mismatches) {
      CHECK(m.deviation > tol);
      REQUIRE(m.closes.size() == 2);
      const double dev = std::abs(m.closes[1] - m.closes[0]) / std::min(m.closes[0], m.closes[1]);
      CHECK(dev == doctest::Approx(m.deviation));
      dropped.insert(m.timestamp);
    }
    CHECK_FALSE(dropped.empty());
    for (const auto& b : r.series.bars()) CHECK(dropped.count(b.timestamp) == 0);
    const std::string csv = mismatch_csv(r, 2);
    CHECK(csv.rfind("timestamp,close_1,close_2,max_deviation,action\n", 0) == 0);
    CHECK(csv.find(",dropped\n") != std::string::npos);
  }

  SUBCASE("misaligned or single feeds are rejected") {
    CHECK_THROWS_AS(multi_broker_filter(std::vector<StockSeries>{clean}, 5e-5), ValidationError);
    std::vector<MinuteBar> shifted(clean.bars().begin() + 1, clean.bars().end());
    std::vector<StockSeries> feeds{clean, StockSeries(clean.symbol(), shifted)};
    CHECK_THROWS_WITH_AS(multi_broker_filter(feeds, 5e-5), doctest::Contains("not time-aligned"), ValidationError);
  }
}

TEST_CASE("perturb_stream applies offsets per 30-minute block of each day") {
  const StockSeries& clean = shared_run().series;
  const Offsets v = ramp(1e-4);
  const StockSeries p = perturb_stream(clean, v);
  const auto& day = clean.calendar().front();
  for (std::size_t j = 0; j < 65; ++j) {
    const double rel = p.bars()[day.first + j].close / clean.bars()[day.first + j].close - 1.0;
    CHECK(rel == doctest::Approx(v(static_cast<int>(j % 30))).epsilon(1e-9));
    CHECK(p.bars()[day.first + j].open == clean.bars()[day.first + j].open);
  }
}
