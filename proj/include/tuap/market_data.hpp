#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace tuap {

/// Minutes since 1970-01-01T00:00 (exchange-local, no time zone).
using Minutes = std::int64_t;
/// Days since 1970-01-01.
using Day = std::int64_t;

inline constexpr Minutes kMinutesPerDay = 1440;

inline Day day_of(Minutes t) { return t >= 0 ? t / kMinutesPerDay : (t - kMinutesPerDay + 1) / kMinutesPerDay; }

Day make_day(int year, unsigned month, unsigned day);
int weekday(Day d);  // 0 = Sunday ... 6 = Saturday
std::string format_day(Day d);  // YYYY-MM-DD
Day parse_day(const std::string& text);
std::string format_timestamp(Minutes t);  // YYYY-MM-DDTHH:MM
Minutes parse_timestamp(const std::string& text);

struct MinuteBar {
  Minutes timestamp = 0;
  double open = 0.0;
  double high = 0.0;
  double low = 0.0;
  double close = 0.0;
  double volume = 0.0;

  bool operator==(const MinuteBar&) const = default;
};

/// Positive prices, high/low envelope open and close, non-negative volume.
bool is_valid(const MinuteBar& bar);

struct TradingDay {
  Day day = 0;
  std::size_t first = 0;  // index of the first bar in the series
  std::size_t count = 0;
};

/// One symbol's minute bars, sorted by timestamp with no duplicates.
class StockSeries {
 public:
  StockSeries() = default;
  /// Throws ValidationError if any bar is invalid or timestamps are not
  /// strictly increasing.
  StockSeries(std::string symbol, std::vector<MinuteBar> bars);

  const std::string& symbol() const { return symbol_; }
  std::span<const MinuteBar> bars() const { return bars_; }
  const std::vector<TradingDay>& calendar() const { return calendar_; }
  std::span<const MinuteBar> day_bars(std::size_t day_index) const;
  std::size_t size() const { return bars_.size(); }

  bool operator==(const StockSeries& other) const {
    return symbol_ == other.symbol_ && bars_ == other.bars_;
  }

 private:
  std::string symbol_;
  std::vector<MinuteBar> bars_;
  std::vector<TradingDay> calendar_;
};

/// Column names of an OHLCV CSV file. `symbol_filter` selects one symbol
/// from a multi-symbol file.
struct CsvSchema {
  std::string symbol = "symbol";
  std::string timestamp = "timestamp";
  std::string open = "open";
  std::string high = "high";
  std::string low = "low";
  std::string close = "close";
  std::string volume = "volume";
  char delimiter = ',';
  std::optional<std::string> symbol_filter;
  /// Fraction of rows that may be dropped before the file is rejected.
  double max_drop_fraction = 0.05;
};

struct CsvLoadResult {
  StockSeries series;
  std::size_t rows = 0;
  std::size_t dropped = 0;
};

CsvLoadResult load_csv(const std::filesystem::path& path, const CsvSchema& schema = {});
void save_csv(const std::filesystem::path& path, const StockSeries& series);

struct SynthParams {
  std::string symbol = "SYN";
  int n_days = 20;
  int minutes_per_day = 390;
  int open_minute = 9 * 60 + 30;
  Day start_day = 17420;  // 2017-09-11
  double start_price = 100.0;
  double drift = 0.0;        // per-minute log drift
  double volatility = 2e-4;  // per-minute log-return std
  double seasonality_amplitude = 5e-4;  // log-price amplitude of the cycle
  double seasonality_period = 40.0;     // minutes
  double volume_log_mean = 7.0;
  double volume_log_std = 0.5;

  void validate() const;
};

/// Geometric random walk plus a sinusoidal intraday cycle with a random
/// daily phase. Weekdays only. Identical seeds give identical series.
StockSeries synthesize_series(const SynthParams& params, std::uint64_t seed);

inline constexpr int kDefaultLookback = 30;
inline constexpr int kDefaultHorizon = 5;

struct WindowSample {
  std::vector<MinuteBar> bars;
  int label = 0;  // 1 = close rises over the horizon, 0 otherwise (ties included)
  double anchor_close = 0.0;
  std::string symbol;
  Minutes anchor_timestamp = 0;
};

/// Every anchor whose lookback and horizon fit inside one trading day with
/// no missing minutes.
std::vector<WindowSample> make_windows(const StockSeries& series, int lookback = kDefaultLookback,
                                       int horizon = kDefaultHorizon);

/// Exactly `n_per_class` samples of each label, uniformly without
/// replacement, returned in chronological order.
std::vector<WindowSample> balanced_sample(std::span<const WindowSample> samples,
                                          std::size_t n_per_class, std::uint64_t seed);

struct DayRange {
  Day first = 0;
  Day last = 0;  // inclusive
  bool contains(Day d) const { return d >= first && d <= last; }
};

inline constexpr std::size_t kTestSets = 6;

/// Train < craft < T1 < ... < T6, all disjoint.
class SplitProtocol {
 public:
  SplitProtocol(DayRange train, DayRange craft, std::array<DayRange, kTestSets> tests,
                std::uint64_t seed, std::size_t craft_per_day = 40,
                std::size_t samples_per_class = 100);

  /// Calendar ranges of the original study.
  static SplitProtocol reference(std::uint64_t seed);
  /// The first `train_days` trading days train, the next 3 craft, and the
  /// following six blocks of `days_per_test` trading days test.
  static SplitProtocol trailing(const StockSeries& series, int train_days, std::uint64_t seed,
                                int craft_days = 3, int days_per_test = 5);

  const DayRange& train() const { return train_; }
  const DayRange& craft() const { return craft_; }
  const std::array<DayRange, kTestSets>& tests() const { return tests_; }
  std::uint64_t seed() const { return seed_; }
  std::size_t craft_per_day() const { return craft_per_day_; }
  std::size_t samples_per_class() const { return samples_per_class_; }

 private:
  DayRange train_;
  DayRange craft_;
  std::array<DayRange, kTestSets> tests_;
  std::uint64_t seed_;
  std::size_t craft_per_day_;
  std::size_t samples_per_class_;
};

struct Split {
  std::vector<WindowSample> train;
  std::vector<WindowSample> craft;
  std::array<std::vector<WindowSample>, kTestSets> tests;
  /// Every window of each test week, from which `tests` was sampled.
  std::array<std::vector<WindowSample>, kTestSets> test_pools;
  /// Every window of the craft days.
  std::vector<WindowSample> craft_pool;
};

Split build_split(const StockSeries& series, const SplitProtocol& protocol,
                  int lookback = kDefaultLookback, int horizon = kDefaultHorizon);

}  // namespace tuap
