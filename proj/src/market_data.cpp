#include "tuap/market_data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <numbers>
#include <random>
#include <sstream>

#include "tuap/error.hpp"
#include "tuap/io.hpp"

namespace tuap {

// Civil-calendar conversions (proleptic Gregorian).
Day make_day(int year, unsigned month, unsigned day) {
  year -= month <= 2;
  const Day era = (year >= 0 ? year : year - 399) / 400;
  const unsigned yoe = static_cast<unsigned>(year - era * 400);
  const unsigned doy = (153 * (month > 2 ? month - 3 : month + 9) + 2) / 5 + day - 1;
  const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
  return era * 146097 + static_cast<Day>(doe) - 719468;
}

namespace {

struct Civil {
  int year;
  unsigned month;
  unsigned day;
};

Civil civil_from_day(Day z) {
  z += 719468;
  const Day era = (z >= 0 ? z : z - 146096) / 146097;
  const unsigned doe = static_cast<unsigned>(z - era * 146097);
  const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
  const int y = static_cast<int>(yoe) + static_cast<int>(era) * 400;
  const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
  const unsigned mp = (5 * doy + 2) / 153;
  const unsigned d = doy - (153 * mp + 2) / 5 + 1;
  const unsigned m = mp < 10 ? mp + 3 : mp - 9;
  return {y + (m <= 2), m, d};
}

int parse_int(const std::string& s, std::size_t pos, std::size_t len, const std::string& text) {
  if (pos + len > s.size()) throw ValidationError("bad timestamp '" + text + "'");
  int v = 0;
  for (std::size_t i = pos; i < pos + len; ++i) {
    if (s[i] < '0' || s[i] > '9') throw ValidationError("bad timestamp '" + text + "'");
    v = v * 10 + (s[i] - '0');
  }
  return v;
}

std::string two(int v) { return (v < 10 ? "0" : "") + std::to_string(v); }

}  // namespace

int weekday(Day d) { return static_cast<int>(((d + 4) % 7 + 7) % 7); }

std::string format_day(Day d) {
  const Civil c = civil_from_day(d);
  return std::to_string(c.year) + "-" + two(static_cast<int>(c.month)) + "-" +
         two(static_cast<int>(c.day));
}

Day parse_day(const std::string& text) {
  const std::string s = io::trim(text);
  if (s.size() < 10 || s[4] != '-' || s[7] != '-') throw ValidationError("bad date '" + text + "'");
  const int y = parse_int(s, 0, 4, text);
  const int m = parse_int(s, 5, 2, text);
  const int d = parse_int(s, 8, 2, text);
  if (m < 1 || m > 12 || d < 1 || d > 31) throw ValidationError("bad date '" + text + "'");
  return make_day(y, static_cast<unsigned>(m), static_cast<unsigned>(d));
}

std::string format_timestamp(Minutes t) {
  const Day d = day_of(t);
  const Minutes m = t - d * kMinutesPerDay;
  return format_day(d) + "T" + two(static_cast<int>(m / 60)) + ":" + two(static_cast<int>(m % 60));
}

Minutes parse_timestamp(const std::string& text) {
  const std::string s = io::trim(text);
  if (s.size() < 16 || (s[10] != 'T' && s[10] != ' ') || s[13] != ':')
    throw ValidationError("bad timestamp '" + text + "'");
  const Day d = parse_day(s.substr(0, 10));
  const int hh = parse_int(s, 11, 2, text);
  const int mm = parse_int(s, 14, 2, text);
  if (hh > 23 || mm > 59) throw ValidationError("bad timestamp '" + text + "'");
  if (s.size() > 16) {
    // Optional ":SS"; minute resolution only.
    if (s.size() != 19 || s[16] != ':' || parse_int(s, 17, 2, text) != 0)
      throw ValidationError("bad timestamp '" + text + "'");
  }
  return d * kMinutesPerDay + hh * 60 + mm;
}

bool is_valid(const MinuteBar& b) {
  const bool finite = std::isfinite(b.open) && std::isfinite(b.high) && std::isfinite(b.low) &&
                      std::isfinite(b.close) && std::isfinite(b.volume);
  return finite && b.open > 0 && b.high > 0 && b.low > 0 && b.close > 0 && b.volume >= 0 &&
         b.low <= std::min(b.open, b.close) && b.high >= std::max(b.open, b.close);
}

StockSeries::StockSeries(std::string symbol, std::vector<MinuteBar> bars)
    : symbol_(std::move(symbol)), bars_(std::move(bars)) {
  for (std::size_t i = 0; i < bars_.size(); ++i) {
    if (!is_valid(bars_[i]))
      throw ValidationError("invalid bar at " + format_timestamp(bars_[i].timestamp));
    if (i > 0 && bars_[i].timestamp <= bars_[i - 1].timestamp)
      throw ValidationError("non-monotonic timestamps at " + format_timestamp(bars_[i].timestamp));
    const Day d = day_of(bars_[i].timestamp);
    if (calendar_.empty() || calendar_.back().day != d) calendar_.push_back({d, i, 0});
    ++calendar_.back().count;
  }
}

std::span<const MinuteBar> StockSeries::day_bars(std::size_t day_index) const {
  const TradingDay& td = calendar_.at(day_index);
  return std::span<const MinuteBar>(bars_).subspan(td.first, td.count);
}

CsvLoadResult load_csv(const std::filesystem::path& path, const CsvSchema& schema) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw ValidationError(path.string() + ": empty file");
  const auto header = io::split(line, schema.delimiter);
  auto column = [&](const std::string& name) -> std::size_t {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (io::trim(header[i]) == name) return i;
    throw ValidationError(path.string() + ": missing column '" + name + "'");
  };
  const std::size_t c_sym = column(schema.symbol), c_ts = column(schema.timestamp),
                    c_o = column(schema.open), c_h = column(schema.high), c_l = column(schema.low),
                    c_c = column(schema.close), c_v = column(schema.volume);
  const std::size_t width = std::max({c_sym, c_ts, c_o, c_h, c_l, c_c, c_v}) + 1;

  std::string symbol;
  std::vector<MinuteBar> bars;
  std::size_t rows = 0, dropped = 0;
  while (std::getline(in, line)) {
    if (io::trim(line).empty()) continue;
    const auto cells = io::split(line, schema.delimiter);
    if (cells.size() >= width) {
      const std::string sym = io::trim(cells[c_sym]);
      if (schema.symbol_filter && sym != *schema.symbol_filter) continue;
      if (!schema.symbol_filter && !symbol.empty() && sym != symbol)
        throw ValidationError(path.string() + ": multiple symbols (" + symbol + ", " + sym +
                              "); select one with a symbol filter");
      if (symbol.empty()) symbol = sym;
    }
    ++rows;
    MinuteBar bar;
    try {
      if (cells.size() < width) throw ValidationError("short row");
      bar.timestamp = parse_timestamp(cells[c_ts]);
      bar.open = io::parse_double(cells[c_o]);
      bar.high = io::parse_double(cells[c_h]);
      bar.low = io::parse_double(cells[c_l]);
      bar.close = io::parse_double(cells[c_c]);
      bar.volume = io::parse_double(cells[c_v]);
    } catch (const ValidationError&) {
      ++dropped;
      continue;
    }
    if (!is_valid(bar)) {
      ++dropped;
      continue;
    }
    if (!bars.empty() && day_of(bar.timestamp) == day_of(bars.back().timestamp) &&
        bar.timestamp <= bars.back().timestamp)
      throw ValidationError(path.string() + ": non-monotonic timestamps within day at " +
                            format_timestamp(bar.timestamp));
    bars.push_back(bar);
  }
  if (rows == 0) throw ValidationError(path.string() + ": no data rows");
  if (static_cast<double>(dropped) > schema.max_drop_fraction * static_cast<double>(rows))
    throw ValidationError(path.string() + ": corrupt source (" + std::to_string(dropped) + " of " +
                          std::to_string(rows) + " rows dropped)");
  std::stable_sort(bars.begin(), bars.end(),
                   [](const MinuteBar& a, const MinuteBar& b) { return a.timestamp < b.timestamp; });
  return {StockSeries(symbol, std::move(bars)), rows, dropped};
}

void save_csv(const std::filesystem::path& path, const StockSeries& series) {
  std::ostringstream out;
  out << "symbol,timestamp,open,high,low,close,volume\n";
  for (const MinuteBar& b : series.bars()) {
    out << series.symbol() << ',' << format_timestamp(b.timestamp) << ',' << io::format_double(b.open)
        << ',' << io::format_double(b.high) << ',' << io::format_double(b.low) << ','
        << io::format_double(b.close) << ',' << io::format_double(b.volume) << '\n';
  }
  io::write_text_atomic(path, out.str());
}

void SynthParams::validate() const {
  if (!(start_price > 0)) throw ValidationError("start_price must be > 0");
  if (!(volatility >= 0)) throw ValidationError("volatility must be >= 0");
  if (n_days < 1) throw ValidationError("n_days must be >= 1");
  if (minutes_per_day < 1 || open_minute < 0 || open_minute + minutes_per_day > kMinutesPerDay)
    throw ValidationError("trading session must fit inside one calendar day");
  if (!(seasonality_period > 0)) throw ValidationError("seasonality_period must be > 0");
  if (!(seasonality_amplitude >= 0)) throw ValidationError("seasonality_amplitude must be >= 0");
}

StockSeries synthesize_series(const SynthParams& p, std::uint64_t seed) {
  p.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> phase_dist(0.0, 2.0 * std::numbers::pi);

  std::vector<MinuteBar> bars;
  bars.reserve(static_cast<std::size_t>(p.n_days) * static_cast<std::size_t>(p.minutes_per_day));
  double walk = 0.0;
  double prev_close = p.start_price;
  Day day = p.start_day;
  for (int produced = 0; produced < p.n_days; ++day) {
    const int wd = weekday(day);
    if (wd == 0 || wd == 6) continue;
    ++produced;
    const double phase = phase_dist(rng);
    for (int m = 0; m < p.minutes_per_day; ++m) {
      walk += p.drift + p.volatility * normal(rng);
      const double cycle =
          p.seasonality_amplitude * std::sin(2.0 * std::numbers::pi * m / p.seasonality_period + phase);
      MinuteBar b;
      b.timestamp = day * kMinutesPerDay + p.open_minute + m;
      b.open = prev_close;
      b.close = p.start_price * std::exp(walk + cycle);
      const double up = std::abs(normal(rng)) * p.volatility * 0.5;
      const double down = std::abs(normal(rng)) * p.volatility * 0.5;
      b.high = std::max(b.open, b.close) * std::exp(up);
      b.low = std::min(b.open, b.close) * std::exp(-down);
      b.volume = std::round(std::exp(p.volume_log_mean + p.volume_log_std * normal(rng)));
      prev_close = b.close;
      bars.push_back(b);
    }
  }
  return StockSeries(p.symbol, std::move(bars));
}

std::vector<WindowSample> make_windows(const StockSeries& series, int lookback, int horizon) {
  if (lookback < 1 || horizon < 1) throw ValidationError("lookback and horizon must be positive");
  std::vector<WindowSample> out;
  const auto span = static_cast<std::size_t>(lookback + horizon);
  for (std::size_t d = 0; d < series.calendar().size(); ++d) {
    const auto bars = series.day_bars(d);
    if (bars.size() < span) continue;
    for (std::size_t start = 0; start + span <= bars.size(); ++start) {
      const MinuteBar& first = bars[start];
      const MinuteBar& anchor = bars[start + static_cast<std::size_t>(lookback) - 1];
      const MinuteBar& future = bars[start + span - 1];
      // Strictly increasing timestamps: the span is gap-free iff its extent matches.
      if (future.timestamp - first.timestamp != static_cast<Minutes>(span) - 1) continue;
      WindowSample w;
      w.bars.assign(bars.begin() + static_cast<std::ptrdiff_t>(start),
                    bars.begin() + static_cast<std::ptrdiff_t>(start) + lookback);
      w.label = future.close > anchor.close ? 1 : 0;
      w.anchor_close = anchor.close;
      w.symbol = series.symbol();
      w.anchor_timestamp = anchor.timestamp;
      out.push_back(std::move(w));
    }
  }
  if (out.empty())
    std::clog << "warning: " << series.symbol() << ": no day holds " << span
              << " contiguous minutes; no windows produced\n";
  return out;
}

std::vector<WindowSample> balanced_sample(std::span<const WindowSample> samples,
                                          std::size_t n_per_class, std::uint64_t seed) {
  std::array<std::vector<std::size_t>, 2> by_class;
  for (std::size_t i = 0; i < samples.size(); ++i) by_class[samples[i].label == 1 ? 1 : 0].push_back(i);
  for (int c : {1, 0}) {
    if (by_class[c].size() < n_per_class)
      throw ValidationError("insufficient class " + std::to_string(c) + ": " +
                            std::to_string(by_class[c].size()) + " < " + std::to_string(n_per_class));
  }
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> chosen;
  for (auto& idx : by_class) {
    // Partial Fisher-Yates.
    for (std::size_t i = 0; i < n_per_class; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
      std::swap(idx[i], idx[pick(rng)]);
      chosen.push_back(idx[i]);
    }
  }
  std::sort(chosen.begin(), chosen.end());
  std::vector<WindowSample> out;
  out.reserve(chosen.size());
  for (std::size_t i : chosen) out.push_back(samples[i]);
  return out;
}

SplitProtocol::SplitProtocol(DayRange train, DayRange craft, std::array<DayRange, kTestSets> tests,
                             std::uint64_t seed, std::size_t craft_per_day,
                             std::size_t samples_per_class)
    : train_(train),
      craft_(craft),
      tests_(tests),
      seed_(seed),
      craft_per_day_(craft_per_day),
      samples_per_class_(samples_per_class) {
  std::vector<std::pair<std::string, DayRange>> ordered{{"train", train_}, {"craft", craft_}};
  for (std::size_t i = 0; i < kTestSets; ++i) ordered.emplace_back("T" + std::to_string(i + 1), tests_[i]);
  for (std::size_t i = 0; i < ordered.size(); ++i) {
    if (ordered[i].second.first > ordered[i].second.last)
      throw ValidationError("split range " + ordered[i].first + " is empty");
    if (i > 0 && ordered[i].second.first <= ordered[i - 1].second.last)
      throw ValidationError("split ranges " + ordered[i - 1].first + " and " + ordered[i].first +
                            " overlap or are out of order");
  }
  if (craft_per_day_ == 0 || craft_per_day_ % 2 != 0)
    throw ValidationError("craft samples per day must be even and positive");
  if (samples_per_class_ == 0) throw ValidationError("samples per class must be positive");
}

SplitProtocol SplitProtocol::reference(std::uint64_t seed) {
  std::array<DayRange, kTestSets> tests{};
  const Day t1 = make_day(2018, 1, 5);
  for (std::size_t i = 0; i < kTestSets; ++i) {
    const Day start = t1 + 7 * static_cast<Day>(i);
    tests[i] = {start, start + 6};
  }
  return SplitProtocol({make_day(2017, 9, 11), make_day(2018, 1, 1)},
                       {make_day(2018, 1, 2), make_day(2018, 1, 4)}, tests, seed);
}

SplitProtocol SplitProtocol::trailing(const StockSeries& series, int train_days, std::uint64_t seed,
                                      int craft_days, int days_per_test) {
  const auto& cal = series.calendar();
  const std::size_t need =
      static_cast<std::size_t>(train_days + craft_days + days_per_test * static_cast<int>(kTestSets));
  if (train_days < 1 || craft_days < 1 || days_per_test < 1)
    throw ValidationError("split day counts must be positive");
  if (cal.size() < need)
    throw ValidationError("series has " + std::to_string(cal.size()) + " trading days; split needs " +
                          std::to_string(need));
  auto range = [&](std::size_t first, std::size_t count) {
    return DayRange{cal[first].day, cal[first + count - 1].day};
  };
  const auto tr = static_cast<std::size_t>(train_days);
  const auto cr = static_cast<std::size_t>(craft_days);
  const auto te = static_cast<std::size_t>(days_per_test);
  std::array<DayRange, kTestSets> tests{};
  for (std::size_t i = 0; i < kTestSets; ++i) tests[i] = range(tr + cr + i * te, te);
  return SplitProtocol(range(0, tr), range(tr, cr), tests, seed);
}

Split build_split(const StockSeries& series, const SplitProtocol& protocol, int lookback, int horizon) {
  // Coverage: every range needs at least one trading day.
  std::vector<std::pair<std::string, DayRange>> ranges{{"train", protocol.train()},
                                                       {"craft", protocol.craft()}};
  for (std::size_t i = 0; i < kTestSets; ++i)
    ranges.emplace_back("T" + std::to_string(i + 1), protocol.tests()[i]);
  std::string missing;
  for (const auto& [name, r] : ranges) {
    const bool covered = std::any_of(series.calendar().begin(), series.calendar().end(),
                                     [&](const TradingDay& td) { return r.contains(td.day); });
    if (covered) continue;
    missing += "\n  " + name + ":";
    for (Day d = r.first; d <= r.last; ++d)
      if (weekday(d) != 0 && weekday(d) != 6) missing += " " + format_day(d);
  }
  if (!missing.empty()) throw ValidationError("series does not cover split ranges; missing days:" + missing);

  const auto windows = make_windows(series, lookback, horizon);
  Split split;
  std::map<Day, std::vector<WindowSample>> craft_by_day;
  for (const WindowSample& w : windows) {
    const Day d = day_of(w.anchor_timestamp);
    if (protocol.train().contains(d)) {
      split.train.push_back(w);
    } else if (protocol.craft().contains(d)) {
      craft_by_day[d].push_back(w);
      split.craft_pool.push_back(w);
    } else {
      for (std::size_t i = 0; i < kTestSets; ++i)
        if (protocol.tests()[i].contains(d)) split.test_pools[i].push_back(w);
    }
  }
  const std::size_t per_class_per_day = protocol.craft_per_day() / 2;
  for (const auto& [day, pool] : craft_by_day) {
    try {
      auto picked = balanced_sample(pool, per_class_per_day,
                                    io::derive_seed(protocol.seed(), static_cast<std::uint64_t>(day)));
      split.craft.insert(split.craft.end(), picked.begin(), picked.end());
    } catch (const ValidationError& e) {
      throw ValidationError("craft day " + format_day(day) + ": " + e.what());
    }
  }
  for (std::size_t i = 0; i < kTestSets; ++i) {
    try {
      split.tests[i] = balanced_sample(split.test_pools[i], protocol.samples_per_class(),
                                       io::derive_seed(protocol.seed(), 1000 + i));
    } catch (const ValidationError& e) {
      throw ValidationError("test set T" + std::to_string(i + 1) + ": " + e.what());
    }
  }
  return split;
}

}  // namespace tuap
