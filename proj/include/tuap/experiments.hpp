#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "tuap/alpha_models.hpp"
#include "tuap/attack.hpp"
#include "tuap/market_data.hpp"

namespace tuap {

enum class Condition { clean, tuap, random };
std::string to_string(Condition c);
Condition parse_condition(const std::string& text);

/// One stock of a plan. Synthetic unless `csv` is set.
struct StockSource {
  std::string symbol;
  std::string category;  // "high", "medium", "low" or empty
  double start_price = 100.0;
  std::filesystem::path csv;
};

/// "SYMBOL[:category[:price-or-csv-path]]"
StockSource parse_stock(const std::string& text);

struct ExperimentPlan {
  std::vector<StockSource> stocks;
  std::vector<ArchKind> models{kAllArchs.begin(), kAllArchs.end()};
  AttackConfig attack;  // epsilon 0 means calibrate to target_size_pct
  double target_size_pct = 0.02;
  double size_tolerance = 0.1;
  int target_class = 1;
  SynthParams synth;  // template for synthetic stocks; days come from the split below
  int train_days = 12;
  int craft_days = 3;
  int days_per_test = 5;
  bool reference_calendar = false;  // calendar ranges of the original study instead of trailing days
  TrainConfig training;
  std::uint64_t seed = 2024;
  int random_draws = 3;
  int jobs = 1;
  std::filesystem::path cell_dir;  // finished cells are cached here when set

  void validate() const;
  /// Canonical text of every field that affects results (not jobs or cell_dir).
  std::string describe() const;
  std::uint64_t fingerprint() const;

  /// One synthetic stock per price tier (1100, 500, 150).
  static ExperimentPlan desk_default();
};

struct CellSeeds {
  std::uint64_t stock = 0;  // series and split
  std::uint64_t model = 0;
  std::uint64_t attack = 0;
};
CellSeeds cell_seeds(const ExperimentPlan& plan, const std::string& symbol, ArchKind arch);
std::uint64_t random_draw_seed(std::uint64_t attack_seed, int draw);

/// Series, split and shared normalizer of one stock.
struct StockRun {
  StockSource source;
  StockSeries series;
  Split split;
  Normalizer normalizer;
};

StockRun prepare_stock(const ExperimentPlan& plan, const StockSource& stock);
TrainedModel train_for(const ExperimentPlan& plan, const StockRun& run, ArchKind arch);
/// Calibrated (or fixed-epsilon) crafting on the run's craft set.
CalibratedAttack craft_for(const ExperimentPlan& plan, const StockRun& run, const TrainedModel& model);

struct ResultRow {
  std::string stock;
  std::string category;
  std::string source;  // arch that crafted the perturbation; empty for clean rows of a transfer run
  std::string model;   // arch evaluated
  std::string test_set;
  Condition condition = Condition::clean;
  double tfr = 0.0;
  double ufr = 0.0;
  double da = 0.0;
  double size_pct = 0.0;
  double size_abs = 0.0;  // mean |close' - close| in price units
  double price = 0.0;     // mean anchor close of the test set
  double epsilon = 0.0;
  std::string status = "ok";  // "no_result" when crafting failed
  std::uint64_t model_seed = 0;
  std::uint64_t attack_seed = 0;
  std::vector<std::uint64_t> draw_seeds;  // random condition only
  std::vector<double> draw_tfr;
  std::vector<double> draw_ufr;

  bool operator==(const ResultRow&) const = default;
};

struct ResultTable {
  std::string kind;  // whitebox, categories or transfer
  std::uint64_t plan_fingerprint = 0;
  std::vector<ResultRow> rows;

  bool operator==(const ResultTable&) const = default;
};

ResultTable run_whitebox(const ExperimentPlan& plan);
/// White-box grid over stocks tagged high, medium and low (at least one each).
ResultTable run_categories(const ExperimentPlan& plan);
/// Every source arch's TUAP evaluated on every arch, with clean reference rows.
ResultTable run_transfer(const ExperimentPlan& plan);

struct CategoryRow {
  std::string category;
  std::size_t stocks = 0;
  double avg_price = 0.0;
  double avg_size_abs = 0.0;
  double size_pct = 0.0;
  double clean_da = 0.0;
  double tuap_tfr = 0.0;
  double tuap_ufr = 0.0;
  double random_ufr = 0.0;
};
/// Averages over stocks, models and test sets, in high, medium, low order.
std::vector<CategoryRow> summarize_categories(const ResultTable& table);

/// Source x target TFR averaged over test sets.
struct TransferMatrix {
  std::string stock;
  std::vector<std::string> archs;
  std::vector<std::vector<double>> tfr;  // [source][target]
  std::vector<double> clean_tfr;         // per target
  std::vector<double> size_pct;          // per source
  std::vector<bool> crafted;             // false where the source craft gave NoResult
};
TransferMatrix transfer_matrix(const ResultTable& table, const std::string& stock);

/// Mean of `metric` over rows matching the filter; empty strings match anything.
double mean_metric(const ResultTable& table, const std::string& stock, const std::string& source,
                   const std::string& model, const std::string& test_set, Condition condition,
                   double ResultRow::*metric);

std::string results_csv(const ResultTable& table);
ResultTable parse_results_csv(const std::string& text);
ResultTable read_results_csv(const std::filesystem::path& path);

/// results.csv, results.json, summary.txt and plot.csv (long format), plus
/// categories.csv or transfer.csv when the table holds those studies.
/// `plan` adds its resolved description to the JSON.
std::vector<std::filesystem::path> emit_report(const ResultTable& table, const std::filesystem::path& dir,
                                               const ExperimentPlan* plan = nullptr);
std::string summary_text(const ResultTable& table);

}  // namespace tuap
