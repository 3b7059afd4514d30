#include "tuap/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <iomanip>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "tuap/error.hpp"
#include "tuap/io.hpp"

namespace tuap {

namespace {

using nlohmann::json;

const char* const kCategories[] = {"high", "medium", "low"};

std::uint64_t hash_text(std::string_view s) {
  return io::fnv1a64(reinterpret_cast<const std::uint8_t*>(s.data()), s.size());
}

std::string hex(std::uint64_t v) {
  std::ostringstream o;
  o << std::hex << std::setw(16) << std::setfill('0') << v;
  return o.str();
}

std::uint64_t parse_hex(const std::string& s) {
  try {
    std::size_t used = 0;
    const auto v = std::stoull(s, &used, 16);
    if (used != s.size()) throw ValidationError("bad hex value '" + s + "'");
    return v;
  } catch (const std::logic_error&) {
    throw ValidationError("bad hex value '" + s + "'");
  }
}

std::string test_set_name(std::size_t i) { return "T" + std::to_string(i + 1); }

bool valid_symbol(const std::string& s) {
  if (s.empty()) return false;
  return std::all_of(s.begin(), s.end(), [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.';
  });
}

// --- evaluation -------------------------------------------------------------

struct SetEval {
  double tfr = 0.0;
  double ufr = 0.0;
  double da = 0.0;
};

SetEval evaluate_set(const TrainedModel& model, std::span<const WindowSample> samples, std::span<const int> clean,
                     const Offsets& offsets, int target) {
  const auto pred = predict_labels(model, apply_perturbation(samples, offsets));
  std::size_t hits = 0, flips = 0, correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    hits += pred[i] == target;
    flips += pred[i] != clean[i];
    correct += pred[i] == samples[i].label;
  }
  const double n = static_cast<double>(pred.size());
  return {100.0 * static_cast<double>(hits) / n, 100.0 * static_cast<double>(flips) / n,
          100.0 * static_cast<double>(correct) / n};
}

double absolute_size(const Offsets& offsets, std::span<const WindowSample> samples) {
  double total = 0.0;
  for (const auto& w : samples)
    for (int j = 0; j < kWindowLength; ++j) total += std::abs(w.bars[static_cast<std::size_t>(j)].close * offsets(j));
  return total / static_cast<double>(samples.size() * static_cast<std::size_t>(kWindowLength));
}

double mean_price(std::span<const WindowSample> samples) {
  double total = 0.0;
  for (const auto& w : samples) total += w.anchor_close;
  return total / static_cast<double>(samples.size());
}

const Offsets& offsets_of(const CalibratedAttack& a) {
  return std::holds_alternative<Tuap>(a.result) ? std::get<Tuap>(a.result).offsets
                                                 : std::get<NoResult>(a.result).last;
}

// --- per-stock state, built lazily so cached cells cost nothing ---------------

class StockContext {
 public:
  StockContext(const ExperimentPlan& plan, StockSource source) : plan_(plan), source_(std::move(source)) {}

  const StockSource& source() const { return source_; }

  const StockRun& run() {
    if (!run_) run_ = prepare_stock(plan_, source_);
    return *run_;
  }

  const TrainedModel& model(ArchKind arch) {
    auto it = models_.find(arch);
    if (it == models_.end()) it = models_.emplace(arch, train_for(plan_, run(), arch)).first;
    return it->second;
  }

  const CalibratedAttack& attack(ArchKind arch) {
    auto it = attacks_.find(arch);
    if (it == attacks_.end()) it = attacks_.emplace(arch, craft_for(plan_, run(), model(arch))).first;
    return it->second;
  }

  const std::vector<int>& clean_predictions(ArchKind arch, std::size_t set) {
    const auto key = std::make_pair(arch, set);
    auto it = clean_.find(key);
    if (it == clean_.end()) it = clean_.emplace(key, predict_labels(model(arch), run().split.tests[set])).first;
    return it->second;
  }

 private:
  const ExperimentPlan& plan_;
  StockSource source_;
  std::optional<StockRun> run_;
  std::map<ArchKind, TrainedModel> models_;
  std::map<ArchKind, CalibratedAttack> attacks_;
  std::map<std::pair<ArchKind, std::size_t>, std::vector<int>> clean_;
};

ResultRow base_row(const StockSource& s, const std::string& source, ArchKind model, std::size_t set) {
  ResultRow r;
  r.stock = s.symbol;
  r.category = s.category;
  r.source = source;
  r.model = to_string(model);
  r.test_set = test_set_name(set);
  return r;
}

ResultRow clean_row(const ExperimentPlan& plan, StockContext& ctx, const std::string& source, ArchKind arch,
                    std::size_t set) {
  const auto& samples = ctx.run().split.tests[set];
  const auto& clean = ctx.clean_predictions(arch, set);
  const SetEval e = evaluate_set(ctx.model(arch), samples, clean, Offsets::Zero(), plan.target_class);
  ResultRow r = base_row(ctx.source(), source, arch, set);
  r.condition = Condition::clean;
  r.tfr = e.tfr;
  r.ufr = e.ufr;
  r.da = e.da;
  r.price = mean_price(samples);
  r.model_seed = cell_seeds(plan, ctx.source().symbol, arch).model;
  return r;
}

ResultRow tuap_row(const ExperimentPlan& plan, StockContext& ctx, ArchKind source, ArchKind target, std::size_t set) {
  const CalibratedAttack& a = ctx.attack(source);
  const Offsets& v = offsets_of(a);
  const auto& samples = ctx.run().split.tests[set];
  const SetEval e = evaluate_set(ctx.model(target), samples, ctx.clean_predictions(target, set), v, plan.target_class);
  ResultRow r = base_row(ctx.source(), to_string(source), target, set);
  r.condition = Condition::tuap;
  r.tfr = e.tfr;
  r.ufr = e.ufr;
  r.da = e.da;
  r.size_pct = perturbation_size(v);
  r.size_abs = absolute_size(v, samples);
  r.price = mean_price(samples);
  r.epsilon = a.epsilon;
  r.status = std::holds_alternative<Tuap>(a.result) ? "ok" : "no_result";
  r.model_seed = cell_seeds(plan, ctx.source().symbol, target).model;
  r.attack_seed = cell_seeds(plan, ctx.source().symbol, source).attack;
  return r;
}

ResultRow random_row(const ExperimentPlan& plan, StockContext& ctx, ArchKind arch, std::size_t set) {
  const CalibratedAttack& a = ctx.attack(arch);
  const double norm = offsets_of(a).norm();
  const auto& samples = ctx.run().split.tests[set];
  const auto& clean = ctx.clean_predictions(arch, set);
  ResultRow r = base_row(ctx.source(), to_string(arch), arch, set);
  r.condition = Condition::random;
  r.status = std::holds_alternative<Tuap>(a.result) ? "ok" : "no_result";
  r.model_seed = cell_seeds(plan, ctx.source().symbol, arch).model;
  r.attack_seed = cell_seeds(plan, ctx.source().symbol, arch).attack;
  r.price = mean_price(samples);
  r.epsilon = a.epsilon;
  for (int d = 0; d < plan.random_draws; ++d) {
    const std::uint64_t seed = random_draw_seed(r.attack_seed, d);
    const Offsets v = norm > 0.0 ? random_offsets(norm, seed) : Offsets::Zero();
    if (std::abs(v.norm() - norm) > 1e-12 * std::max(norm, 1e-300))
      throw std::logic_error("random baseline is not size-matched");
    const SetEval e = evaluate_set(ctx.model(arch), samples, clean, v, plan.target_class);
    r.draw_seeds.push_back(seed);
    r.draw_tfr.push_back(e.tfr);
    r.draw_ufr.push_back(e.ufr);
    const double n = static_cast<double>(plan.random_draws);
    r.tfr += e.tfr / n;
    r.ufr += e.ufr / n;
    r.da += e.da / n;
    r.size_pct += perturbation_size(v) / n;
    r.size_abs += absolute_size(v, samples) / n;
  }
  return r;
}

// --- cell grid ----------------------------------------------------------------

using CellFn = std::function<std::vector<ResultRow>(StockContext&, const std::string&)>;

std::optional<std::vector<ResultRow>> load_cell(const std::filesystem::path& path, const std::string& kind,
                                                std::uint64_t fingerprint) {
  if (!std::filesystem::exists(path)) return std::nullopt;
  try {
    ResultTable t = read_results_csv(path);
    if (t.kind != kind || t.plan_fingerprint != fingerprint) return std::nullopt;
    return std::move(t.rows);
  } catch (const std::exception&) {
    return std::nullopt;  // unreadable cell: recompute and overwrite
  }
}

ResultTable run_grid(const ExperimentPlan& plan, const std::string& kind, const std::vector<std::string>& cells,
                     const CellFn& fn) {
  plan.validate();
  const std::uint64_t fp = plan.fingerprint();
  const std::size_t n_stocks = plan.stocks.size();
  std::vector<std::vector<std::vector<ResultRow>>> out(n_stocks, std::vector<std::vector<ResultRow>>(cells.size()));
  std::vector<std::exception_ptr> errors(n_stocks);
  if (!plan.cell_dir.empty()) std::filesystem::create_directories(plan.cell_dir);

  const auto do_stock = [&](std::size_t s) {
    try {
      StockContext ctx(plan, plan.stocks[s]);
      for (std::size_t c = 0; c < cells.size(); ++c) {
        std::filesystem::path path;
        if (!plan.cell_dir.empty()) {
          path = plan.cell_dir / (kind + "__" + plan.stocks[s].symbol + "__" + cells[c] + ".csv");
          if (auto cached = load_cell(path, kind, fp)) {
            out[s][c] = std::move(*cached);
            continue;
          }
        }
        out[s][c] = fn(ctx, cells[c]);
        if (!path.empty()) io::write_text_atomic(path, results_csv(ResultTable{kind, fp, out[s][c]}));
      }
    } catch (...) {
      errors[s] = std::current_exception();
    }
  };

  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(plan.jobs), n_stocks);
  if (workers <= 1) {
    for (std::size_t s = 0; s < n_stocks; ++s) do_stock(s);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t s = next++; s < n_stocks; s = next++) do_stock(s);
      });
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  ResultTable table;
  table.kind = kind;
  table.plan_fingerprint = fp;
  for (auto& stock : out)
    for (auto& cell : stock)
      for (auto& row : cell) table.rows.push_back(std::move(row));
  return table;
}

ResultTable whitebox_grid(const ExperimentPlan& plan, const std::string& kind) {
  std::vector<std::string> cells;
  for (ArchKind a : plan.models) cells.push_back(to_string(a));
  return run_grid(plan, kind, cells, [&](StockContext& ctx, const std::string& cell) {
    const ArchKind arch = parse_arch(cell);
    std::vector<ResultRow> rows;
    for (std::size_t t = 0; t < kTestSets; ++t) {
      rows.push_back(clean_row(plan, ctx, cell, arch, t));
      rows.push_back(tuap_row(plan, ctx, arch, arch, t));
      rows.push_back(random_row(plan, ctx, arch, t));
    }
    return rows;
  });
}

// --- CSV ------------------------------------------------------------------------

const char* const kCsvHeader =
    "stock,category,source,model,test_set,condition,tfr,ufr,da,size_pct,size_abs,price,epsilon,status,"
    "model_seed,attack_seed,draw_seeds,draw_tfr,draw_ufr";

template <typename T, typename F>
std::string join(const std::vector<T>& v, F fmt) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ';';
    s += fmt(v[i]);
  }
  return s;
}

std::vector<std::string> split_list(const std::string& s) {
  if (s.empty()) return {};
  return io::split(s, ';');
}

std::uint64_t parse_u64(const std::string& s) {
  try {
    std::size_t used = 0;
    const auto v = std::stoull(s, &used);
    if (used != s.size()) throw ValidationError("bad integer '" + s + "'");
    return v;
  } catch (const std::logic_error&) {
    throw ValidationError("bad integer '" + s + "'");
  }
}

std::string fixed(double v, int digits = 2) {
  if (std::isnan(v)) return "n/a";
  std::ostringstream o;
  o << std::fixed << std::setprecision(digits) << v;
  return o.str();
}

std::vector<std::string> unique_in_order(const ResultTable& t, std::string ResultRow::*field) {
  std::vector<std::string> out;
  for (const auto& r : t.rows)
    if (!(r.*field).empty() && std::find(out.begin(), out.end(), r.*field) == out.end()) out.push_back(r.*field);
  return out;
}

json row_json(const ResultRow& r, std::uint64_t fp) {
  json draws = json::array();
  for (std::size_t i = 0; i < r.draw_seeds.size(); ++i)
    draws.push_back({{"seed", r.draw_seeds[i]}, {"tfr", r.draw_tfr[i]}, {"ufr", r.draw_ufr[i]}});
  return {{"stock", r.stock},
          {"category", r.category},
          {"source", r.source},
          {"model", r.model},
          {"test_set", r.test_set},
          {"condition", to_string(r.condition)},
          {"tfr", r.tfr},
          {"ufr", r.ufr},
          {"da", r.da},
          {"size_pct", r.size_pct},
          {"size_abs", r.size_abs},
          {"price", r.price},
          {"epsilon", r.epsilon},
          {"status", r.status},
          {"seeds", {{"model", r.model_seed}, {"attack", r.attack_seed}}},
          {"random_draws", draws},
          {"config_fingerprint", hex(fp)}};
}

std::string plot_csv(const ResultTable& t) {
  std::ostringstream o;
  o << "study,stock,source,model,condition,test_index,metric,value\n";
  for (const auto& r : t.rows) {
    const std::string idx = r.test_set.substr(1);
    for (const auto& [name, value] : {std::pair{"tfr", r.tfr}, {"ufr", r.ufr}, {"da", r.da}})
      o << t.kind << ',' << r.stock << ',' << r.source << ',' << r.model << ',' << to_string(r.condition) << ','
        << idx << ',' << name << ',' << io::format_double(value) << '\n';
  }
  return o.str();
}

std::string categories_csv(const std::vector<CategoryRow>& rows) {
  std::ostringstream o;
  o << "category,stocks,avg_price,avg_size_abs,size_pct,clean_da,tuap_tfr,tuap_ufr,random_ufr\n";
  for (const auto& c : rows)
    o << c.category << ',' << c.stocks << ',' << io::format_double(c.avg_price) << ','
      << io::format_double(c.avg_size_abs) << ',' << io::format_double(c.size_pct) << ','
      << io::format_double(c.clean_da) << ',' << io::format_double(c.tuap_tfr) << ','
      << io::format_double(c.tuap_ufr) << ',' << io::format_double(c.random_ufr) << '\n';
  return o.str();
}

std::string transfer_csv(const std::vector<TransferMatrix>& ms) {
  std::ostringstream o;
  o << "stock,source,target,tfr,clean_tfr,source_size_pct,source_crafted\n";
  for (const auto& m : ms)
    for (std::size_t s = 0; s < m.archs.size(); ++s)
      for (std::size_t t = 0; t < m.archs.size(); ++t)
        o << m.stock << ',' << m.archs[s] << ',' << m.archs[t] << ',' << io::format_double(m.tfr[s][t]) << ','
          << io::format_double(m.clean_tfr[t]) << ',' << io::format_double(m.size_pct[s]) << ','
          << (m.crafted[s] ? 1 : 0) << '\n';
  return o.str();
}

}  // namespace

std::string to_string(Condition c) {
  switch (c) {
    case Condition::clean:
      return "clean";
    case Condition::tuap:
      return "tuap";
    case Condition::random:
      return "random";
  }
  return "?";
}

Condition parse_condition(const std::string& text) {
  if (text == "clean") return Condition::clean;
  if (text == "tuap") return Condition::tuap;
  if (text == "random") return Condition::random;
  throw ValidationError("unknown condition '" + text + "'");
}

StockSource parse_stock(const std::string& text) {
  const auto parts = io::split(text, ':');
  if (parts.empty() || parts.size() > 3) throw ValidationError("bad stock spec '" + text + "'");
  StockSource s;
  s.symbol = io::trim(parts[0]);
  if (parts.size() > 1) s.category = io::trim(parts[1]);
  if (parts.size() > 2) {
    const std::string third = io::trim(parts[2]);
    try {
      s.start_price = io::parse_double(third);
    } catch (const ValidationError&) {
      s.csv = third;
    }
  }
  return s;
}

void ExperimentPlan::validate() const {
  if (stocks.empty()) throw ValidationError("plan names no stocks");
  std::set<std::string> seen;
  for (const auto& s : stocks) {
    if (!valid_symbol(s.symbol)) throw ValidationError("bad stock symbol '" + s.symbol + "'");
    if (!seen.insert(s.symbol).second) throw ValidationError("duplicate stock '" + s.symbol + "'");
    if (!s.category.empty() && s.category != "high" && s.category != "medium" && s.category != "low")
      throw ValidationError("unknown price category '" + s.category + "'");
    if (s.csv.empty() && !(s.start_price > 0.0)) throw ValidationError("start price must be positive");
  }
  if (models.empty()) throw ValidationError("plan names no models");
  if (std::set<ArchKind>(models.begin(), models.end()).size() != models.size())
    throw ValidationError("duplicate model in plan");
  if (target_class != 0 && target_class != 1) throw ValidationError("target class must be 0 or 1");
  if (!(target_size_pct > 0.0)) throw ValidationError("target size must be positive");
  if (!(size_tolerance > 0.0 && size_tolerance < 1.0)) throw ValidationError("size tolerance must lie in (0, 1)");
  if (train_days < 1 || craft_days < 1 || days_per_test < 1) throw ValidationError("split day counts must be positive");
  if (random_draws < 1) throw ValidationError("at least one random draw is required");
  if (jobs < 1) throw ValidationError("jobs must be at least 1");
  if (attack.epsilon < 0.0) throw ValidationError("epsilon must not be negative");
  AttackConfig probe = attack;
  probe.epsilon = 1.0;
  probe.validate();
  if (training.epochs < 1 || training.batch_size < 1) throw ValidationError("training needs epochs and a batch size");
  synth.validate();
}

std::string ExperimentPlan::describe() const {
  std::ostringstream o;
  const auto d = [](double v) { return io::format_double(v); };
  o << "seed = " << seed << '\n';
  for (const auto& s : stocks)
    o << "stock = " << s.symbol << ':' << s.category << ':' << (s.csv.empty() ? d(s.start_price) : s.csv.string())
      << '\n';
  o << "models =";
  for (ArchKind a : models) o << ' ' << to_string(a);
  o << '\n';
  o << "target_class = " << target_class << '\n'
    << "target_size_pct = " << d(target_size_pct) << '\n'
    << "size_tolerance = " << d(size_tolerance) << '\n'
    << "epsilon = " << d(attack.epsilon) << '\n'
    << "delta = " << d(attack.delta) << '\n'
    << "max_outer_iterations = " << attack.max_outer_iterations << '\n'
    << "batch_size = " << attack.batch_size << '\n'
    << "step_fraction = " << d(attack.step_fraction) << '\n'
    << "inner_iterations = " << attack.inner_iterations << '\n'
    << "train_days = " << train_days << '\n'
    << "craft_days = " << craft_days << '\n'
    << "days_per_test = " << days_per_test << '\n'
    << "reference_calendar = " << (reference_calendar ? 1 : 0) << '\n'
    << "epochs = " << training.epochs << '\n'
    << "train_batch_size = " << training.batch_size << '\n'
    << "learning_rate = " << d(training.learning_rate) << '\n'
    << "patience = " << training.patience << '\n'
    << "min_improvement = " << d(training.min_improvement) << '\n'
    << "validation_fraction = " << d(training.validation_fraction) << '\n'
    << "random_draws = " << random_draws << '\n'
    << "synth_minutes_per_day = " << synth.minutes_per_day << '\n'
    << "synth_open_minute = " << synth.open_minute << '\n'
    << "synth_start_day = " << format_day(synth.start_day) << '\n'
    << "synth_drift = " << d(synth.drift) << '\n'
    << "synth_volatility = " << d(synth.volatility) << '\n'
    << "synth_seasonality_amplitude = " << d(synth.seasonality_amplitude) << '\n'
    << "synth_seasonality_period = " << d(synth.seasonality_period) << '\n'
    << "synth_volume_log_mean = " << d(synth.volume_log_mean) << '\n'
    << "synth_volume_log_std = " << d(synth.volume_log_std) << '\n';
  return o.str();
}

std::uint64_t ExperimentPlan::fingerprint() const { return hash_text(describe()); }

ExperimentPlan ExperimentPlan::desk_default() {
  ExperimentPlan p;
  p.stocks = {{"HIGH", "high", 1100.0, {}}, {"MID", "medium", 500.0, {}}, {"LOW", "low", 150.0, {}}};
  return p;
}

CellSeeds cell_seeds(const ExperimentPlan& plan, const std::string& symbol, ArchKind arch) {
  CellSeeds s;
  s.stock = io::derive_seed(plan.seed, hash_text(symbol));
  s.model = io::derive_seed(s.stock, 0x100 + static_cast<std::uint64_t>(arch));
  s.attack = io::derive_seed(s.stock, 0x200 + static_cast<std::uint64_t>(arch));
  return s;
}

std::uint64_t random_draw_seed(std::uint64_t attack_seed, int draw) {
  return io::derive_seed(attack_seed, 0x300 + static_cast<std::uint64_t>(draw));
}

StockRun prepare_stock(const ExperimentPlan& plan, const StockSource& stock) {
  const std::uint64_t seed = cell_seeds(plan, stock.symbol, ArchKind::dnn).stock;
  StockRun run;
  run.source = stock;
  if (!stock.csv.empty()) {
    CsvSchema schema;
    schema.symbol_filter = stock.symbol;
    run.series = load_csv(stock.csv, schema).series;
  } else {
    SynthParams p = plan.synth;
    p.symbol = stock.symbol;
    p.start_price = stock.start_price;
    p.n_days = plan.train_days + plan.craft_days + static_cast<int>(kTestSets) * plan.days_per_test;
    run.series = synthesize_series(p, seed);
  }
  const std::uint64_t split_seed = io::derive_seed(seed, 1);
  const SplitProtocol protocol =
      plan.reference_calendar ? SplitProtocol::reference(split_seed)
                          : SplitProtocol::trailing(run.series, plan.train_days, split_seed, plan.craft_days,
                                                    plan.days_per_test);
  run.split = build_split(run.series, protocol);
  run.normalizer = Normalizer::fit(extract_all(run.split.train));
  return run;
}

TrainedModel train_for(const ExperimentPlan& plan, const StockRun& run, ArchKind arch) {
  const CellSeeds seeds = cell_seeds(plan, run.source.symbol, arch);
  TrainConfig config = plan.training;
  config.seed = seeds.model;
  return train(build(AlphaArch::make(arch), seeds.model), run.split.train, config, run.normalizer).model;
}

CalibratedAttack craft_for(const ExperimentPlan& plan, const StockRun& run, const TrainedModel& model) {
  AttackConfig config = plan.attack;
  config.seed = cell_seeds(plan, run.source.symbol, model.arch.kind).attack;
  if (config.epsilon > 0.0) {
    CalibratedAttack out;
    out.result = craft_tuap(run.split.craft, plan.target_class, model, config);
    out.epsilon = config.epsilon;
    out.size_pct = perturbation_size(offsets_of(out));
    out.rounds = 1;
    out.converged = std::abs(out.size_pct - plan.target_size_pct) <= plan.size_tolerance * plan.target_size_pct;
    return out;
  }
  return calibrate_and_craft(run.split.craft, plan.target_class, model, config, plan.target_size_pct,
                             plan.size_tolerance);
}

ResultTable run_whitebox(const ExperimentPlan& plan) { return whitebox_grid(plan, "whitebox"); }

ResultTable run_categories(const ExperimentPlan& plan) {
  for (const char* c : kCategories)
    if (std::none_of(plan.stocks.begin(), plan.stocks.end(), [&](const StockSource& s) { return s.category == c; }))
      throw ValidationError(std::string("no stock in price category '") + c + "'");
  return whitebox_grid(plan, "categories");
}

ResultTable run_transfer(const ExperimentPlan& plan) {
  if (plan.models.size() < 2) throw ValidationError("transferability needs at least two models");
  std::vector<std::string> cells{"clean"};
  for (ArchKind a : plan.models) cells.push_back(to_string(a));
  return run_grid(plan, "transfer", cells, [&](StockContext& ctx, const std::string& cell) {
    std::vector<ResultRow> rows;
    for (ArchKind target : plan.models)
      for (std::size_t t = 0; t < kTestSets; ++t) {
        if (cell == "clean")
          rows.push_back(clean_row(plan, ctx, "", target, t));
        else
          rows.push_back(tuap_row(plan, ctx, parse_arch(cell), target, t));
      }
    return rows;
  });
}

double mean_metric(const ResultTable& table, const std::string& stock, const std::string& source,
                   const std::string& model, const std::string& test_set, Condition condition,
                   double ResultRow::*metric) {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& r : table.rows) {
    if (r.condition != condition) continue;
    if (!stock.empty() && r.stock != stock) continue;
    if (!source.empty() && r.source != source) continue;
    if (!model.empty() && r.model != model) continue;
    if (!test_set.empty() && r.test_set != test_set) continue;
    total += r.*metric;
    ++n;
  }
  return n ? total / static_cast<double>(n) : std::nan("");
}

std::vector<CategoryRow> summarize_categories(const ResultTable& table) {
  std::vector<CategoryRow> out;
  for (const char* cat : kCategories) {
    ResultTable sub;
    std::set<std::string> stocks;
    for (const auto& r : table.rows)
      if (r.category == cat) {
        sub.rows.push_back(r);
        stocks.insert(r.stock);
      }
    if (sub.rows.empty()) continue;
    CategoryRow c;
    c.category = cat;
    c.stocks = stocks.size();
    c.avg_price = mean_metric(sub, "", "", "", "", Condition::clean, &ResultRow::price);
    c.avg_size_abs = mean_metric(sub, "", "", "", "", Condition::tuap, &ResultRow::size_abs);
    c.size_pct = mean_metric(sub, "", "", "", "", Condition::tuap, &ResultRow::size_pct);
    c.clean_da = mean_metric(sub, "", "", "", "", Condition::clean, &ResultRow::da);
    c.tuap_tfr = mean_metric(sub, "", "", "", "", Condition::tuap, &ResultRow::tfr);
    c.tuap_ufr = mean_metric(sub, "", "", "", "", Condition::tuap, &ResultRow::ufr);
    c.random_ufr = mean_metric(sub, "", "", "", "", Condition::random, &ResultRow::ufr);
    out.push_back(c);
  }
  return out;
}

TransferMatrix transfer_matrix(const ResultTable& table, const std::string& stock) {
  TransferMatrix m;
  m.stock = stock;
  for (const auto& r : table.rows)
    if (r.stock == stock && std::find(m.archs.begin(), m.archs.end(), r.model) == m.archs.end())
      m.archs.push_back(r.model);
  if (m.archs.empty()) throw ValidationError("no transfer rows for stock '" + stock + "'");
  const std::size_t n = m.archs.size();
  m.tfr.assign(n, std::vector<double>(n, std::nan("")));
  m.clean_tfr.assign(n, std::nan(""));
  m.size_pct.assign(n, std::nan(""));
  m.crafted.assign(n, false);
  for (std::size_t t = 0; t < n; ++t)
    m.clean_tfr[t] = mean_metric(table, stock, "", m.archs[t], "", Condition::clean, &ResultRow::tfr);
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t t = 0; t < n; ++t)
      m.tfr[s][t] = mean_metric(table, stock, m.archs[s], m.archs[t], "", Condition::tuap, &ResultRow::tfr);
    m.size_pct[s] = mean_metric(table, stock, m.archs[s], m.archs[s], "", Condition::tuap, &ResultRow::size_pct);
    m.crafted[s] = std::any_of(table.rows.begin(), table.rows.end(), [&](const ResultRow& r) {
      return r.stock == stock && r.source == m.archs[s] && r.condition == Condition::tuap && r.status == "ok";
    });
  }
  return m;
}

std::string results_csv(const ResultTable& table) {
  std::ostringstream o;
  o << "# tuap-results kind=" << table.kind << " plan=" << hex(table.plan_fingerprint) << '\n';
  o << kCsvHeader << '\n';
  const auto d = [](double v) { return io::format_double(v); };
  const auto u = [](std::uint64_t v) { return std::to_string(v); };
  for (const auto& r : table.rows) {
    o << r.stock << ',' << r.category << ',' << r.source << ',' << r.model << ',' << r.test_set << ','
      << to_string(r.condition) << ',' << d(r.tfr) << ',' << d(r.ufr) << ',' << d(r.da) << ',' << d(r.size_pct)
      << ',' << d(r.size_abs) << ',' << d(r.price) << ',' << d(r.epsilon) << ',' << r.status << ','
      << r.model_seed << ',' << r.attack_seed << ',' << join(r.draw_seeds, u) << ',' << join(r.draw_tfr, d) << ','
      << join(r.draw_ufr, d) << '\n';
  }
  return o.str();
}

ResultTable parse_results_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  ResultTable t;
  if (!std::getline(in, line) || line.rfind("# tuap-results ", 0) != 0)
    throw FormatError("results csv: missing header comment");
  for (const auto& field : io::split(line.substr(15), ' ')) {
    const auto eq = field.find('=');
    if (eq == std::string::npos) throw FormatError("results csv: bad header field '" + field + "'");
    const std::string key = field.substr(0, eq), value = field.substr(eq + 1);
    if (key == "kind")
      t.kind = value;
    else if (key == "plan")
      t.plan_fingerprint = parse_hex(value);
  }
  if (!std::getline(in, line) || line != kCsvHeader) throw FormatError("results csv: unexpected column header");
  std::size_t line_no = 2;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = io::split(line, ',');
    if (f.size() != 19) throw FormatError("results csv: line " + std::to_string(line_no) + " has wrong field count");
    ResultRow r;
    try {
      r.stock = f[0];
      r.category = f[1];
      r.source = f[2];
      r.model = f[3];
      r.test_set = f[4];
      r.condition = parse_condition(f[5]);
      r.tfr = io::parse_double(f[6]);
      r.ufr = io::parse_double(f[7]);
      r.da = io::parse_double(f[8]);
      r.size_pct = io::parse_double(f[9]);
      r.size_abs = io::parse_double(f[10]);
      r.price = io::parse_double(f[11]);
      r.epsilon = io::parse_double(f[12]);
      r.status = f[13];
      r.model_seed = parse_u64(f[14]);
      r.attack_seed = parse_u64(f[15]);
      for (const auto& s : split_list(f[16])) r.draw_seeds.push_back(parse_u64(s));
      for (const auto& s : split_list(f[17])) r.draw_tfr.push_back(io::parse_double(s));
      for (const auto& s : split_list(f[18])) r.draw_ufr.push_back(io::parse_double(s));
    } catch (const ValidationError& e) {
      throw FormatError("results csv: line " + std::to_string(line_no) + ": " + e.what());
    }
    t.rows.push_back(std::move(r));
  }
  return t;
}

ResultTable read_results_csv(const std::filesystem::path& path) { return parse_results_csv(io::read_text(path)); }

std::string summary_text(const ResultTable& table) {
  std::ostringstream o;
  o << table.kind << " results, plan " << hex(table.plan_fingerprint) << ", " << table.rows.size() << " rows\n\n";
  const auto stocks = unique_in_order(table, &ResultRow::stock);
  if (table.kind == "transfer") {
    for (const auto& s : stocks) {
      const TransferMatrix m = transfer_matrix(table, s);
      o << s << ": TFR of the TUAP crafted on <row> evaluated on <column>, mean over test sets\n";
      o << std::setw(8) << "";
      for (const auto& a : m.archs) o << std::setw(9) << a;
      o << std::setw(9) << "size%" << '\n';
      for (std::size_t i = 0; i < m.archs.size(); ++i) {
        o << std::setw(8) << m.archs[i];
        for (std::size_t j = 0; j < m.archs.size(); ++j) o << std::setw(9) << fixed(m.tfr[i][j]);
        o << std::setw(9) << fixed(m.size_pct[i], 4) << (m.crafted[i] ? "" : "  NO RESULT") << '\n';
      }
      o << std::setw(8) << "clean";
      for (double c : m.clean_tfr) o << std::setw(9) << fixed(c);
      o << "\n\n";
    }
  } else {
    o << std::left << std::setw(8) << "stock" << std::setw(6) << "model" << std::right << std::setw(10)
      << "clean DA" << std::setw(11) << "clean TFR" << std::setw(10) << "TUAP TFR" << std::setw(10) << "TUAP UFR"
      << std::setw(10) << "rand TFR" << std::setw(10) << "rand UFR" << std::setw(9) << "size%" << '\n';
    for (const auto& s : stocks)
      for (const auto& m : unique_in_order(table, &ResultRow::model)) {
        const auto mm = [&](Condition c, double ResultRow::*f) { return mean_metric(table, s, "", m, "", c, f); };
        if (std::isnan(mm(Condition::clean, &ResultRow::tfr))) continue;
        o << std::left << std::setw(8) << s << std::setw(6) << m << std::right << std::setw(10)
          << fixed(mm(Condition::clean, &ResultRow::da)) << std::setw(11) << fixed(mm(Condition::clean, &ResultRow::tfr))
          << std::setw(10) << fixed(mm(Condition::tuap, &ResultRow::tfr)) << std::setw(10)
          << fixed(mm(Condition::tuap, &ResultRow::ufr)) << std::setw(10) << fixed(mm(Condition::random, &ResultRow::tfr))
          << std::setw(10) << fixed(mm(Condition::random, &ResultRow::ufr)) << std::setw(9)
          << fixed(mm(Condition::tuap, &ResultRow::size_pct), 4) << '\n';
      }
    o << "(means over test sets T1-T6)\n\n";
    if (table.kind == "categories") {
      o << "category  stocks  avg price  TUAP size ($)  clean DA  TUAP TFR  TUAP UFR  rand UFR\n";
      for (const auto& c : summarize_categories(table))
        o << std::left << std::setw(10) << c.category << std::right << std::setw(6) << c.stocks << std::setw(11)
          << fixed(c.avg_price) << std::setw(15) << fixed(c.avg_size_abs, 4) << std::setw(10) << fixed(c.clean_da)
          << std::setw(10) << fixed(c.tuap_tfr) << std::setw(10) << fixed(c.tuap_ufr) << std::setw(10)
          << fixed(c.random_ufr) << '\n';
      o << '\n';
    }
  }
  std::set<std::string> failed;
  for (const auto& r : table.rows)
    if (r.status != "ok") failed.insert(r.stock + "/" + r.source);
  if (failed.empty()) {
    o << "NoResult cells: none\n";
  } else {
    o << "NoResult cells (crafting did not reach delta; rows report the last iterate):\n";
    for (const auto& f : failed) o << "  " << f << '\n';
  }
  return o.str();
}

std::vector<std::filesystem::path> emit_report(const ResultTable& table, const std::filesystem::path& dir,
                                               const ExperimentPlan* plan) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> written;
  const auto put = [&](const std::string& name, const std::string& text) {
    io::write_text_atomic(dir / name, text);
    written.push_back(dir / name);
  };
  put("results.csv", results_csv(table));

  json doc;
  doc["format"] = "tuap-results";
  doc["kind"] = table.kind;
  doc["plan_fingerprint"] = hex(table.plan_fingerprint);
  if (plan) doc["plan"] = {{"seed", plan->seed}, {"resolved", plan->describe()}};
  json rows = json::array();
  for (const auto& r : table.rows) rows.push_back(row_json(r, table.plan_fingerprint));
  doc["rows"] = rows;
  put("results.json", doc.dump(2) + "\n");

  put("summary.txt", summary_text(table));
  put("plot.csv", plot_csv(table));
  if (table.kind == "categories") put("categories.csv", categories_csv(summarize_categories(table)));
  if (table.kind == "transfer") {
    std::vector<TransferMatrix> ms;
    for (const auto& s : unique_in_order(table, &ResultRow::stock)) ms.push_back(transfer_matrix(table, s));
    put("transfer.csv", transfer_csv(ms));
  }
  return written;
}

}  // namespace tuap
