// Command-line front end: data, train, attack, experiment, defend.
//
// Exit codes: 0 success, 2 validation error, 3 NoResult, 1 internal error.

#include <cstdio>
#include <filesystem>
#include <future>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "tuap/alpha_models.hpp"
#include "tuap/attack.hpp"
#include "tuap/defense.hpp"
#include "tuap/error.hpp"
#include "tuap/experiments.hpp"
#include "tuap/io.hpp"
#include "tuap/market_data.hpp"

namespace fs = std::filesystem;
using namespace tuap;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInternal = 1;
constexpr int kExitValidation = 2;
constexpr int kExitNoResult = 3;

/// Raised after a NoResult has been reported and recorded.
struct NoResultExit {
  std::string advice;
};

std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Output bookkeeping for one invocation. Every file lands under `out`.
class Run {
 public:
  fs::path out;

  void open() {
    if (out.empty()) throw ValidationError("--out is required");
    fs::create_directories(out);
  }
  void text(const std::string& name, const std::string& content) {
    io::write_text_atomic(out / name, content);
    record(out / name);
  }
  void record(const fs::path& p) {
    if (fs::is_directory(p)) {
      std::vector<fs::path> files;
      for (const auto& e : fs::recursive_directory_iterator(p))
        if (e.is_regular_file()) files.push_back(e.path());
      std::sort(files.begin(), files.end());
      for (const auto& f : files) record(f);
      return;
    }
    outputs_.push_back(p);
  }
  void note(const std::string& key, nlohmann::json value) { extra_[key] = std::move(value); }

  /// Resolved-config snapshot plus a JSON manifest of this invocation.
  void finish(const std::string& command, const std::string& resolved, const std::vector<std::string>& argv,
              const std::string& status) {
    io::write_text_atomic(out / "config.ini", resolved);
    nlohmann::json files = nlohmann::json::array();
    for (const auto& p : outputs_) {
      const auto bytes = io::read_file(p);
      files.push_back({{"path", fs::relative(p, out).generic_string()},
                       {"bytes", bytes.size()},
                       {"fnv1a64", hex(io::fnv1a64(bytes.data(), bytes.size()))}});
    }
    nlohmann::json m = {{"tool", "tuap"},         {"command", command}, {"arguments", argv},
                        {"status", status},       {"config", "config.ini"}, {"outputs", files}};
    for (const auto& [k, v] : extra_.items()) m[k] = v;
    io::write_text_atomic(out / "manifest.json", m.dump(2) + "\n");
  }

 private:
  std::vector<fs::path> outputs_;
  nlohmann::json extra_ = nlohmann::json::object();
};

// --- shared option groups ------------------------------------------------------

struct DataArgs {
  fs::path data;
  std::string symbol_filter;
  int train_days = 12;
  int craft_days = 3;
  int days_per_test = 5;
  bool reference_calendar = false;
};

void add_data_options(CLI::App* app, DataArgs& d, bool required = true) {
  auto* o = app->add_option("--data", d.data, "OHLCV CSV file (as written by `data`)")->check(CLI::ExistingFile);
  if (required) o->required();
  app->add_option("--symbol-filter", d.symbol_filter, "symbol to select from a multi-symbol file");
  app->add_option("--train-days", d.train_days, "trading days used for training")->capture_default_str();
  app->add_option("--craft-days", d.craft_days, "trading days used for crafting")->capture_default_str();
  app->add_option("--days-per-test", d.days_per_test, "trading days per test week")->capture_default_str();
  app->add_flag("--reference-calendar", d.reference_calendar, "use the original study's calendar ranges");
}

StockSeries load_series(const DataArgs& d) {
  CsvSchema schema;
  if (!d.symbol_filter.empty()) schema.symbol_filter = d.symbol_filter;
  return load_csv(d.data, schema).series;
}

Split load_split(const DataArgs& d, const StockSeries& series, std::uint64_t seed) {
  const SplitProtocol protocol = d.reference_calendar
                                     ? SplitProtocol::reference(seed)
                                     : SplitProtocol::trailing(series, d.train_days, seed, d.craft_days,
                                                               d.days_per_test);
  return build_split(series, protocol);
}

void add_training_options(CLI::App* app, TrainConfig& t) {
  app->add_option("--epochs", t.epochs, "maximum training epochs")->capture_default_str();
  app->add_option("--batch-size", t.batch_size, "mini-batch size")->capture_default_str();
  app->add_option("--lr", t.learning_rate, "Adam learning rate")->capture_default_str();
  app->add_option("--patience", t.patience, "early-stopping patience in epochs")->capture_default_str();
  app->add_option("--validation-fraction", t.validation_fraction,
                  "chronological tail held out for early stopping")
      ->capture_default_str();
}

std::vector<ArchKind> parse_archs(const std::string& text) {
  if (text == "all") return {kAllArchs.begin(), kAllArchs.end()};
  return {parse_arch(text)};
}

std::uint64_t model_seed(std::uint64_t seed, ArchKind arch) {
  return io::derive_seed(seed, 0x100 + static_cast<std::uint64_t>(arch));
}

std::string eval_row(const std::string& arch, const EvalReport& r) {
  return arch + ',' + r.set_id + ',' + io::format_double(r.da) + ',' + io::format_double(r.class_accuracy[0]) + ',' +
         io::format_double(r.class_accuracy[1]) + ',' + std::to_string(r.total) + '\n';
}

std::string metrics_csv(const TrainedModel& model, const Split& split, const Offsets& v, int target) {
  std::ostringstream o;
  o << "set,tfr,clean_tfr,ufr,size_pct\n";
  auto row = [&](const std::string& id, std::span<const WindowSample> s) {
    o << id << ',' << io::format_double(tfr(model, s, v, target)) << ','
      << io::format_double(clean_tfr(model, s, target)) << ',' << io::format_double(ufr(model, s, v)) << ','
      << io::format_double(perturbation_size(v, s)) << '\n';
  };
  row("craft", split.craft);
  for (std::size_t i = 0; i < kTestSets; ++i) row("T" + std::to_string(i + 1), split.tests[i]);
  return o.str();
}

// --- data ------------------------------------------------------------------------

std::string series_summary(const StockSeries& s, std::size_t rows, std::size_t dropped) {
  const auto windows = make_windows(s);
  std::size_t up = 0;
  for (const auto& w : windows) up += static_cast<std::size_t>(w.label);
  std::ostringstream o;
  o << "symbol " << s.symbol() << '\n'
    << "bars " << s.size() << '\n'
    << "days " << s.calendar().size() << '\n';
  if (rows > 0) o << "rows " << rows << "\ndropped " << dropped << '\n';
  o << "windows " << windows.size() << " (increase " << up << ", not-increase " << windows.size() - up << ")\n";
  o << "day,bars\n";
  for (const auto& d : s.calendar()) o << format_day(d.day) << ',' << d.count << '\n';
  return o.str();
}

struct SynthArgs {
  SynthParams params;
  std::uint64_t seed = 1;
};

void cmd_synth(const SynthArgs& a, Run& run) {
  const StockSeries s = synthesize_series(a.params, a.seed);
  run.open();
  save_csv(run.out / (s.symbol() + ".csv"), s);
  run.record(run.out / (s.symbol() + ".csv"));
  const std::string summary = series_summary(s, 0, 0);
  run.text("summary.txt", summary);
  run.note("seed", a.seed);
  std::cout << summary;
}

struct IngestArgs {
  fs::path file;
  std::string symbol_filter;
  double max_drop = 0.05;
};

void cmd_ingest(const IngestArgs& a, Run& run) {
  CsvSchema schema;
  if (!a.symbol_filter.empty()) schema.symbol_filter = a.symbol_filter;
  schema.max_drop_fraction = a.max_drop;
  const CsvLoadResult r = load_csv(a.file, schema);
  run.open();
  save_csv(run.out / (r.series.symbol() + ".csv"), r.series);
  run.record(run.out / (r.series.symbol() + ".csv"));
  const std::string summary = series_summary(r.series, r.rows, r.dropped);
  run.text("summary.txt", summary);
  std::cout << summary;
}

// --- train -----------------------------------------------------------------------

struct TrainArgs {
  DataArgs data;
  TrainConfig training;
  std::string arch = "dnn";
  std::uint64_t seed = 1;
  bool force = false;
  int jobs = 1;
};

void cmd_train(const TrainArgs& a, Run& run) {
  const auto archs = parse_archs(a.arch);
  run.open();
  for (ArchKind k : archs)
    if (fs::exists(run.out / to_string(k)) && !a.force)
      throw ValidationError("bundle " + (run.out / to_string(k)).string() + " exists; pass --force to overwrite");
  const StockSeries series = load_series(a.data);
  const Split split = load_split(a.data, series, a.seed);
  const Normalizer shared = Normalizer::fit(extract_all(split.train));

  auto fit = [&](ArchKind k) {
    TrainConfig c = a.training;
    c.seed = model_seed(a.seed, k);
    return train(build(AlphaArch::make(k), c.seed), split.train, c, shared);
  };
  std::vector<TrainResult> results;
  if (a.jobs > 1 && archs.size() > 1) {
    std::vector<std::future<TrainResult>> futures;
    for (ArchKind k : archs) futures.push_back(std::async(std::launch::async, fit, k));
    for (auto& f : futures) results.push_back(f.get());
  } else {
    for (ArchKind k : archs) results.push_back(fit(k));
  }

  std::string eval = "arch,set,da,class0_accuracy,class1_accuracy,total\n";
  for (std::size_t i = 0; i < archs.size(); ++i) {
    const std::string name = to_string(archs[i]);
    const fs::path dir = run.out / name;
    fs::remove_all(dir);
    save_bundle(results[i].model, dir);
    run.record(dir);
    eval += eval_row(name, directional_accuracy(results[i].model, split.train, "train"));
    for (std::size_t t = 0; t < kTestSets; ++t)
      eval += eval_row(name, directional_accuracy(results[i].model, split.tests[t], "T" + std::to_string(t + 1)));
    std::cout << name << ": train DA " << io::format_double(results[i].model.meta.train_da) << "%, "
              << results[i].model.meta.epochs_run << " epochs\n";
  }
  run.text("eval.csv", eval);
  run.note("seed", a.seed);
}

// --- attack ----------------------------------------------------------------------

struct AttackArgs {
  DataArgs data;
  fs::path model;
  double delta = 90.0;
  double epsilon_pct = 0.02;
  double epsilon = 0.0;
  double size_tolerance = 0.1;
  int max_iter = 50;
  int target = 1;
  std::string baseline = "tuap";
  fs::path match;
  std::uint64_t seed = 1;
};

void cmd_attack(const AttackArgs& a, Run& run) {
  if (a.baseline == "random") {
    double eps = a.epsilon;
    if (!a.match.empty()) eps = load_tuap(a.match).offsets.norm();
    if (!(eps > 0.0)) throw ValidationError("random baseline needs --match or a positive --epsilon");
    const Tuap r = random_perturbation(eps, io::derive_seed(a.seed, 0x300), a.target);
    run.open();
    save_tuap(r, run.out / "random.bin");
    run.record(run.out / "random.bin");
    if (!a.model.empty() && !a.data.data.empty()) {
      const TrainedModel m = load_bundle(a.model);
      const Split split = load_split(a.data, load_series(a.data), a.seed);
      run.text("metrics.csv", metrics_csv(m, split, r.offsets, a.target));
    }
    std::cout << "random perturbation: L2 " << io::format_double(r.offsets.norm()) << ", size "
              << io::format_double(perturbation_size(r.offsets)) << "%\n";
    run.note("seed", a.seed);
    return;
  }
  if (a.baseline != "tuap") throw ValidationError("unknown baseline '" + a.baseline + "'");
  if (a.model.empty() || a.data.data.empty()) throw ValidationError("attack needs --model and --data");

  const TrainedModel model = load_bundle(a.model);
  const Split split = load_split(a.data, load_series(a.data), a.seed);
  AttackConfig config;
  config.delta = a.delta;
  config.max_outer_iterations = a.max_iter;
  config.seed = io::derive_seed(a.seed, 0x200);
  CraftResult result;
  if (a.epsilon > 0.0) {
    config.epsilon = a.epsilon;
    result = craft_tuap(split.craft, a.target, model, config);
  } else {
    if (!(a.epsilon_pct > 0.0)) throw ValidationError("--epsilon-pct must be positive");
    const CalibratedAttack c =
        calibrate_and_craft(split.craft, a.target, model, config, a.epsilon_pct, a.size_tolerance);
    result = c.result;
    if (!c.converged && std::holds_alternative<Tuap>(result))
      std::cerr << "warning: size " << io::format_double(c.size_pct) << "% is outside the tolerance after "
                << c.rounds << " calibration rounds\n";
  }
  run.open();
  run.note("seed", a.seed);
  run.note("attack_seed", config.seed);
  if (const auto* none = std::get_if<NoResult>(&result)) {
    run.text("no_result.txt", none->advice + "\n");
    throw NoResultExit{none->advice};
  }
  const Tuap& t = std::get<Tuap>(result);
  const double verified = tfr(model, split.craft, t.offsets, a.target);
  if (verified < a.delta || t.offsets.norm() > t.epsilon * (1.0 + 1e-12))
    throw NumericalError("crafted perturbation failed re-verification");
  save_tuap(t, run.out / "tuap.bin");
  run.record(run.out / "tuap.bin");
  run.text("metrics.csv", metrics_csv(model, split, t.offsets, a.target));
  std::cout << "TUAP after " << t.iterations << " iterations: craft TFR " << io::format_double(verified)
            << "%, L2 " << io::format_double(t.offsets.norm()) << ", size "
            << io::format_double(perturbation_size(t.offsets)) << "%\n";
}

// --- experiment ------------------------------------------------------------------

struct ExperimentArgs {
  std::vector<std::string> stocks;
  std::vector<std::string> models{"dnn", "cnn", "rnn"};
  DataArgs data;  // split options only
  TrainConfig training;
  double delta = 90.0;
  int max_iter = 50;
  double epsilon = 0.0;
  double target_size_pct = 0.02;
  double size_tolerance = 0.1;
  int target = 1;
  int random_draws = 3;
  double volatility = SynthParams{}.volatility;
  double amplitude = SynthParams{}.seasonality_amplitude;
  double period = SynthParams{}.seasonality_period;
  std::uint64_t seed = 2024;
  int jobs = 1;
};

ExperimentPlan make_plan(const ExperimentArgs& a, const fs::path& out) {
  ExperimentPlan p = ExperimentPlan::desk_default();
  if (!a.stocks.empty()) {
    p.stocks.clear();
    for (const auto& s : a.stocks) p.stocks.push_back(parse_stock(s));
  }
  p.models.clear();
  for (const auto& m : a.models)
    for (ArchKind k : parse_archs(m)) p.models.push_back(k);
  p.train_days = a.data.train_days;
  p.craft_days = a.data.craft_days;
  p.days_per_test = a.data.days_per_test;
  p.reference_calendar = a.data.reference_calendar;
  p.training = a.training;
  p.attack.delta = a.delta;
  p.attack.max_outer_iterations = a.max_iter;
  p.attack.epsilon = a.epsilon;
  p.target_size_pct = a.target_size_pct;
  p.size_tolerance = a.size_tolerance;
  p.target_class = a.target;
  p.random_draws = a.random_draws;
  p.synth.volatility = a.volatility;
  p.synth.seasonality_amplitude = a.amplitude;
  p.synth.seasonality_period = a.period;
  p.seed = a.seed;
  p.jobs = a.jobs;
  p.cell_dir = out / "cells";
  p.validate();
  return p;
}

void cmd_experiment(const std::string& kind, const ExperimentArgs& a, Run& run) {
  run.open();
  const ExperimentPlan plan = make_plan(a, run.out);
  ResultTable table;
  if (kind == "whitebox")
    table = run_whitebox(plan);
  else if (kind == "categories")
    table = run_categories(plan);
  else
    table = run_transfer(plan);
  for (const auto& p : emit_report(table, run.out, &plan)) run.record(p);
  run.note("seed", plan.seed);
  run.note("plan_fingerprint", hex(plan.fingerprint()));
  std::cout << summary_text(table);
}

// --- defend ----------------------------------------------------------------------

struct DefendArgs {
  DataArgs data;
  fs::path model;
  fs::path tuap;
  double ratio = 0.1;
  std::size_t week_size = 1500;
  int k = 5;
  int ann_epochs = 30;
  std::vector<std::string> detectors{"knn", "ann"};
  std::vector<double> fractions{0.0, 0.1, 0.2, 0.3, 0.4, 0.5};
  TrainConfig training;
  std::vector<fs::path> streams;
  double tolerance_pct = 0.005;
  std::uint64_t seed = 1;
};

void cmd_detect(const DefendArgs& a, Run& run) {
  if (a.tuap.empty()) throw ValidationError("detect needs --tuap");
  const Tuap t = load_tuap(a.tuap);
  const Split split = load_split(a.data, load_series(a.data), a.seed);
  DetectorSetConfig c;
  c.ratio = a.ratio;
  c.week_size = a.week_size;
  c.seed = io::derive_seed(a.seed, 0x400);
  const DetectorSets sets = build_detector_sets(split.craft_pool, t.offsets, split.tests, split.test_pools, c);
  std::string csv;
  for (const auto& name : a.detectors) {
    Detector d;
    if (name == "knn") {
      d = KnnDetector(sets.train, a.k);
    } else if (name == "ann") {
      AnnDetectorConfig ac;
      ac.epochs = a.ann_epochs;
      ac.seed = io::derive_seed(a.seed, 0x401);
      d = AnnDetector(sets.train, ac);
    } else {
      throw ValidationError("unknown detector '" + name + "'");
    }
    std::string part = detection_csv(evaluate_detector(name, d, sets.tests));
    if (!csv.empty()) part.erase(0, part.find('\n') + 1);
    csv += part;
  }
  run.open();
  run.text("detection.csv", csv);
  run.note("seed", a.seed);
  std::cout << csv;
}

void cmd_retrain(const DefendArgs& a, Run& run) {
  if (a.tuap.empty() || a.model.empty()) throw ValidationError("retrain needs --model and --tuap");
  const TrainedModel baseline = load_bundle(a.model);
  const Tuap t = load_tuap(a.tuap);
  const Split split = load_split(a.data, load_series(a.data), a.seed);
  RetrainConfig c;
  c.fractions = a.fractions;
  c.training = a.training;
  const RetrainReport r = adversarial_retrain(baseline, split.train, t, split.tests, c);
  run.open();
  const std::string csv = retrain_csv(r);
  run.text("retrain.csv", csv);
  run.note("seed", a.seed);
  std::cout << csv;
}

void cmd_crosscheck(const DefendArgs& a, Run& run) {
  std::vector<StockSeries> streams;
  for (const auto& p : a.streams) streams.push_back(load_csv(p).series);
  if (!(a.tolerance_pct >= 0.0)) throw ValidationError("--tolerance-pct must not be negative");
  const FilterResult r = multi_broker_filter(streams, a.tolerance_pct / 100.0);
  run.open();
  run.text("mismatches.csv", mismatch_csv(r, streams.size()));
  if (r.series.size() > 0) {
    save_csv(run.out / "consensus.csv", r.series);
    run.record(run.out / "consensus.csv");
  }
  std::ostringstream o;
  o << "minutes " << r.minutes << "\ndropped " << r.mismatches.size() << "\nkept " << r.series.size()
    << "\nflagged_pct "
    << io::format_double(r.minutes ? 100.0 * static_cast<double>(r.mismatches.size()) / static_cast<double>(r.minutes)
                                   : 0.0)
    << '\n';
  run.text("summary.txt", o.str());
  std::cout << o.str();
}

/// Keeps the config lines of the invoked command and its parents.
std::string snapshot(const std::string& full, const std::string& command) {
  std::vector<std::string> path;
  std::istringstream cs(command);
  for (std::string w; cs >> w;) path.push_back(w);
  std::ostringstream out;
  std::istringstream in(full);
  for (std::string line; std::getline(in, line);) {
    const auto parts = io::split(line.substr(0, line.find('=')), '.');
    bool keep = parts.size() - 1 <= path.size();
    for (std::size_t i = 0; keep && i + 1 < parts.size(); ++i) keep = parts[i] == path[i];
    if (keep) out << line << '\n';
  }
  return out.str();
}

std::string command_path(const CLI::App& app) {
  std::string path;
  for (const CLI::App* a = &app; a != nullptr;) {
    const auto subs = a->get_subcommands();
    if (subs.empty()) break;
    a = subs.front();
    path += (path.empty() ? "" : " ") + a->get_name();
  }
  return path;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Targeted universal adversarial perturbations against intraday alpha models"};
  app.set_config("--config,--plan", "", "INI file; sections name subcommands, e.g. [train] or [experiment]");
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.fallthrough();
  app.require_subcommand(1);

  Run run;

  // data
  SynthArgs synth;
  IngestArgs ingest;
  auto* data = app.add_subcommand("data", "synthesize or ingest minute bars");
  data->require_subcommand(1);
  data->add_option("--out", run.out, "output directory");
  auto* synth_cmd = data->add_subcommand("synth", "write a synthetic series");
  synth_cmd->add_option("--symbol", synth.params.symbol)->capture_default_str();
  synth_cmd->add_option("--days", synth.params.n_days)->capture_default_str();
  synth_cmd->add_option("--start-price", synth.params.start_price)->capture_default_str();
  synth_cmd->add_option("--volatility", synth.params.volatility)->capture_default_str();
  synth_cmd->add_option("--amplitude", synth.params.seasonality_amplitude)->capture_default_str();
  synth_cmd->add_option("--period", synth.params.seasonality_period)->capture_default_str();
  synth_cmd->add_option("--drift", synth.params.drift)->capture_default_str();
  synth_cmd->add_option("--seed", synth.seed)->capture_default_str();
  auto* ingest_cmd = data->add_subcommand("ingest", "validate and normalise an OHLCV CSV");
  ingest_cmd->add_option("file", ingest.file)->required()->check(CLI::ExistingFile);
  ingest_cmd->add_option("--symbol-filter", ingest.symbol_filter);
  ingest_cmd->add_option("--max-drop", ingest.max_drop, "tolerated fraction of corrupt rows")->capture_default_str();

  // train
  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "train alpha models on a shared normalizer");
  train_cmd->add_option("--out", run.out, "output directory");
  train_cmd->add_option("--arch", train_args.arch, "dnn, cnn, rnn or all")->capture_default_str();
  train_cmd->add_option("--seed", train_args.seed)->capture_default_str();
  train_cmd->add_option("--jobs", train_args.jobs, "parallel workers")->capture_default_str();
  train_cmd->add_flag("--force", train_args.force, "overwrite existing bundles");
  add_data_options(train_cmd, train_args.data);
  add_training_options(train_cmd, train_args.training);

  // attack
  AttackArgs attack;
  auto* attack_cmd = app.add_subcommand("attack", "craft a TUAP or a size-matched random baseline");
  attack_cmd->add_option("--out", run.out, "output directory");
  attack_cmd->add_option("--model", attack.model, "model bundle directory");
  attack_cmd->add_option("--delta", attack.delta, "required craft-set TFR, percent")->capture_default_str();
  attack_cmd->add_option("--epsilon-pct", attack.epsilon_pct, "target mean absolute size, percent")
      ->capture_default_str();
  attack_cmd->add_option("--epsilon", attack.epsilon, "fixed L2 budget; skips calibration")->capture_default_str();
  attack_cmd->add_option("--size-tolerance", attack.size_tolerance, "relative size tolerance")->capture_default_str();
  attack_cmd->add_option("--max-iter", attack.max_iter, "outer iterations")->capture_default_str();
  attack_cmd->add_option("--target", attack.target, "target class")->capture_default_str();
  attack_cmd->add_option("--baseline", attack.baseline, "tuap or random")->capture_default_str();
  attack_cmd->add_option("--match", attack.match, "TUAP file whose L2 norm the random baseline copies");
  attack_cmd->add_option("--seed", attack.seed)->capture_default_str();
  add_data_options(attack_cmd, attack.data, false);

  // experiment
  ExperimentArgs exp;
  auto* exp_cmd = app.add_subcommand("experiment", "white-box, price-category and transfer suites");
  exp_cmd->require_subcommand(1);
  exp_cmd->add_option("--out", run.out, "output directory");
  exp_cmd->add_option("--stocks", exp.stocks, "SYMBOL[:category[:price-or-csv]] entries");
  exp_cmd->add_option("--models", exp.models, "archs")->capture_default_str();
  exp_cmd->add_option("--delta", exp.delta)->capture_default_str();
  exp_cmd->add_option("--max-iter", exp.max_iter)->capture_default_str();
  exp_cmd->add_option("--epsilon", exp.epsilon, "fixed L2 budget; 0 calibrates")->capture_default_str();
  exp_cmd->add_option("--target-size-pct", exp.target_size_pct)->capture_default_str();
  exp_cmd->add_option("--size-tolerance", exp.size_tolerance)->capture_default_str();
  exp_cmd->add_option("--target", exp.target)->capture_default_str();
  exp_cmd->add_option("--random-draws", exp.random_draws)->capture_default_str();
  exp_cmd->add_option("--volatility", exp.volatility, "synthetic per-minute volatility")->capture_default_str();
  exp_cmd->add_option("--amplitude", exp.amplitude, "synthetic intraday cycle amplitude")->capture_default_str();
  exp_cmd->add_option("--period", exp.period, "synthetic intraday cycle period")->capture_default_str();
  exp_cmd->add_option("--seed", exp.seed)->capture_default_str();
  exp_cmd->add_option("--jobs", exp.jobs, "parallel workers")->capture_default_str();
  exp_cmd->add_option("--train-days", exp.data.train_days)->capture_default_str();
  exp_cmd->add_option("--craft-days", exp.data.craft_days)->capture_default_str();
  exp_cmd->add_option("--days-per-test", exp.data.days_per_test)->capture_default_str();
  exp_cmd->add_flag("--reference-calendar", exp.data.reference_calendar);
  add_training_options(exp_cmd, exp.training);
  for (const char* kind : {"whitebox", "categories", "transfer"}) exp_cmd->add_subcommand(kind, std::string(kind) + " suite");

  // defend
  DefendArgs def;
  auto* def_cmd = app.add_subcommand("defend", "detectors, adversarial retraining, multi-broker cross-check");
  def_cmd->require_subcommand(1);
  def_cmd->add_option("--out", run.out, "output directory");
  def_cmd->add_option("--seed", def.seed)->capture_default_str();
  auto* detect_cmd = def_cmd->add_subcommand("detect", "kNN and ANN detectors per test week");
  detect_cmd->add_option("--tuap", def.tuap)->check(CLI::ExistingFile);
  detect_cmd->add_option("--ratio", def.ratio, "perturbed share")->capture_default_str();
  detect_cmd->add_option("--week-size", def.week_size, "samples per detector test week")->capture_default_str();
  detect_cmd->add_option("--k", def.k, "kNN neighbours")->capture_default_str();
  detect_cmd->add_option("--ann-epochs", def.ann_epochs)->capture_default_str();
  detect_cmd->add_option("--detectors", def.detectors, "knn, ann")->delimiter(',')->capture_default_str();
  add_data_options(detect_cmd, def.data);
  auto* retrain_cmd = def_cmd->add_subcommand("retrain", "adversarial retraining sweep");
  retrain_cmd->add_option("--model", def.model, "baseline bundle")->check(CLI::ExistingDirectory);
  retrain_cmd->add_option("--tuap", def.tuap)->check(CLI::ExistingFile);
  retrain_cmd->add_option("--fractions", def.fractions, "perturbed shares")->delimiter(',')->capture_default_str();
  add_data_options(retrain_cmd, def.data);
  add_training_options(retrain_cmd, def.training);
  auto* cross_cmd = def_cmd->add_subcommand("crosscheck", "compare broker feeds minute by minute");
  cross_cmd->add_option("streams", def.streams, "two or more OHLCV CSV files")->required()->check(CLI::ExistingFile);
  cross_cmd->add_option("--tolerance-pct", def.tolerance_pct, "relative close tolerance, percent")
      ->capture_default_str();

  const std::vector<std::string> args(argv + 1, argv + argc);
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitValidation;
  }

  const std::string command = command_path(app);
  std::string status = "ok";
  int code = kExitOk;
  try {
    if (synth_cmd->parsed())
      cmd_synth(synth, run);
    else if (ingest_cmd->parsed())
      cmd_ingest(ingest, run);
    else if (train_cmd->parsed())
      cmd_train(train_args, run);
    else if (attack_cmd->parsed())
      cmd_attack(attack, run);
    else if (exp_cmd->parsed())
      cmd_experiment(exp_cmd->get_subcommands().front()->get_name(), exp, run);
    else if (detect_cmd->parsed())
      cmd_detect(def, run);
    else if (retrain_cmd->parsed())
      cmd_retrain(def, run);
    else if (cross_cmd->parsed())
      cmd_crosscheck(def, run);
  } catch (const NoResultExit& e) {
    std::cerr << "NoResult: " << e.advice << '\n';
    status = "no_result";
    code = kExitNoResult;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return kExitInternal;
  }
  try {
    run.finish(command, snapshot(app.config_to_str(true, false), command), args, status);
  } catch (const std::exception& e) {
    std::cerr << "internal error: could not write the run manifest: " << e.what() << '\n';
    return kExitInternal;
  }
  return code;
}
