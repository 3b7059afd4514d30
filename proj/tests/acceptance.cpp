// Acceptance suite. Prints one PASS/FAIL/SKIP line per criterion (with
// indented detail lines) and exits nonzero if any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <iomanip>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "tuap/alpha_models.hpp"
#include "tuap/attack.hpp"
#include "tuap/defense.hpp"
#include "tuap/error.hpp"
#include "tuap/experiments.hpp"
#include "tuap/features.hpp"
#include "tuap/io.hpp"
#include "tuap/nn.hpp"

using namespace tuap;

namespace {

// Pinned tolerances and thresholds.
constexpr double kGradRel = 1e-4;        // end-to-end price gradient, relative
constexpr double kGradAbs = 1e-8;        // absolute floor for near-zero entries
constexpr double kGradStep = 1e-7;       // central-difference step, fraction of the close
constexpr double kGradFineStep = 1e-9;   // re-check step when a ReLU switches inside +-kGradStep
constexpr int kGradWindows = 50;         // per arch
constexpr double kJacRel = 1e-5;         // feature Jacobian, relative
constexpr double kJacAbs = 1e-8;
constexpr int kJacWindows = 100;
constexpr double kGradSeconds = 120.0;

constexpr int kContractRuns = 20;
constexpr double kNormSlack = 1e-12;     // relative slack on ||v|| <= epsilon

constexpr double kTrainDa = 60.0;
constexpr double kHeldOutDa = 55.0;
constexpr double kTargetSize = 0.02;     // percent
constexpr double kSizeTolerance = 0.10;  // relative
constexpr double kDelta = 90.0;
constexpr double kHeldOutTfr = 75.0;
constexpr double kRandomShift = 5.0;     // TFR points
constexpr double kAttackSeconds = 600.0;

constexpr double kTransferGain = 20.0;   // TFR points over clean

constexpr double kRetrainTfrDrop = 10.0;
constexpr double kRetrainDaDrop = 5.0;
constexpr double kRetrainFraction = 0.4;
constexpr double kBrokerTolerance = 5e-5;  // 0.005%

int failures = 0;

void verdict(int id, bool pass, const std::string& text) {
  if (!pass) ++failures;
  std::cout << (pass ? "PASS" : "FAIL") << " criterion " << id << ": " << text << std::endl;
}

void detail(const std::string& text) { std::cout << "    " << text << std::endl; }

std::string fmt(double v, int digits = 2) {
  std::ostringstream o;
  o << std::fixed << std::setprecision(digits) << v;
  return o.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

/// The seeded synthetic setting every criterion below shares.
ExperimentPlan base_plan() {
  ExperimentPlan p;
  p.stocks = {parse_stock("SYN")};
  p.target_size_pct = kTargetSize;
  p.size_tolerance = kSizeTolerance;
  p.attack.delta = kDelta;
  return p;
}

struct Setting {
  ExperimentPlan plan;
  StockRun run;
  std::vector<TrainedModel> models;  // kAllArchs order
};

const Setting& setting() {
  static const Setting s = [] {
    Setting out{base_plan(), {}, {}};
    out.run = prepare_stock(out.plan, out.plan.stocks[0]);
    for (ArchKind k : kAllArchs) out.models.push_back(train_for(out.plan, out.run, k));
    return out;
  }();
  return s;
}

// --- 1 ----------------------------------------------------------------------------

void gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  const Setting& s = setting();
  std::vector<WindowSample> pool;
  for (const auto& week : s.run.split.test_pools) pool.insert(pool.end(), week.begin(), week.end());
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);

  bool pass = true;
  for (std::size_t a = 0; a < kAllArchs.size(); ++a) {
    const TrainedModel& m = s.models[a];
    int mismatches = 0, kinks = 0;
    double worst = 0.0;
    for (int i = 0; i < kGradWindows; ++i) {
      const WindowSample& w = pool[pick(rng)];
      const int target = i % 2;
      const Closes g = input_price_gradient(m, w, target);
      const Closes c = window_closes(w);
      const auto loss = [&](const Closes& x) {
        const FeatureVector f = features_from_closes(x, w.anchor_timestamp);
        const nn::Matrix in = adapt(m.arch.kind, std::vector<FeatureVector>{m.normalizer.apply(f)});
        return nn::cross_entropy(nn::forward(m.graph, in).logits, std::vector<int>{target}).loss;
      };
      const auto central = [&](int j, double step) {
        const double h = step * c(j);
        Closes up = c, down = c;
        up(j) += h;
        down(j) -= h;
        return (loss(up) - loss(down)) / (2.0 * h);
      };
      const auto agrees = [&](double a, double b) {
        return std::abs(a - b) <= kGradRel * std::max(std::abs(a), std::abs(b)) + kGradAbs;
      };
      for (int j = 0; j < kWindowLength; ++j) {
        double fd = central(j, kGradStep);
        if (!agrees(g(j), fd)) {
          // A ReLU switching inside the stencil makes the difference quotient
          // average two slopes; a narrower stencil stays on one side.
          ++kinks;
          fd = central(j, kGradFineStep);
        }
        if (!agrees(g(j), fd)) ++mismatches;
        const double scale = std::max(std::abs(g(j)), std::abs(fd));
        if (scale > 0.0) worst = std::max(worst, std::abs(g(j) - fd) / scale);
      }
    }
    detail(to_string(kAllArchs[a]) + ": " + std::to_string(kGradWindows) + " windows x 30 closes, " +
           std::to_string(mismatches) + " mismatches (" + std::to_string(kinks) +
           " re-checked at the fine step), worst relative error " + fmt(worst * 1e6, 3) + "e-6");
    pass = pass && mismatches == 0;
  }

  int jac_mismatches = 0;
  for (int i = 0; i < kJacWindows; ++i) {
    const WindowSample& w = pool[pick(rng)];
    const Closes c = window_closes(w);
    const FeatureJacobian j = feature_input_jacobian(w);
    for (int col = 0; col < kWindowLength; ++col) {
      const double h = kGradStep * c(col);
      Closes up = c, down = c;
      up(col) += h;
      down(col) -= h;
      const FeatureVector fd =
          (features_from_closes(up, w.anchor_timestamp) - features_from_closes(down, w.anchor_timestamp)) / (2.0 * h);
      for (int row = 0; row < kFeatureCount; ++row)
        if (std::abs(j(row, col) - fd(row)) > std::max(kJacRel * std::abs(j(row, col)), kJacAbs)) ++jac_mismatches;
    }
  }
  detail("feature Jacobian: " + std::to_string(kJacWindows) + " windows, " + std::to_string(jac_mismatches) +
         " mismatches");
  const double secs = seconds_since(t0);
  detail("runtime " + fmt(secs, 1) + " s (includes training the three models)");
  verdict(1, pass && jac_mismatches == 0 && secs < kGradSeconds,
          "price gradients match central differences within 1e-4 relative, Jacobian within 1e-5");
}

// --- 2 ----------------------------------------------------------------------------

void crafting_contract() {
  const Setting& s = setting();
  const auto& craft = s.run.split.craft;
  std::mt19937_64 rng(io::derive_seed(s.plan.seed, 0xac2));
  std::uniform_real_distribution<double> delta_dist(80.0, 100.0), scale(0.2, 1.5);
  std::uniform_int_distribution<int> outer(1, 8);
  const double eps0 = kTargetSize / 100.0 * std::sqrt(static_cast<double>(kWindowLength));

  int successes = 0, no_results = 0, violations = 0;
  for (int run = 0; run < kContractRuns; ++run) {
    const std::size_t a = static_cast<std::size_t>(run) % kAllArchs.size();
    const TrainedModel& m = s.models[a];
    AttackConfig c;
    c.delta = std::round(delta_dist(rng));
    c.epsilon = eps0 * scale(rng);
    c.max_outer_iterations = outer(rng);
    c.seed = io::derive_seed(s.plan.seed, 0x500 + static_cast<std::uint64_t>(run));
    int observed = 0;
    const CraftResult r = craft_tuap(craft, s.plan.target_class, m, c, [&](int, const Offsets&, double) { ++observed; });
    std::string outcome;
    if (const auto* t = std::get_if<Tuap>(&r)) {
      ++successes;
      // Re-verify through the plain prediction path, not the attack's TFR helper.
      const auto labels = predict_labels(m, apply_perturbation(craft, t->offsets));
      const double hits = static_cast<double>(std::count(labels.begin(), labels.end(), s.plan.target_class));
      const double verified = 100.0 * hits / static_cast<double>(labels.size());
      const bool ok = verified >= c.delta && t->offsets.norm() <= c.epsilon * (1.0 + kNormSlack);
      if (!ok) ++violations;
      outcome = "success after " + std::to_string(t->iterations) + ", re-verified TFR " + fmt(verified) + ", ||v|| / eps " +
                fmt(t->offsets.norm() / c.epsilon, 4) + (ok ? "" : "  VIOLATION");
    } else {
      ++no_results;
      const auto& n = std::get<NoResult>(r);
      const bool ok = n.iterations == c.max_outer_iterations && observed == c.max_outer_iterations;
      if (!ok) ++violations;
      outcome = "NoResult after " + std::to_string(n.iterations) + " (observer saw " + std::to_string(observed) + ")" +
                (ok ? "" : "  VIOLATION");
    }
    detail("run " + std::to_string(run + 1) + " " + to_string(kAllArchs[a]) + " delta " + fmt(c.delta, 0) + " eps " +
           fmt(c.epsilon * 1e3, 3) + "e-3 E " + std::to_string(c.max_outer_iterations) + ": " + outcome);
  }
  detail(std::to_string(successes) + " successes, " + std::to_string(no_results) + " NoResults");
  verdict(2, violations == 0,
          "every success re-verifies TFR >= delta and ||v|| <= eps; every failure stops after exactly E iterations");
}

// --- 3 and 7 ------------------------------------------------------------------------

ResultTable whitebox_table;

const ResultRow* find_row(const ResultTable& t, const std::string& model, const std::string& set, Condition c) {
  for (const auto& r : t.rows)
    if (r.model == model && r.test_set == set && r.condition == c) return &r;
  return nullptr;
}

void synthetic_attack() {
  const auto t0 = std::chrono::steady_clock::now();
  const Setting& s = setting();
  whitebox_table = run_whitebox(s.plan);
  const double secs = seconds_since(t0);

  bool pass = true;
  for (std::size_t a = 0; a < kAllArchs.size(); ++a) {
    const std::string arch = to_string(kAllArchs[a]);
    const TrainedModel& m = s.models[a];
    const double train_da = directional_accuracy(m, s.run.split.train).da;
    double held_da = 0.0;
    for (const auto& t : s.run.split.tests) held_da += directional_accuracy(m, t).da / kTestSets;
    const ResultRow* clean = find_row(whitebox_table, arch, "T1", Condition::clean);
    const ResultRow* tuap = find_row(whitebox_table, arch, "T1", Condition::tuap);
    const ResultRow* rnd = find_row(whitebox_table, arch, "T1", Condition::random);
    if (!clean || !tuap || !rnd) {
      detail(arch + ": missing result rows");
      pass = false;
      continue;
    }
    const bool crafted = tuap->status == "ok";
    const bool da_ok = train_da >= kTrainDa && held_da >= kHeldOutDa;
    const bool size_ok = crafted && std::abs(tuap->size_pct - kTargetSize) <= kSizeTolerance * kTargetSize;
    const bool tfr_ok = crafted && tuap->tfr >= kHeldOutTfr;
    const double shift = rnd->tfr - clean->tfr;
    const bool shift_ok = crafted && std::abs(shift) <= kRandomShift;
    const bool ufr_ok = crafted && rnd->ufr < tuap->ufr;
    std::ostringstream o;
    o << arch << ": DA train " << fmt(train_da) << " held-out " << fmt(held_da) << (da_ok ? "" : " [DA]")
      << "; size " << fmt(tuap->size_pct, 4) << "%" << (size_ok ? "" : " [size]") << "; T1 TFR clean " << fmt(clean->tfr)
      << " TUAP " << fmt(tuap->tfr) << (tfr_ok ? "" : " [TFR]") << " random " << fmt(rnd->tfr) << " (shift "
      << (shift >= 0 ? "+" : "") << fmt(shift) << ")" << (shift_ok ? "" : " [shift]") << "; UFR TUAP " << fmt(tuap->ufr)
      << " random " << fmt(rnd->ufr) << (ufr_ok ? "" : " [UFR]") << (crafted ? "" : "; NoResult");
    detail(o.str());
    std::ostringstream draws;
    draws << "  random draws T1 TFR:";
    for (double v : rnd->draw_tfr) draws << ' ' << fmt(v);
    detail(draws.str());
    pass = pass && da_ok && size_ok && tfr_ok && shift_ok && ufr_ok;
  }
  detail("runtime " + fmt(secs, 1) + " s");
  verdict(3, pass && secs < kAttackSeconds,
          "calibrated TUAP reaches T1 TFR >= 75 while the size-matched random baseline stays within 5 points");
}

void determinism() {
  const Setting& s = setting();
  const ResultTable again = run_whitebox(s.plan);
  const bool same = again == whitebox_table && results_csv(again) == results_csv(whitebox_table);
  detail("rerun of " + std::to_string(whitebox_table.rows.size()) + " white-box rows: " +
         (same ? "bit-identical" : "DIFFERENT"));
  verdict(7, same, "rerunning every experiment cell with the same config and seed reproduces all numbers bit-exactly");
}

// --- 4 ----------------------------------------------------------------------------

void transferability() {
  const Setting& s = setting();
  ExperimentPlan plan = s.plan;
  const ResultTable table = run_transfer(plan);
  const TransferMatrix m = transfer_matrix(table, s.run.source.symbol);
  bool pass = true;
  for (std::size_t src = 0; src < m.archs.size(); ++src) {
    if (!m.crafted[src]) {
      detail(m.archs[src] + ": NoResult, no transfer perturbation");
      pass = false;
      continue;
    }
    for (std::size_t dst = 0; dst < m.archs.size(); ++dst) {
      if (src == dst) continue;
      const double gain = m.tfr[src][dst] - m.clean_tfr[dst];
      const bool ok = gain >= kTransferGain;
      const ResultRow* t1 = nullptr;
      for (const auto& r : table.rows)
        if (r.source == m.archs[src] && r.model == m.archs[dst] && r.test_set == "T1") t1 = &r;
      const ResultRow* c1 = nullptr;
      for (const auto& r : table.rows)
        if (r.source.empty() && r.model == m.archs[dst] && r.test_set == "T1") c1 = &r;
      std::ostringstream o;
      o << m.archs[src] << " -> " << m.archs[dst] << ": TFR " << fmt(m.tfr[src][dst]) << " vs clean "
        << fmt(m.clean_tfr[dst]) << " (gain " << fmt(gain) << ", mean over T1-T6)";
      if (t1 && c1) o << "; T1 " << fmt(t1->tfr) << " vs " << fmt(c1->tfr);
      o << (ok ? "" : "  [below +20]");
      detail(o.str());
      pass = pass && ok;
    }
  }
  verdict(4, pass, "a TUAP crafted on any arch lifts TFR by >= 20 points on both other archs");
}

// --- 5 ----------------------------------------------------------------------------

void defenses() {
  const Setting& s = setting();
  bool retrain_ok = true;
  Offsets dnn_tuap = Offsets::Zero();
  bool have_tuap = false;
  for (std::size_t a = 0; a < kAllArchs.size(); ++a) {
    const TrainedModel& m = s.models[a];
    const CalibratedAttack c = craft_for(s.plan, s.run, m);
    const auto* t = std::get_if<Tuap>(&c.result);
    if (!t) {
      detail(to_string(kAllArchs[a]) + ": NoResult, retraining not evaluated");
      retrain_ok = false;
      continue;
    }
    if (!have_tuap) {
      dnn_tuap = t->offsets;
      have_tuap = true;
    }
    RetrainConfig rc;
    rc.fractions = {0.0, kRetrainFraction};
    rc.training = s.plan.training;
    const RetrainReport r = adversarial_retrain(m, s.run.split.train, *t, s.run.split.tests, rc);
    const RetrainCell& base = r.cells[0];
    const RetrainCell& adv = r.cells[1];
    const bool ok = base.status == "ok" && adv.status == "ok" && adv.mean_tfr <= base.mean_tfr - kRetrainTfrDrop &&
                    adv.mean_da <= base.mean_da - kRetrainDaDrop;
    detail(r.arch + " retraining phi 0 -> 0.4: mean TFR " + fmt(base.mean_tfr) + " -> " + fmt(adv.mean_tfr) +
           ", mean DA " + fmt(base.mean_da) + " -> " + fmt(adv.mean_da) + (ok ? "" : "  [below required drop]"));
    retrain_ok = retrain_ok && ok;
  }

  bool broker_ok = false;
  if (have_tuap) {
    const StockSeries& clean = s.run.series;
    const std::vector<StockSeries> benign{clean, clean};
    const FilterResult quiet = multi_broker_filter(benign, kBrokerTolerance);
    const std::vector<StockSeries> attacked{clean, perturb_stream(clean, dnn_tuap)};
    const FilterResult loud = multi_broker_filter(attacked, kBrokerTolerance);
    const double flagged = 100.0 * static_cast<double>(loud.mismatches.size()) / static_cast<double>(loud.minutes);
    const auto small = std::count_if(dnn_tuap.begin(), dnn_tuap.end(),
                                     [](double o) { return std::abs(o) <= kBrokerTolerance; });
    detail("cross-check at 0.005%: identical feeds flag " + std::to_string(quiet.mismatches.size()) + " of " +
           std::to_string(quiet.minutes) + " minutes; TUAP feed flags " + fmt(flagged) + "% (" +
           std::to_string(small) + " of 30 offsets have |o| <= 0.005%)");
    broker_ok = quiet.mismatches.empty() && loud.mismatches.size() == loud.minutes;
  }
  verdict(5, retrain_ok && broker_ok,
          "retraining at phi 0.4 cuts TFR by >= 10 and DA by >= 5; cross-check flags every TUAP minute and no benign one");
}

// --- 6 ----------------------------------------------------------------------------

/// TUAP_REFERENCE_DATA="SYM:category:/path.csv,..." enables the check.
void reference_dataset() {
  const char* env = std::getenv("TUAP_REFERENCE_DATA");
  if (env == nullptr || std::string(env).empty()) {
    std::cout << "SKIP criterion 6: dataset-gated reproduction; set TUAP_REFERENCE_DATA to the original minute data"
              << std::endl;
    return;
  }
  ExperimentPlan plan;
  plan.stocks.clear();
  for (const auto& item : io::split(env, ',')) plan.stocks.push_back(parse_stock(io::trim(item)));
  plan.reference_calendar = true;
  plan.attack.delta = kDelta;
  double train_da = 0.0, test_da = 0.0;
  int n = 0;
  for (const auto& stock : plan.stocks) {
    const StockRun run = prepare_stock(plan, stock);
    for (ArchKind k : plan.models) {
      const TrainedModel m = train_for(plan, run, k);
      train_da += directional_accuracy(m, run.split.train).da;
      double d = 0.0;
      for (const auto& t : run.split.tests) d += directional_accuracy(m, t).da / kTestSets;
      test_da += d;
      ++n;
    }
  }
  train_da /= n;
  test_da /= n;
  const ResultTable t = run_whitebox(plan);
  const double tfr = mean_metric(t, "", "", "", "", Condition::tuap, &ResultRow::tfr);
  bool pass = train_da >= 66.6 - 3 && train_da <= 67.2 + 3 && test_da >= 65.6 - 3 && test_da <= 68.3 + 3 && tfr >= 85;
  detail("DA train " + fmt(train_da) + ", test " + fmt(test_da) + "; white-box TFR " + fmt(tfr));
  for (const auto& c : summarize_categories(t))
    if (c.category == "low") {
      detail("low-price category TFR " + fmt(c.tuap_tfr));
      pass = pass && std::abs(c.tuap_tfr - 93.93) <= 5.0;
    }
  verdict(6, pass, "reference-data reproduction of DA, white-box TFR and low-category TFR");
}

}  // namespace

int main() {
  try {
    std::cout << "acceptance suite, synthetic stock SYN, plan seed " << base_plan().seed << std::endl;
    gradient_suite();
    crafting_contract();
    synthetic_attack();
    transferability();
    defenses();
    reference_dataset();
    determinism();
  } catch (const std::exception& e) {
    std::cout << "FAIL: unexpected error: " << e.what() << std::endl;
    return 1;
  }
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
