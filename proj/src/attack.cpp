#include "tuap/attack.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>

#include "tuap/error.hpp"
#include "tuap/io.hpp"

namespace tuap {

namespace {

constexpr char kTuapMagic[] = "TUAPPRT1";
constexpr std::uint32_t kTuapVersion = 1;

double percent(std::size_t hits, std::size_t total) {
  return 100.0 * static_cast<double>(hits) / static_cast<double>(total);
}

double target_rate(std::span<const int> predictions, int target) {
  if (predictions.empty()) throw ValidationError("fooling rate of an empty set");
  return percent(static_cast<std::size_t>(std::count(predictions.begin(), predictions.end(), target)),
                 predictions.size());
}

void check_target(int target) {
  if (target != 0 && target != 1) throw ValidationError("target class must be 0 or 1");
}

void check_finite(const Offsets& g, const char* what) {
  if (!g.allFinite()) throw NumericalError(std::string("crafting aborted: non-finite ") + what);
}

}  // namespace

void AttackConfig::validate() const {
  if (!(epsilon > 0.0) || !std::isfinite(epsilon)) throw ValidationError("epsilon must be positive");
  if (!(delta >= 0.0 && delta <= 100.0)) throw ValidationError("delta must lie in [0, 100]");
  if (max_outer_iterations < 1) throw ValidationError("max outer iterations must be at least 1");
  if (batch_size < 1) throw ValidationError("batch size must be at least 1");
  if (!(step_fraction >= 0.0)) throw ValidationError("BIM step fraction must be non-negative");
  if (inner_iterations < 0) throw ValidationError("BIM inner iterations must be non-negative");
}

WindowSample apply_perturbation(const WindowSample& window, const Offsets& offsets) {
  if (window.bars.size() != static_cast<std::size_t>(kWindowLength))
    throw ValidationError("perturbation length does not match the window");
  WindowSample out = window;
  for (int i = 0; i < kWindowLength; ++i) {
    MinuteBar& b = out.bars[static_cast<std::size_t>(i)];
    const double c = b.close * (1.0 + offsets(i));
    if (!(c > 0.0)) throw ValidationError("perturbation destroys positivity");
    b.close = c;
    b.high = std::max(b.high, c);
    b.low = std::min(b.low, c);
  }
  out.anchor_close = out.bars.back().close;
  return out;
}

std::vector<WindowSample> apply_perturbation(std::span<const WindowSample> windows, const Offsets& offsets) {
  std::vector<WindowSample> out;
  out.reserve(windows.size());
  for (const auto& w : windows) out.push_back(apply_perturbation(w, offsets));
  return out;
}

double tfr(const TrainedModel& model, std::span<const WindowSample> samples, const Offsets& offsets, int target) {
  check_target(target);
  return target_rate(predict_labels(model, apply_perturbation(samples, offsets)), target);
}

double clean_tfr(const TrainedModel& model, std::span<const WindowSample> samples, int target) {
  check_target(target);
  return target_rate(predict_labels(model, samples), target);
}

double ufr(const TrainedModel& model, std::span<const WindowSample> samples, const Offsets& offsets) {
  if (samples.empty()) throw ValidationError("fooling rate of an empty set");
  const auto clean = predict_labels(model, samples);
  const auto adv = predict_labels(model, apply_perturbation(samples, offsets));
  std::size_t flips = 0;
  for (std::size_t i = 0; i < clean.size(); ++i) flips += clean[i] != adv[i] ? 1 : 0;
  return percent(flips, clean.size());
}

double perturbation_size(const Offsets& offsets, std::span<const WindowSample> samples) {
  if (samples.empty()) throw ValidationError("perturbation size of an empty set");
  double total = 0.0;
  for (const auto& w : samples) {
    const WindowSample p = apply_perturbation(w, offsets);
    for (std::size_t i = 0; i < w.bars.size(); ++i)
      total += std::abs(p.bars[i].close - w.bars[i].close) / w.bars[i].close;
  }
  return 100.0 * total / static_cast<double>(samples.size() * static_cast<std::size_t>(kWindowLength));
}

AttackMetrics evaluate_attack(const TrainedModel& model, std::span<const WindowSample> samples,
                              const Offsets& offsets, int target) {
  check_target(target);
  const auto clean = predict_labels(model, samples);
  const auto adv = predict_labels(model, apply_perturbation(samples, offsets));
  std::size_t flips = 0;
  for (std::size_t i = 0; i < clean.size(); ++i) flips += clean[i] != adv[i] ? 1 : 0;
  AttackMetrics m;
  m.tfr = target_rate(adv, target);
  m.ufr = percent(flips, clean.size());
  m.size_pct = perturbation_size(offsets, samples);
  return m;
}

Offsets bim_step(const TrainedModel& model, std::span<const WindowSample> batch, const Offsets& v, int target,
                 double alpha, int inner_iterations, double delta) {
  check_target(target);
  if (batch.empty()) throw ValidationError("BIM batch is empty");
  std::vector<Closes> base;
  base.reserve(batch.size());
  for (const auto& w : batch) base.push_back(window_closes(w));

  Offsets r = Offsets::Zero();
  std::vector<Closes> closes(batch.size());
  for (int it = 0; it < inner_iterations; ++it) {
    const Offsets total = v + r;
    for (std::size_t i = 0; i < batch.size(); ++i) closes[i] = base[i].cwiseProduct((1.0 + total.array()).matrix());
    const PriceGradients pg = price_gradients(model, batch, closes, target);
    if (target_rate(pg.predictions, target) >= delta) break;
    if (alpha == 0.0) break;

    // Samples already at the target would only pull the step toward
    // deeper confidence; the direction comes from the rest.
    Offsets mean = Offsets::Zero();
    for (std::size_t i = 0; i < batch.size(); ++i) {
      if (pg.predictions[i] == target) continue;
      // d loss / d offset = d loss / d close' * close
      const Offsets g = pg.gradients[i].cwiseProduct(base[i]);
      check_finite(g, "gradient");
      const double n = g.norm();
      if (n > 0.0) mean += g / n;
    }
    const double n = mean.norm();
    if (n == 0.0) break;
    r -= alpha * mean / n;
    check_finite(r, "step");
  }
  return r;
}

std::uint64_t craft_fingerprint(std::span<const WindowSample> craft_set) {
  io::ByteWriter w;
  for (const auto& s : craft_set) {
    w.str(s.symbol);
    w.u64(static_cast<std::uint64_t>(s.anchor_timestamp));
    w.u8(static_cast<std::uint8_t>(s.label));
    for (const auto& b : s.bars) w.f64(b.close);
  }
  const auto bytes = w.finish();
  return io::fnv1a64(bytes.data(), bytes.size() - 8);
}

CraftResult craft_tuap(std::span<const WindowSample> craft_set, int target, const TrainedModel& model,
                       const AttackConfig& config, const CraftObserver& observer) {
  config.validate();
  check_target(target);
  if (craft_set.empty()) throw ValidationError("craft set is empty");
  const auto ones = std::count_if(craft_set.begin(), craft_set.end(), [](const WindowSample& w) { return w.label == 1; });
  const auto zeros = static_cast<std::ptrdiff_t>(craft_set.size()) - ones;
  if (ones != zeros)
    throw ValidationError("craft set is not class-balanced: " + std::to_string(ones) + " increase vs " +
                          std::to_string(zeros) + " decrease");

  std::mt19937_64 rng(io::derive_seed(config.seed, 0x6372616674));
  std::vector<std::size_t> order(craft_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Offsets v = Offsets::Zero();
  double last_tfr = 0.0;

  for (int k = 1; k <= config.max_outer_iterations; ++k) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t n = std::min(config.batch_size, order.size() - start);
      std::vector<WindowSample> batch;
      batch.reserve(n);
      for (std::size_t i = 0; i < n; ++i) batch.push_back(craft_set[order[start + i]]);
      if (tfr(model, batch, v, target) < config.delta) {
        const Offsets r = bim_step(model, batch, v, target, config.alpha(), config.inner_iterations, config.delta);
        v = project_l2(v + r, config.epsilon);
      }
      if (v.norm() > config.epsilon * (1.0 + 1e-12))
        throw std::logic_error("perturbation left the epsilon ball after projection");
    }
    // Independent check on the whole craft set through the public pipeline.
    last_tfr = tfr(model, craft_set, v, target);
    if (observer) observer(k, v, last_tfr);
    if (last_tfr >= config.delta) {
      Tuap t;
      t.offsets = v;
      t.target_class = target;
      t.epsilon = config.epsilon;
      t.delta = config.delta;
      t.achieved_tfr = last_tfr;
      t.seed = config.seed;
      t.iterations = k;
      t.craft_fingerprint = craft_fingerprint(craft_set);
      return t;
    }
  }
  NoResult none;
  none.iterations = config.max_outer_iterations;
  none.best_tfr = last_tfr;
  none.last = v;
  none.advice = "no perturbation within epsilon reached TFR " + io::format_double(config.delta) + "% after " +
                std::to_string(config.max_outer_iterations) +
                " iterations (craft TFR " + io::format_double(last_tfr) +
                "%); consider a larger epsilon, a lower delta or more iterations";
  return none;
}

Offsets random_offsets(double epsilon, std::uint64_t seed) {
  if (!(epsilon > 0.0)) throw ValidationError("epsilon must be positive");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Offsets v;
  do {
    for (int i = 0; i < kWindowLength; ++i) v(i) = n(rng);
  } while (v.norm() == 0.0);
  return v * (epsilon / v.norm());
}

Tuap random_perturbation(double epsilon, std::uint64_t seed, int target_class) {
  Tuap t;
  t.offsets = random_offsets(epsilon, seed);
  t.epsilon = epsilon;
  t.target_class = target_class;
  t.seed = seed;
  return t;
}

CalibratedAttack calibrate_and_craft(std::span<const WindowSample> craft_set, int target, const TrainedModel& model,
                                     AttackConfig config, double target_size_pct, double tolerance, int max_rounds) {
  if (!(target_size_pct > 0.0)) throw ValidationError("target size must be positive");
  if (max_rounds < 1) throw ValidationError("calibration needs at least one round");
  // A vector whose entries all have magnitude s has mean |v| = s and norm s * sqrt(30).
  double eps = config.epsilon > 0.0 ? config.epsilon : target_size_pct / 100.0 * std::sqrt(double(kWindowLength));
  CalibratedAttack best;
  double best_gap = std::numeric_limits<double>::infinity();
  for (int round = 1; round <= max_rounds; ++round) {
    config.epsilon = eps;
    CraftResult res = craft_tuap(craft_set, target, model, config);
    const Offsets& v = std::holds_alternative<Tuap>(res) ? std::get<Tuap>(res).offsets : std::get<NoResult>(res).last;
    const double size = perturbation_size(v);
    const double gap = std::abs(size - target_size_pct) / target_size_pct;
    if (gap < best_gap) {
      best_gap = gap;
      best.result = std::move(res);
      best.epsilon = eps;
      best.size_pct = size;
    }
    best.rounds = round;
    if (gap <= tolerance || size == 0.0) break;
    eps *= target_size_pct / size;
  }
  best.converged = best_gap <= tolerance;
  return best;
}

std::vector<std::uint8_t> serialize_tuap(const Tuap& t) {
  io::ByteWriter w;
  w.bytes(std::string_view(kTuapMagic, 8));
  w.u32(kTuapVersion);
  w.u8(static_cast<std::uint8_t>(t.target_class));
  w.f64(t.epsilon);
  w.f64(t.delta);
  w.f64(t.achieved_tfr);
  w.u64(t.seed);
  w.u32(static_cast<std::uint32_t>(t.iterations));
  w.u64(t.craft_fingerprint);
  w.u32(kWindowLength);
  for (int i = 0; i < kWindowLength; ++i) w.f64(t.offsets(i));
  return w.finish();
}

Tuap deserialize_tuap(std::vector<std::uint8_t> bytes) {
  io::ByteReader r(std::move(bytes), "tuap file");
  if (r.bytes(8) != std::string(kTuapMagic, 8)) throw FormatError("tuap file: bad magic");
  const auto version = r.u32();
  if (version != kTuapVersion) throw FormatError("tuap file: version mismatch (file " + std::to_string(version) + ")");
  Tuap t;
  t.target_class = r.u8();
  t.epsilon = r.f64();
  t.delta = r.f64();
  t.achieved_tfr = r.f64();
  t.seed = r.u64();
  t.iterations = static_cast<int>(r.u32());
  t.craft_fingerprint = r.u64();
  if (r.u32() != kWindowLength) throw FormatError("tuap file: offset count mismatch");
  for (int i = 0; i < kWindowLength; ++i) t.offsets(i) = r.f64();
  if (!r.at_end()) throw FormatError("tuap file: trailing bytes");
  if (!t.offsets.allFinite()) throw FormatError("tuap file: non-finite offsets");
  return t;
}

void save_tuap(const Tuap& tuap, const std::filesystem::path& path) { io::write_file_atomic(path, serialize_tuap(tuap)); }

Tuap load_tuap(const std::filesystem::path& path) { return deserialize_tuap(io::read_file(path)); }

}  // namespace tuap
