#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "tuap/alpha_models.hpp"
#include "tuap/features.hpp"

namespace tuap {

/// Relative close offsets, one per bar of the window (fraction of close).
using Offsets = Eigen::Matrix<double, kWindowLength, 1>;

struct Tuap {
  Offsets offsets = Offsets::Zero();
  int target_class = 1;
  double epsilon = 0.0;  // L2 budget on offsets
  double delta = 0.0;    // required craft-set TFR, percent
  double achieved_tfr = 0.0;
  std::uint64_t seed = 0;
  int iterations = 0;  // outer iterations used
  std::uint64_t craft_fingerprint = 0;
};

struct AttackConfig {
  double epsilon = 0.0;
  double delta = 90.0;
  int max_outer_iterations = 50;
  std::size_t batch_size = 30;
  double step_fraction = 0.1;  // BIM step alpha = step_fraction * epsilon
  int inner_iterations = 20;
  std::uint64_t seed = 1;

  double alpha() const { return step_fraction * epsilon; }
  void validate() const;
};

/// Crafting gave up after `iterations` outer passes.
struct NoResult {
  int iterations = 0;
  double best_tfr = 0.0;  // craft-set TFR of the last iterate
  Offsets last = Offsets::Zero();
  std::string advice;
};

using CraftResult = std::variant<Tuap, NoResult>;

struct AttackMetrics {
  double tfr = 0.0;
  double ufr = 0.0;
  double size_pct = 0.0;
};

/// close' = close * (1 + offset); high/low widen to keep the bar valid.
/// Open, volume, label and timestamps are untouched.
WindowSample apply_perturbation(const WindowSample& window, const Offsets& offsets);
std::vector<WindowSample> apply_perturbation(std::span<const WindowSample> windows, const Offsets& offsets);

/// Percent of samples predicted as `target` after adding `offsets`.
double tfr(const TrainedModel& model, std::span<const WindowSample> samples, const Offsets& offsets, int target);
double clean_tfr(const TrainedModel& model, std::span<const WindowSample> samples, int target);
/// Percent of samples whose prediction differs from the clean prediction.
double ufr(const TrainedModel& model, std::span<const WindowSample> samples, const Offsets& offsets);
/// Mean |close' - close| / close over samples and bars, in percent.
double perturbation_size(const Offsets& offsets, std::span<const WindowSample> samples);
inline double perturbation_size(const Offsets& offsets) { return 100.0 * offsets.cwiseAbs().mean(); }
AttackMetrics evaluate_attack(const TrainedModel& model, std::span<const WindowSample> samples,
                              const Offsets& offsets, int target);

template <typename Derived>
typename Derived::PlainObject project_l2(const Eigen::MatrixBase<Derived>& v, double epsilon) {
  if (!(epsilon > 0.0)) throw ValidationError("projection radius must be positive");
  const auto norm = v.norm();
  if (norm <= epsilon) return v;
  return v * (epsilon / norm);
}

/// Targeted BIM with early stop: steps r against the normalised mean
/// per-sample gradient of the target-class loss until the batch TFR under
/// v + r reaches delta or the iterations run out. Returns r.
Offsets bim_step(const TrainedModel& model, std::span<const WindowSample> batch, const Offsets& v, int target,
                 double alpha, int inner_iterations, double delta);

/// Called after every outer iteration with (iteration, v, craft-set TFR).
using CraftObserver = std::function<void(int, const Offsets&, double)>;

/// Universal perturbation search over `craft_set`. Throws ValidationError
/// when the craft set is not class-balanced.
CraftResult craft_tuap(std::span<const WindowSample> craft_set, int target, const TrainedModel& model,
                       const AttackConfig& config, const CraftObserver& observer = {});

/// Gaussian direction scaled to L2 norm `epsilon`.
Offsets random_offsets(double epsilon, std::uint64_t seed);
Tuap random_perturbation(double epsilon, std::uint64_t seed, int target_class = 1);

struct CalibratedAttack {
  CraftResult result;
  double epsilon = 0.0;
  double size_pct = 0.0;  // realised on the returned TUAP
  int rounds = 0;
  bool converged = false;  // size within tolerance of the target
};

/// Rescales epsilon by target/realised size until the crafted TUAP's mean
/// absolute size is within `tolerance` (relative) of `target_size_pct`.
CalibratedAttack calibrate_and_craft(std::span<const WindowSample> craft_set, int target, const TrainedModel& model,
                                     AttackConfig config, double target_size_pct = 0.02, double tolerance = 0.1,
                                     int max_rounds = 8);

std::uint64_t craft_fingerprint(std::span<const WindowSample> craft_set);

std::vector<std::uint8_t> serialize_tuap(const Tuap& tuap);
Tuap deserialize_tuap(std::vector<std::uint8_t> bytes);
void save_tuap(const Tuap& tuap, const std::filesystem::path& path);
Tuap load_tuap(const std::filesystem::path& path);

}  // namespace tuap
