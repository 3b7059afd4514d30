#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <filesystem>
#include <span>
#include <vector>

#include "tuap/error.hpp"
#include "tuap/market_data.hpp"

namespace tuap {

inline constexpr int kGroupSize = 5;
inline constexpr int kGroups = 6;
inline constexpr int kWindowLength = kGroupSize * kGroups;  // 30 closes
inline constexpr int kFeatureCount = 17;

// Layout of a feature vector.
inline constexpr int kReturnsOffset = 0;  // log(avg_g / avg_{g-1}) for the last five groups
inline constexpr int kStdsOffset = 5;     // population std of each of the last five groups
inline constexpr int kTrendsOffset = 10;  // least-squares slope of each of the last five groups
inline constexpr int kMinuteIndex = 15;   // (minute of hour) / 60
inline constexpr int kHourIndex = 16;     // (hour of day) / 24

template <typename Scalar>
using FeatureVectorT = Eigen::Matrix<Scalar, kFeatureCount, 1>;
using FeatureVector = FeatureVectorT<double>;

template <typename Scalar>
using ClosesT = Eigen::Matrix<Scalar, kWindowLength, 1>;
using Closes = ClosesT<double>;

/// d(feature) / d(close), one row per feature.
using FeatureJacobian = Eigen::Matrix<double, kFeatureCount, kWindowLength>;

template <typename Scalar>
struct GroupStats {
  Scalar avg;
  Scalar std;
  Scalar trend;  // price per minute
};

/// Least-squares slope weights for x = 0..4 (centred x divided by sum of squares).
template <typename Scalar>
Eigen::Matrix<Scalar, kGroupSize, 1> trend_weights() {
  Eigen::Matrix<Scalar, kGroupSize, 1> w;
  w << Scalar(-0.2), Scalar(-0.1), Scalar(0), Scalar(0.1), Scalar(0.2);
  return w;
}

template <typename Derived>
GroupStats<typename Derived::Scalar> group_stats(const Eigen::MatrixBase<Derived>& closes) {
  using Scalar = typename Derived::Scalar;
  static_assert(Derived::SizeAtCompileTime == kGroupSize || Derived::SizeAtCompileTime == Eigen::Dynamic);
  if (closes.size() != kGroupSize) throw ValidationError("group_stats needs exactly 5 closes");
  if (!(closes.array() > Scalar(0)).all()) throw ValidationError("group_stats: non-positive price");
  const Scalar avg = closes.mean();
  const Scalar var = (closes.array() - avg).square().mean();
  const Scalar trend = trend_weights<Scalar>().dot(closes.derived().template head<kGroupSize>());
  using std::sqrt;
  return {avg, sqrt(var), trend};
}

inline double minute_feature(Minutes t) {
  const Minutes m = t - day_of(t) * kMinutesPerDay;
  return static_cast<double>(m % 60) / 60.0;
}
inline double hour_feature(Minutes t) {
  const Minutes m = t - day_of(t) * kMinutesPerDay;
  return static_cast<double>(m / 60) / 24.0;
}

/// Features of a 30-close window whose last bar is at `anchor`.
template <typename Derived>
FeatureVectorT<typename Derived::Scalar> features_from_closes(const Eigen::MatrixBase<Derived>& closes,
                                                              Minutes anchor) {
  using Scalar = typename Derived::Scalar;
  if (closes.size() != kWindowLength) throw ValidationError("feature window needs 30 closes");
  FeatureVectorT<Scalar> f;
  Scalar prev_avg{};
  for (int g = 0; g < kGroups; ++g) {
    const auto s = group_stats(closes.derived().template segment<kGroupSize>(g * kGroupSize));
    if (g > 0) {
      using std::log;
      f(kReturnsOffset + g - 1) = log(s.avg / prev_avg);
      f(kStdsOffset + g - 1) = s.std;
      f(kTrendsOffset + g - 1) = s.trend;
    }
    prev_avg = s.avg;
  }
  f(kMinuteIndex) = Scalar(minute_feature(anchor));
  f(kHourIndex) = Scalar(hour_feature(anchor));
  return f;
}

Closes window_closes(const WindowSample& window);
FeatureVector extract_features(const WindowSample& window);

/// Variance offset used where the std derivative would otherwise be singular.
inline constexpr double kStdSmoothing = 1e-12;

/// Exact Jacobian of the features with respect to the 30 closes; the std
/// rows use sqrt(var + kStdSmoothing). Time-feature rows are zero.
FeatureJacobian feature_input_jacobian(const Closes& closes);
FeatureJacobian feature_input_jacobian(const WindowSample& window);

/// Per-feature z-score fitted on a training split.
class Normalizer {
 public:
  static constexpr double kStdFloor = 1e-8;

  Normalizer() = default;
  Normalizer(FeatureVector mean, FeatureVector std);

  /// Throws ValidationError with fewer than two vectors.
  static Normalizer fit(std::span<const FeatureVector> train);

  FeatureVector apply(const FeatureVector& x) const { return (x - mean_).cwiseQuotient(std_); }
  FeatureVector inverse(const FeatureVector& z) const { return z.cwiseProduct(std_) + mean_; }
  /// Diagonal of d(apply)/dx.
  FeatureVector scale() const { return std_.cwiseInverse(); }

  const FeatureVector& mean() const { return mean_; }
  const FeatureVector& std() const { return std_; }
  bool fitted() const { return fitted_; }

 private:
  FeatureVector mean_ = FeatureVector::Zero();
  FeatureVector std_ = FeatureVector::Ones();
  bool fitted_ = false;
};

std::vector<FeatureVector> extract_all(std::span<const WindowSample> windows);

/// 17 feature columns, then label, symbol and anchor timestamp.
void save_features_csv(const std::filesystem::path& path, std::span<const WindowSample> windows);

}  // namespace tuap
