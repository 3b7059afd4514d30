#include "tuap/features.hpp"

#include <algorithm>
#include <sstream>

#include "tuap/io.hpp"

namespace tuap {

Closes window_closes(const WindowSample& window) {
  if (window.bars.size() != static_cast<std::size_t>(kWindowLength))
    throw ValidationError("window must hold 30 bars, got " + std::to_string(window.bars.size()));
  Closes c;
  for (int i = 0; i < kWindowLength; ++i) c(i) = window.bars[static_cast<std::size_t>(i)].close;
  return c;
}

FeatureVector extract_features(const WindowSample& window) {
  return features_from_closes(window_closes(window), window.anchor_timestamp);
}

FeatureJacobian feature_input_jacobian(const Closes& closes) {
  if (!(closes.array() > 0.0).all()) throw ValidationError("feature window: non-positive price");
  FeatureJacobian jac = FeatureJacobian::Zero();
  const Eigen::Matrix<double, kGroupSize, 1> slope = trend_weights<double>();
  Eigen::Matrix<double, kGroups, 1> avg;
  for (int g = 0; g < kGroups; ++g) avg(g) = closes.segment<kGroupSize>(g * kGroupSize).mean();

  for (int g = 1; g < kGroups; ++g) {
    const int row = g - 1;
    const int col = g * kGroupSize;
    // log(avg_g) - log(avg_{g-1}); each avg is the mean of five closes.
    jac.block<1, kGroupSize>(kReturnsOffset + row, col).setConstant(1.0 / (kGroupSize * avg(g)));
    jac.block<1, kGroupSize>(kReturnsOffset + row, col - kGroupSize)
        .setConstant(-1.0 / (kGroupSize * avg(g - 1)));

    const auto group = closes.segment<kGroupSize>(col);
    const Eigen::Matrix<double, kGroupSize, 1> centred = group.array() - avg(g);
    const double smoothed_std = std::sqrt(centred.squaredNorm() / kGroupSize + kStdSmoothing);
    jac.block<1, kGroupSize>(kStdsOffset + row, col) = centred.transpose() / (kGroupSize * smoothed_std);

    jac.block<1, kGroupSize>(kTrendsOffset + row, col) = slope.transpose();
  }
  return jac;
}

FeatureJacobian feature_input_jacobian(const WindowSample& window) {
  return feature_input_jacobian(window_closes(window));
}

Normalizer::Normalizer(FeatureVector mean, FeatureVector std)
    : mean_(std::move(mean)), std_(std.cwiseMax(kStdFloor)), fitted_(true) {}

Normalizer Normalizer::fit(std::span<const FeatureVector> train) {
  if (train.size() < 2) throw ValidationError("normalizer needs at least two training vectors");
  const double n = static_cast<double>(train.size());
  FeatureVector mean = FeatureVector::Zero();
  for (const auto& f : train) mean += f;
  mean /= n;
  // A constant column keeps its exact value so it normalizes to exactly 0.
  for (int i = 0; i < kFeatureCount; ++i) {
    const bool constant = std::all_of(train.begin(), train.end(), [&](const FeatureVector& f) {
      return f(i) == train.front()(i);
    });
    if (constant) mean(i) = train.front()(i);
  }
  FeatureVector var = FeatureVector::Zero();
  for (const auto& f : train) var += (f - mean).cwiseAbs2();
  var /= n;
  return Normalizer(mean, var.cwiseSqrt());
}

std::vector<FeatureVector> extract_all(std::span<const WindowSample> windows) {
  std::vector<FeatureVector> out;
  out.reserve(windows.size());
  for (const auto& w : windows) out.push_back(extract_features(w));
  return out;
}

void save_features_csv(const std::filesystem::path& path, std::span<const WindowSample> windows) {
  std::ostringstream out;
  for (int i = 0; i < 5; ++i) out << "ret" << i + 1 << ',';
  for (int i = 0; i < 5; ++i) out << "std" << i + 1 << ',';
  for (int i = 0; i < 5; ++i) out << "trend" << i + 1 << ',';
  out << "minute,hour,label,symbol,timestamp\n";
  for (const auto& w : windows) {
    const FeatureVector f = extract_features(w);
    for (int i = 0; i < kFeatureCount; ++i) out << io::format_double(f(i)) << ',';
    out << w.label << ',' << w.symbol << ',' << format_timestamp(w.anchor_timestamp) << '\n';
  }
  io::write_text_atomic(path, out.str());
}

}  // namespace tuap
