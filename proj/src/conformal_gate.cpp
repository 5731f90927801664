#include "haco/conformal_gate.hpp"

#include <algorithm>
#include <cmath>

#include "haco/errors.hpp"

namespace haco {

namespace {

// ⌈v⌉ with a guard against values like 18.000000000000004 that are meant to
// be integers but picked up one ulp of product error.
size_t guarded_ceil_rank(double v) {
  const double guarded = v - (1e-9 + std::abs(v) * 1e-12);
  return static_cast<size_t>(std::ceil(guarded));
}

struct RankInfo {
  size_t rank = 0;  // clamped to [1, m]
  bool degraded = false;
};

RankInfo conformal_rank(size_t m, double alpha) {
  const double v = static_cast<double>(m + 1) * (1.0 - alpha);
  size_t rank = guarded_ceil_rank(v);
  RankInfo info;
  info.degraded = rank > m;
  info.rank = std::min(std::max<size_t>(rank, 1), m);
  return info;
}

}  // namespace

CalibrationResult calibrate_threshold(std::span<const double> calib_scores, double alpha) {
  if (calib_scores.empty()) throw EmptyCalibrationError();
  if (!(alpha > 0.0 && alpha < 1.0)) throw InvalidAlphaError(alpha);

  CalibrationResult result;
  result.alpha = alpha;
  result.calib_size = calib_scores.size();
  result.scores_sorted.assign(calib_scores.begin(), calib_scores.end());
  std::sort(result.scores_sorted.begin(), result.scores_sorted.end());

  const RankInfo info = conformal_rank(result.calib_size, alpha);
  result.rank_used = info.rank;
  result.guarantee_degraded = info.degraded;
  result.tau = result.scores_sorted[result.rank_used - 1];
  return result;
}

std::vector<uint8_t> mask_from_scores(std::span<const double> scores, double tau) {
  std::vector<uint8_t> mask(scores.size());
  for (size_t i = 0; i < scores.size(); ++i) mask[i] = scores[i] < tau ? 1 : 0;
  return mask;
}

std::vector<uint8_t> apply_gate(const Dataset& ds, const RiskModel& model,
                                const CalibrationResult& cal) {
  const std::vector<double> scores = score_dataset(model, ds);
  return mask_from_scores(scores, cal.tau);
}

std::vector<CoveragePoint> coverage_curve(std::span<const double> calib_scores,
                                          std::span<const double> alphas,
                                          std::span<const double> eval_scores) {
  if (calib_scores.empty()) throw EmptyCalibrationError();
  if (eval_scores.empty()) throw EmptyDatasetError("coverage curve needs evaluation scores");
  for (size_t i = 0; i < alphas.size(); ++i) {
    if (!(alphas[i] > 0.0 && alphas[i] < 1.0)) throw InvalidAlphaError(alphas[i]);
    if (i > 0 && !(alphas[i] > alphas[i - 1])) {
      throw InvalidAlphaError(alphas[i]);  // grid must be strictly increasing
    }
  }

  std::vector<double> calib_sorted(calib_scores.begin(), calib_scores.end());
  std::sort(calib_sorted.begin(), calib_sorted.end());
  std::vector<double> eval_sorted(eval_scores.begin(), eval_scores.end());
  std::sort(eval_sorted.begin(), eval_sorted.end());

  std::vector<CoveragePoint> curve;
  curve.reserve(alphas.size());
  for (double alpha : alphas) {
    const RankInfo info = conformal_rank(calib_sorted.size(), alpha);
    const double tau = calib_sorted[info.rank - 1];
    const auto below =
        std::lower_bound(eval_sorted.begin(), eval_sorted.end(), tau) - eval_sorted.begin();
    curve.push_back(
        {alpha, tau, static_cast<double>(below) / static_cast<double>(eval_sorted.size())});
  }
  return curve;
}

SafetyImpact safety_impact(std::span<const uint8_t> harm, std::span<const uint8_t> mask) {
  if (harm.size() != mask.size()) throw InvalidConfigError("harm/mask lengths differ");
  if (harm.empty()) throw EmptyDatasetError("safety impact needs at least one step");

  size_t n_safe = 0, harm_all = 0, harm_safe = 0;
  for (size_t i = 0; i < harm.size(); ++i) {
    harm_all += harm[i] ? 1 : 0;
    if (mask[i]) {
      ++n_safe;
      harm_safe += harm[i] ? 1 : 0;
    }
  }
  if (n_safe == 0) throw EmptySafeSetError();

  SafetyImpact impact;
  impact.harm_rate_all = static_cast<double>(harm_all) / static_cast<double>(harm.size());
  impact.harm_rate_safe = static_cast<double>(harm_safe) / static_cast<double>(n_safe);
  impact.absolute_reduction = impact.harm_rate_all - impact.harm_rate_safe;
  if (impact.harm_rate_all > 0.0) {
    impact.relative_reduction = 1.0 - impact.harm_rate_safe / impact.harm_rate_all;
  }
  impact.safe_fraction = static_cast<double>(n_safe) / static_cast<double>(harm.size());
  return impact;
}

}  // namespace haco
