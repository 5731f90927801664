#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "haco/risk_model.hpp"
#include "haco/types.hpp"

namespace haco {

struct CalibrationResult {
  double alpha = 0.0;
  double tau = 0.0;
  size_t calib_size = 0;            // M
  std::vector<double> scores_sorted;  // ascending
  size_t rank_used = 0;             // 1-based; tau = scores_sorted[rank_used - 1]
  // Set when ⌈(M+1)(1−α)⌉ exceeds M, i.e. M is too small for the requested
  // coverage and the finite-sample guarantee no longer holds at level α.
  bool guarantee_degraded = false;
};

// τ = the ⌈(M+1)(1−α)⌉-th smallest calibration score, clamped to the M-th.
// Under exchangeability a fresh score lands ≤ τ with probability ≥ 1−α.
CalibrationResult calibrate_threshold(std::span<const double> calib_scores, double alpha);

// mask[i] = scores[i] < tau. Scores at or above τ are unsafe (boundary
// excluded on purpose: the masking rule is p̂ ≥ τ).
std::vector<uint8_t> mask_from_scores(std::span<const double> scores, double tau);

// Scores every step of ds with the model and applies the threshold.
std::vector<uint8_t> apply_gate(const Dataset& ds, const RiskModel& model,
                                const CalibrationResult& cal);

struct CoveragePoint {
  double alpha = 0.0;
  double tau = 0.0;
  double safe_fraction = 0.0;  // fraction of eval scores strictly below tau
};

// One row per α. alphas must be strictly increasing inside (0,1). Note the
// quantile rule makes τ and safe_fraction non-increasing along ascending α
// (they grow with the coverage level 1−α).
std::vector<CoveragePoint> coverage_curve(std::span<const double> calib_scores,
                                          std::span<const double> alphas,
                                          std::span<const double> eval_scores);

struct SafetyImpact {
  double harm_rate_all = 0.0;
  double harm_rate_safe = 0.0;
  double absolute_reduction = 0.0;
  // Unset when harm_rate_all is 0 (undefined ratio; serialized as null).
  std::optional<double> relative_reduction;
  double safe_fraction = 0.0;
};

// Plain means: harm rate overall vs within the mask, plus the reductions.
SafetyImpact safety_impact(std::span<const uint8_t> harm, std::span<const uint8_t> mask);

}  // namespace haco
