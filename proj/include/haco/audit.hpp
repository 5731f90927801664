#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "haco/types.hpp"

namespace haco {

// Discounted return of one episode: Σ γ^k · r_k from the episode's first step.
double episodic_return(const Dataset& ds, const Episode& ep, double gamma);

// All episodes, in episode order.
std::vector<double> episode_returns(const Dataset& ds, double gamma);

struct BootstrapCi {
  double mean = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
};

// Percentile interval of the resampled mean; replicate j draws from its own
// derived stream, so the result is independent of evaluation order.
BootstrapCi bootstrap_ci(std::span<const double> values, int B, double level, uint64_t seed);

// Two-sided p-value for a difference in means, both groups resampled
// independently: p = 2·min(P(Δ* ≤ 0), P(Δ* ≥ 0)) clipped to [1/B, 1].
// Comparing a group against itself (same storage) is 1.0 by definition.
double bootstrap_pvalue(std::span<const double> group, std::span<const double> reference, int B,
                        uint64_t seed);

// Standardized mean difference with the pooled sample-variance denominator:
// (mean_g − mean_r) / √(((n_g−1)s_g² + (n_r−1)s_r²) / (n_g + n_r − 2)).
double cohens_d(std::span<const double> group, std::span<const double> reference);

struct CalibrationBin {
  int bin_index = 0;
  double mean_predicted = 0.0;
  double observed_rate = 0.0;
  size_t n = 0;
  double wilson_low = 0.0;
  double wilson_high = 0.0;
};

// Equal-count bins over the predicted scores (ranked ascending, ties broken
// by position); per-bin Wilson interval for the observed rate at critical
// value z, clamped to [0, 1].
std::vector<CalibrationBin> calibration_bins(std::span<const double> predicted,
                                             std::span<const uint8_t> observed, int B_bins,
                                             double z);

enum class GroupDim { Age, Sex, Race };
std::string to_string(GroupDim dim);

struct SubgroupSummary {
  GroupDim group = GroupDim::Age;
  std::string level;
  size_t n = 0;  // episodes
  double mean = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  std::string reference_level;
  double p_value = 1.0;
  bool is_reference = false;
};

// Per demographic dimension: group episodes by the patient's level, pick the
// largest-n level as reference (ties to the lower enum value), and report
// mean, bootstrap CI, and p-value against the reference. Unknown sex is
// folded into Male before grouping; Unknown age and race stay distinct
// levels. returns must hold one value per episode, in episode order.
std::vector<SubgroupSummary> subgroup_audit(const Dataset& ds, std::span<const double> returns,
                                            int B_ci, int B_p, uint64_t seed);

}  // namespace haco
