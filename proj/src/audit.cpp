#include "haco/audit.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "haco/errors.hpp"
#include "haco/rng.hpp"

namespace haco {

namespace {

double mean_of(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// Variance with the n−1 denominator; callers guarantee n ≥ 2.
double sample_variance(std::span<const double> v) {
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size() - 1);
}

// Linear-interpolation quantile of an ascending-sorted vector.
double quantile_sorted(const std::vector<double>& sorted, double q) {
  const double h = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<size_t>(h);
  if (lo + 1 >= sorted.size()) return sorted.back();
  const double frac = h - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

double resampled_mean(std::span<const double> values, Rng& rng) {
  const size_t n = values.size();
  double s = 0.0;
  for (size_t i = 0; i < n; ++i) s += values[rng.below(n)];
  return s / static_cast<double>(n);
}

}  // namespace

double episodic_return(const Dataset& ds, const Episode& ep, double gamma) {
  double g = 1.0;
  double total = 0.0;
  for (size_t i = ep.begin; i < ep.end; ++i) {
    total += g * ds.steps[i].reward;
    g *= gamma;
  }
  return total;
}

std::vector<double> episode_returns(const Dataset& ds, double gamma) {
  std::vector<double> out;
  out.reserve(ds.episodes.size());
  for (const Episode& ep : ds.episodes) out.push_back(episodic_return(ds, ep, gamma));
  return out;
}

BootstrapCi bootstrap_ci(std::span<const double> values, int B, double level, uint64_t seed) {
  if (values.size() < 2) throw InsufficientDataError("bootstrap_ci needs at least two values");
  if (B < 100) throw InsufficientDataError("bootstrap_ci needs at least 100 replicates");
  if (!(level > 0.0) || !(level < 1.0))
    throw InvalidConfigError("bootstrap_ci: level must lie in (0, 1)");

  std::vector<double> means(static_cast<size_t>(B));
  for (int j = 0; j < B; ++j) {
    Rng rng(Rng::derive(seed, static_cast<uint64_t>(j)));
    means[static_cast<size_t>(j)] = resampled_mean(values, rng);
  }
  std::sort(means.begin(), means.end());
  BootstrapCi out;
  out.mean = mean_of(values);
  const double tail = (1.0 - level) / 2.0;
  out.ci_low = quantile_sorted(means, tail);
  out.ci_high = quantile_sorted(means, 1.0 - tail);
  return out;
}

double bootstrap_pvalue(std::span<const double> group, std::span<const double> reference, int B,
                        uint64_t seed) {
  if (group.empty() || reference.empty())
    throw InsufficientDataError("bootstrap_pvalue needs non-empty groups");
  if (B < 100) throw InsufficientDataError("bootstrap_pvalue needs at least 100 replicates");
  if (group.data() == reference.data() && group.size() == reference.size()) return 1.0;

  int n_le = 0;
  int n_ge = 0;
  for (int j = 0; j < B; ++j) {
    Rng rng(Rng::derive(seed, static_cast<uint64_t>(j)));
    const double mg = resampled_mean(group, rng);
    const double mr = resampled_mean(reference, rng);
    const double delta = mg - mr;
    if (delta <= 0.0) ++n_le;
    if (delta >= 0.0) ++n_ge;
  }
  const double b = static_cast<double>(B);
  double p = 2.0 * std::min(static_cast<double>(n_le) / b, static_cast<double>(n_ge) / b);
  return std::clamp(p, 1.0 / b, 1.0);
}

double cohens_d(std::span<const double> group, std::span<const double> reference) {
  if (group.size() < 2 || reference.size() < 2)
    throw InsufficientDataError("cohens_d needs at least two values per group");
  const double ng = static_cast<double>(group.size());
  const double nr = static_cast<double>(reference.size());
  const double pooled = ((ng - 1.0) * sample_variance(group) +
                         (nr - 1.0) * sample_variance(reference)) /
                        (ng + nr - 2.0);
  if (pooled <= 0.0) throw ZeroVarianceError();
  return (mean_of(group) - mean_of(reference)) / std::sqrt(pooled);
}

std::vector<CalibrationBin> calibration_bins(std::span<const double> predicted,
                                             std::span<const uint8_t> observed, int B_bins,
                                             double z) {
  if (predicted.size() != observed.size())
    throw InvalidConfigError("calibration_bins: predicted and observed lengths differ");
  if (B_bins < 1) throw InvalidConfigError("calibration_bins: need at least one bin");
  if (!(z > 0.0)) throw InvalidConfigError("calibration_bins: z must be positive");
  const size_t n = predicted.size();
  if (n < static_cast<size_t>(B_bins))
    throw TooFewSamplesError("calibration_bins: fewer samples than bins");

  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    if (predicted[a] != predicted[b]) return predicted[a] < predicted[b];
    return a < b;
  });

  std::vector<CalibrationBin> bins;
  bins.reserve(static_cast<size_t>(B_bins));
  for (int b = 0; b < B_bins; ++b) {
    const size_t lo = n * static_cast<size_t>(b) / static_cast<size_t>(B_bins);
    const size_t hi = n * static_cast<size_t>(b + 1) / static_cast<size_t>(B_bins);
    CalibrationBin bin;
    bin.bin_index = b;
    bin.n = hi - lo;
    size_t k = 0;
    double pred_sum = 0.0;
    for (size_t r = lo; r < hi; ++r) {
      pred_sum += predicted[order[r]];
      k += observed[order[r]] ? 1 : 0;
    }
    const double nb = static_cast<double>(bin.n);
    bin.mean_predicted = pred_sum / nb;
    const double phat = static_cast<double>(k) / nb;
    bin.observed_rate = phat;
    const double z2n = z * z / nb;
    const double center = (phat + z2n / 2.0) / (1.0 + z2n);
    const double half = (z / (1.0 + z2n)) *
                        std::sqrt(phat * (1.0 - phat) / nb + z * z / (4.0 * nb * nb));
    bin.wilson_low = std::max(0.0, center - half);
    bin.wilson_high = std::min(1.0, center + half);
    bins.push_back(bin);
  }
  return bins;
}

std::string to_string(GroupDim dim) {
  switch (dim) {
    case GroupDim::Age: return "age";
    case GroupDim::Sex: return "sex";
    case GroupDim::Race: return "race";
  }
  return "age";
}

namespace {

struct LevelGroup {
  int level_index = 0;  // enum value, also the seed index
  std::string name;
  std::vector<double> values;
};

// Groups per-episode values by the level assigned to each episode's patient.
std::vector<LevelGroup> group_by(const Dataset& ds, std::span<const double> returns,
                                 int level_count,
                                 const std::function<int(const Demographics&)>& level_of,
                                 const std::function<std::string(int)>& name_of) {
  std::vector<LevelGroup> groups(static_cast<size_t>(level_count));
  for (int l = 0; l < level_count; ++l) {
    groups[static_cast<size_t>(l)].level_index = l;
    groups[static_cast<size_t>(l)].name = name_of(l);
  }
  const Demographics all_unknown;
  for (size_t e = 0; e < ds.episodes.size(); ++e) {
    const auto it = ds.demographics.find(ds.episodes[e].patient_id);
    const Demographics& demo = it == ds.demographics.end() ? all_unknown : it->second;
    const int l = level_of(demo);
    groups[static_cast<size_t>(l)].values.push_back(returns[e]);
  }
  std::erase_if(groups, [](const LevelGroup& g) { return g.values.empty(); });
  return groups;
}

void audit_dimension(GroupDim dim, std::vector<LevelGroup> groups, int B_ci, int B_p,
                     uint64_t seed, std::vector<SubgroupSummary>& out) {
  if (groups.empty()) return;
  size_t ref_pos = 0;
  for (size_t i = 1; i < groups.size(); ++i)
    if (groups[i].values.size() > groups[ref_pos].values.size()) ref_pos = i;

  const uint64_t dim_seed = Rng::derive(seed, static_cast<uint64_t>(dim));
  for (const LevelGroup& g : groups) {
    SubgroupSummary row;
    row.group = dim;
    row.level = g.name;
    row.n = g.values.size();
    row.reference_level = groups[ref_pos].name;
    row.is_reference = g.level_index == groups[ref_pos].level_index;
    const uint64_t ci_seed = Rng::derive(dim_seed, 2 * static_cast<uint64_t>(g.level_index));
    const uint64_t p_seed = Rng::derive(dim_seed, 2 * static_cast<uint64_t>(g.level_index) + 1);
    if (g.values.size() < 2) {
      row.mean = g.values[0];
      row.ci_low = row.mean;
      row.ci_high = row.mean;
    } else {
      const BootstrapCi ci = bootstrap_ci(g.values, B_ci, 0.95, ci_seed);
      row.mean = ci.mean;
      row.ci_low = ci.ci_low;
      row.ci_high = ci.ci_high;
    }
    row.p_value = row.is_reference
                      ? 1.0
                      : bootstrap_pvalue(g.values, groups[ref_pos].values, B_p, p_seed);
    out.push_back(std::move(row));
  }
}

}  // namespace

std::vector<SubgroupSummary> subgroup_audit(const Dataset& ds, std::span<const double> returns,
                                            int B_ci, int B_p, uint64_t seed) {
  if (ds.demographics.empty()) throw NoDemographicsError();
  if (returns.size() != ds.episodes.size())
    throw InvalidConfigError("subgroup_audit: one return per episode required");

  std::vector<SubgroupSummary> out;
  audit_dimension(
      GroupDim::Age,
      group_by(
          ds, returns, kAgeBinCount,
          [](const Demographics& d) { return static_cast<int>(d.age); },
          [](int l) { return to_string(static_cast<AgeBin>(l)); }),
      B_ci, B_p, seed, out);
  audit_dimension(
      GroupDim::Sex,
      group_by(
          ds, returns, kSexCount - 1,  // Unknown folds into Male
          [](const Demographics& d) {
            return d.sex == Sex::Unknown ? static_cast<int>(Sex::Male)
                                         : static_cast<int>(d.sex);
          },
          [](int l) { return to_string(static_cast<Sex>(l)); }),
      B_ci, B_p, seed, out);
  audit_dimension(
      GroupDim::Race,
      group_by(
          ds, returns, kRaceCount,
          [](const Demographics& d) { return static_cast<int>(d.race); },
          [](int l) { return to_string(static_cast<Race>(l)); }),
      B_ci, B_p, seed, out);
  return out;
}

}  // namespace haco
