#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "haco/policy.hpp"
#include "haco/types.hpp"

namespace haco {

struct PolicyFitOptions {
  double l2_lambda = 1e-3;
  int max_iter = 200;
  double tol = 1e-7;
  // Per-sample weight hook (aligned with the rows being fit). Off by default;
  // the standard objective is the plain multinomial fit.
  std::optional<std::vector<double>> sample_weights;
};

// Multinomial cross-entropy + (l2_lambda/2)‖W‖² over the masked-in steps,
// class 0 pinned to zero, zero-initialized Newton fit. Throws EmptySafeSet /
// SingleActionSafeSet on degenerate masks.
SoftmaxPolicy fit_preference_policy(const Dataset& ds, std::span<const uint8_t> safe_mask,
                                    const PolicyFitOptions& opts);

struct BcSplit {
  double train_frac = 0.8;  // leading fraction of episodes, in order
};

struct BcResult {
  SoftmaxPolicy policy;
  double test_accuracy = 0.0;  // greedy action == logged action on held-out episodes
  size_t n_test_steps = 0;
};

// Same optimizer as the preference fit, on all steps of the leading episodes;
// accuracy measured on the remaining (episode-disjoint) steps.
BcResult fit_behavior_cloning(const Dataset& ds, const BcSplit& split, const PolicyFitOptions& opts);

// Reference objective/gradient over flattened parameters (per class a ≥ 1:
// d weights then the intercept), exposed for verification. sample_weights may
// be empty for the unweighted objective.
double multinomial_objective(const Eigen::MatrixXd& x, const std::vector<int>& actions,
                             int action_count, double l2_lambda,
                             std::span<const double> sample_weights, const Eigen::VectorXd& params);
Eigen::VectorXd multinomial_gradient(const Eigen::MatrixXd& x, const std::vector<int>& actions,
                                     int action_count, double l2_lambda,
                                     std::span<const double> sample_weights,
                                     const Eigen::VectorXd& params);

void save_policy(const SoftmaxPolicy& policy, const std::string& path);
SoftmaxPolicy load_softmax_policy(const std::string& path);

// CSV with columns step_index, p0 … p{A−1}; must cover every step index of
// the dataset it will score ([0, n_steps)), rows renormalized to sum to 1.
ExternalPolicy load_external_policy(const std::string& path, int action_count, size_t n_steps);

}  // namespace haco
