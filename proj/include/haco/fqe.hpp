#pragma once

#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "haco/policy.hpp"
#include "haco/types.hpp"

namespace haco {

// Per-action linear value heads on standardized state features. Row a of
// theta holds the weights for action a with the intercept in the last column.
struct LinearQ {
  Eigen::MatrixXd theta;  // A x (d+1)
  double gamma = 0.99;
  double ridge_lambda = 1.0;
  int iterations_run = 0;
  bool converged = false;
  double final_delta = 0.0;
  std::vector<std::string> feature_names;  // state feature names the fit used
  std::vector<double> feature_means;       // standardization, from the fit data
  std::vector<double> feature_scales;
  std::vector<int> unobserved_actions;  // rows left at zero for lack of support

  // Q(s, a) for an already standardized-and-augmented feature row.
  double value(const Eigen::VectorXd& row_with_intercept, int action) const {
    return theta.row(action).dot(row_with_intercept);
  }
};

struct FqeOptions {
  double gamma = 0.99;
  double ridge_lambda = 1.0;
  int max_iters = 200;
  double tol = 1e-6;  // max absolute parameter change between iterations
  // Called after each completed iteration with (iteration, theta); for
  // diagnostics and convergence studies.
  std::function<void(int, const Eigen::MatrixXd&)> observer;
};

LinearQ fit_fqe(const Dataset& ds, const Policy& policy, const FqeOptions& opts);
LinearQ fit_fqe(const Dataset& ds, const Policy& policy, double gamma, double ridge_lambda,
                int max_iters = 200, double tol = 1e-6);

enum class V0Mode { Expectation, Greedy };

struct FQEResult {
  double v0 = 0.0;
  V0Mode v0_mode = V0Mode::Expectation;
  std::vector<double> per_episode_v0;
  bool converged = false;
  double final_delta = 0.0;
};

// Initial-state value under the policy: per episode either the probability-
// weighted Q at the first step or Q at the policy's greedy action; v0 is the
// mean across episodes.
FQEResult estimate_v0(const LinearQ& q, const Dataset& ds, const Policy& policy, V0Mode mode);

std::string to_string(V0Mode mode);

}  // namespace haco
