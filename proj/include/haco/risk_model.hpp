#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "haco/types.hpp"

namespace haco {

// Model input for one step: [t / t_scale, prev_reward], optionally extended
// by the state features.
struct RiskFeatures {
  std::vector<double> values;
  std::vector<std::string> names;
};

RiskFeatures featurize(const Dataset& ds, size_t step_index, bool use_state, double t_scale);

struct LogisticOptions {
  double l2_lambda = 1e-4;
  int max_iter = 100;
  double tol = 1e-7;
  // Warm start (weights then intercept). Zero-initialized when absent, which
  // keeps fits deterministic.
  std::optional<std::vector<double>> init;
};

struct LogisticFit {
  std::vector<double> weights;
  double intercept = 0.0;
  int iterations = 0;
  double final_grad_norm = 0.0;
};

// Minimizes mean negative log-likelihood + (l2_lambda/2)·‖w‖² (intercept
// unpenalized) by damped Newton steps. Throws DegenerateLabels for a
// single-class unregularized problem, DidNotConverge past max_iter.
LogisticFit fit_logistic(const Eigen::MatrixXd& x, const std::vector<uint8_t>& y,
                         const LogisticOptions& opts);

// Reference objective/gradient for the fit above (exposed for verification).
double logistic_objective(const Eigen::MatrixXd& x, const std::vector<uint8_t>& y, double l2_lambda,
                          const Eigen::VectorXd& params);
Eigen::VectorXd logistic_gradient(const Eigen::MatrixXd& x, const std::vector<uint8_t>& y,
                                  double l2_lambda, const Eigen::VectorXd& params);

struct RiskModel {
  std::vector<double> weights;
  double intercept = 0.0;
  double l2_lambda = 0.0;
  std::vector<std::string> feature_names;
  bool use_state = false;
  double t_scale = 1.0;
};

struct RiskFitOptions {
  bool use_state = false;
  double l2_lambda = 1e-4;
  int max_iter = 100;
  double tol = 1e-7;
  // Default: the largest t in the training data (at least 1).
  std::optional<double> t_scale;
};

RiskModel fit_risk_model(const Dataset& train, const RiskFitOptions& opts);

// σ(w·x + b); throws FeatureMismatch when names disagree with the model.
double predict_harm(const RiskModel& model, const RiskFeatures& x);

// Scores every step; feature layout validated once up front.
std::vector<double> score_dataset(const RiskModel& model, const Dataset& ds);

// P(random positive outscores random negative), ties at 0.5, via the
// Mann–Whitney rank statistic. Throws DegenerateLabels without both classes.
double auc(std::span<const double> scores, std::span<const uint8_t> labels);

void save_risk_model(const RiskModel& model, const std::string& path);
RiskModel load_risk_model(const std::string& path);

std::vector<std::string> risk_feature_names(const Dataset& ds, bool use_state);

}  // namespace haco
