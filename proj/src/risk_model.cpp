#include "haco/risk_model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "haco/errors.hpp"
#include "newton.hpp"

namespace haco {

namespace {

using nlohmann::json;

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

double softplus(double z) { return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

Eigen::VectorXd to_vector(const std::vector<uint8_t>& y) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(y.size()));
  for (size_t i = 0; i < y.size(); ++i) v[static_cast<Eigen::Index>(i)] = y[i] ? 1.0 : 0.0;
  return v;
}

}  // namespace

RiskFeatures featurize(const Dataset& ds, size_t step_index, bool use_state, double t_scale) {
  const Step& s = ds.steps[step_index];
  RiskFeatures f;
  f.names = risk_feature_names(ds, use_state);
  f.values.reserve(f.names.size());
  f.values.push_back(static_cast<double>(s.t) / t_scale);
  f.values.push_back(s.prev_reward);
  if (use_state) {
    const auto state = ds.state(step_index);
    f.values.insert(f.values.end(), state.begin(), state.end());
  }
  return f;
}

std::vector<std::string> risk_feature_names(const Dataset& ds, bool use_state) {
  std::vector<std::string> names = {"t_norm", "prev_reward"};
  if (use_state) names.insert(names.end(), ds.feature_names.begin(), ds.feature_names.end());
  return names;
}

double logistic_objective(const Eigen::MatrixXd& x, const std::vector<uint8_t>& y, double l2_lambda,
                          const Eigen::VectorXd& params) {
  const auto d = x.cols();
  const auto n = x.rows();
  const Eigen::VectorXd w = params.head(d);
  const double b = params[d];
  const Eigen::VectorXd z = (x * w).array() + b;
  double nll = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) nll += softplus(z[i]) - (y[static_cast<size_t>(i)] ? z[i] : 0.0);
  return nll / static_cast<double>(n) + 0.5 * l2_lambda * w.squaredNorm();
}

Eigen::VectorXd logistic_gradient(const Eigen::MatrixXd& x, const std::vector<uint8_t>& y,
                                  double l2_lambda, const Eigen::VectorXd& params) {
  const auto d = x.cols();
  const auto n = x.rows();
  const Eigen::VectorXd w = params.head(d);
  const double b = params[d];
  Eigen::VectorXd residual = (x * w).array() + b;
  for (Eigen::Index i = 0; i < n; ++i) {
    residual[i] = sigmoid(residual[i]) - (y[static_cast<size_t>(i)] ? 1.0 : 0.0);
  }
  Eigen::VectorXd g(d + 1);
  g.head(d) = x.transpose() * residual / static_cast<double>(n) + l2_lambda * w;
  g[d] = residual.mean();
  return g;
}

LogisticFit fit_logistic(const Eigen::MatrixXd& x, const std::vector<uint8_t>& y,
                         const LogisticOptions& opts) {
  const auto n = x.rows();
  const auto d = x.cols();
  if (n == 0) throw EmptyDatasetError("cannot fit on zero rows");
  if (static_cast<size_t>(n) != y.size()) throw InvalidConfigError("feature/label row counts differ");
  if (!x.allFinite()) throw InvalidConfigError("non-finite feature values");
  if (opts.l2_lambda < 0.0) throw InvalidConfigError("l2_lambda must be ≥ 0");

  const size_t positives = static_cast<size_t>(std::count(y.begin(), y.end(), uint8_t{1}));
  if ((positives == 0 || positives == y.size()) && opts.l2_lambda == 0.0) {
    throw DegenerateLabelsError("labels are single-class and the fit is unregularized");
  }

  Eigen::VectorXd x0 = Eigen::VectorXd::Zero(d + 1);
  if (opts.init) {
    if (opts.init->size() != static_cast<size_t>(d + 1)) {
      throw InvalidConfigError("warm start has wrong parameter count");
    }
    for (Eigen::Index i = 0; i <= d; ++i) x0[i] = (*opts.init)[static_cast<size_t>(i)];
  }

  const double inv_n = 1.0 / static_cast<double>(n);
  auto hessian = [&](const Eigen::VectorXd& params, Eigen::MatrixXd& h) {
    const Eigen::VectorXd w = params.head(d);
    const double b = params[d];
    Eigen::VectorXd s = (x * w).array() + b;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double p = sigmoid(s[i]);
      s[i] = p * (1.0 - p);
    }
    h.resize(d + 1, d + 1);
    h.topLeftCorner(d, d) = x.transpose() * s.asDiagonal() * x * inv_n;
    h.topLeftCorner(d, d).diagonal().array() += opts.l2_lambda;
    h.topRightCorner(d, 1) = x.transpose() * s * inv_n;
    h.bottomLeftCorner(1, d) = h.topRightCorner(d, 1).transpose();
    h(d, d) = s.mean();
  };

  NewtonResult result = newton_minimize(
      std::move(x0), [&](const Eigen::VectorXd& p) { return logistic_objective(x, y, opts.l2_lambda, p); },
      [&](const Eigen::VectorXd& p, Eigen::VectorXd& g) { g = logistic_gradient(x, y, opts.l2_lambda, p); },
      hessian, opts.max_iter, opts.tol);
  if (!result.converged) {
    throw DidNotConvergeError("logistic fit did not reach tolerance", result.grad_norm);
  }

  LogisticFit fit;
  fit.weights.assign(result.x.data(), result.x.data() + d);
  fit.intercept = result.x[d];
  fit.iterations = result.iterations;
  fit.final_grad_norm = result.grad_norm;
  return fit;
}

RiskModel fit_risk_model(const Dataset& train, const RiskFitOptions& opts) {
  if (train.steps.empty()) throw EmptyDatasetError("cannot fit a risk model on an empty dataset");

  double t_scale = 1.0;
  if (opts.t_scale) {
    if (!(*opts.t_scale > 0.0)) throw InvalidConfigError("t_scale must be positive");
    t_scale = *opts.t_scale;
  } else {
    int max_t = 1;
    for (const Step& s : train.steps) max_t = std::max(max_t, s.t);
    t_scale = static_cast<double>(max_t);
  }

  const auto n = static_cast<Eigen::Index>(train.size());
  const auto state_dim = static_cast<Eigen::Index>(opts.use_state ? train.state_dim() : 0);
  Eigen::MatrixXd x(n, 2 + state_dim);
  std::vector<uint8_t> y(train.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    const Step& s = train.steps[static_cast<size_t>(i)];
    x(i, 0) = static_cast<double>(s.t) / t_scale;
    x(i, 1) = s.prev_reward;
    if (opts.use_state) {
      const auto state = train.state(static_cast<size_t>(i));
      for (Eigen::Index j = 0; j < state_dim; ++j) x(i, 2 + j) = state[static_cast<size_t>(j)];
    }
    y[static_cast<size_t>(i)] = s.harm ? 1 : 0;
  }

  LogisticOptions lopts;
  lopts.l2_lambda = opts.l2_lambda;
  lopts.max_iter = opts.max_iter;
  lopts.tol = opts.tol;
  const LogisticFit fit = fit_logistic(x, y, lopts);

  RiskModel model;
  model.weights = fit.weights;
  model.intercept = fit.intercept;
  model.l2_lambda = opts.l2_lambda;
  model.feature_names = risk_feature_names(train, opts.use_state);
  model.use_state = opts.use_state;
  model.t_scale = t_scale;
  return model;
}

double predict_harm(const RiskModel& model, const RiskFeatures& x) {
  if (x.names != model.feature_names) {
    throw FeatureMismatchError("risk features do not match the model's training features");
  }
  double z = model.intercept;
  for (size_t j = 0; j < x.values.size(); ++j) z += model.weights[j] * x.values[j];
  return sigmoid(z);
}

std::vector<double> score_dataset(const RiskModel& model, const Dataset& ds) {
  if (risk_feature_names(ds, model.use_state) != model.feature_names) {
    throw FeatureMismatchError("dataset features do not match the risk model");
  }
  std::vector<double> scores(ds.size());
  const size_t state_dim = model.use_state ? ds.state_dim() : 0;
  for (size_t i = 0; i < ds.size(); ++i) {
    const Step& s = ds.steps[i];
    double z = model.intercept + model.weights[0] * (static_cast<double>(s.t) / model.t_scale) +
               model.weights[1] * s.prev_reward;
    if (state_dim > 0) {
      const auto state = ds.state(i);
      for (size_t j = 0; j < state_dim; ++j) z += model.weights[2 + j] * state[j];
    }
    scores[i] = sigmoid(z);
  }
  return scores;
}

double auc(std::span<const double> scores, std::span<const uint8_t> labels) {
  if (scores.size() != labels.size()) throw InvalidConfigError("score/label lengths differ");
  const size_t n = scores.size();
  size_t n_pos = 0;
  for (uint8_t l : labels) n_pos += l ? 1 : 0;
  const size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) throw DegenerateLabelsError("AUC needs both classes");

  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return scores[a] < scores[b]; });

  // Average ranks within tie groups, then the Mann–Whitney statistic.
  double rank_sum_pos = 0.0;
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + j) + 1.0;  // 1-based
    for (size_t k = i; k <= j; ++k) {
      if (labels[order[k]]) rank_sum_pos += avg_rank;
    }
    i = j + 1;
  }
  const double u = rank_sum_pos - 0.5 * static_cast<double>(n_pos) * static_cast<double>(n_pos + 1);
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

void save_risk_model(const RiskModel& model, const std::string& path) {
  json out;
  out["feature_names"] = model.feature_names;
  out["weights"] = model.weights;
  out["intercept"] = model.intercept;
  out["l2_lambda"] = model.l2_lambda;
  out["use_state"] = model.use_state;
  out["t_scale"] = model.t_scale;
  std::ofstream file(path, std::ios::binary);
  if (!file) throw Error("cannot open file for writing: " + path);
  file << out.dump(2) << "\n";
}

RiskModel load_risk_model(const std::string& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw Error("cannot open file: " + path);
  try {
    const json in = json::parse(file);
    RiskModel model;
    model.feature_names = in.at("feature_names").get<std::vector<std::string>>();
    model.weights = in.at("weights").get<std::vector<double>>();
    model.intercept = in.at("intercept").get<double>();
    model.l2_lambda = in.at("l2_lambda").get<double>();
    model.use_state = in.at("use_state").get<bool>();
    model.t_scale = in.at("t_scale").get<double>();
    if (model.weights.size() != model.feature_names.size()) {
      throw Error("weight/name count mismatch in " + path);
    }
    return model;
  } catch (const json::exception& e) {
    throw Error("invalid risk model file " + path + ": " + e.what());
  }
}

}  // namespace haco
