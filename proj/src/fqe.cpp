#include "haco/fqe.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "haco/errors.hpp"

namespace haco {

namespace {

// Standardized state features with a trailing intercept column.
Eigen::MatrixXd design_matrix(const Dataset& ds, const std::vector<double>& means,
                              const std::vector<double>& scales) {
  const auto n = static_cast<Eigen::Index>(ds.size());
  const auto d = static_cast<Eigen::Index>(ds.state_dim());
  Eigen::MatrixXd x(n, d + 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto s = ds.state(static_cast<size_t>(i));
    for (Eigen::Index j = 0; j < d; ++j)
      x(i, j) = (s[static_cast<size_t>(j)] - means[static_cast<size_t>(j)]) /
                scales[static_cast<size_t>(j)];
    x(i, d) = 1.0;
  }
  return x;
}

}  // namespace

LinearQ fit_fqe(const Dataset& ds, const Policy& policy, double gamma, double ridge_lambda,
                int max_iters, double tol) {
  FqeOptions opts;
  opts.gamma = gamma;
  opts.ridge_lambda = ridge_lambda;
  opts.max_iters = max_iters;
  opts.tol = tol;
  return fit_fqe(ds, policy, opts);
}

LinearQ fit_fqe(const Dataset& ds, const Policy& policy, const FqeOptions& opts) {
  if (ds.size() == 0) throw EmptyDatasetError();
  if (!(opts.gamma >= 0.0) || !(opts.gamma <= 1.0))
    throw InvalidConfigError("fqe: gamma must lie in [0, 1]");
  if (!(opts.ridge_lambda > 0.0)) throw InvalidConfigError("fqe: ridge_lambda must be positive");
  if (opts.max_iters < 1) throw InvalidConfigError("fqe: max_iters must be >= 1");
  if (!(opts.tol > 0.0)) throw InvalidConfigError("fqe: tol must be positive");
  if (policy.action_count() != ds.action_count)
    throw FeatureMismatchError("fqe: policy and dataset disagree on action count");

  const auto n = static_cast<Eigen::Index>(ds.size());
  const auto d = static_cast<Eigen::Index>(ds.state_dim());
  const int a_count = ds.action_count;

  LinearQ q;
  q.gamma = opts.gamma;
  q.ridge_lambda = opts.ridge_lambda;
  q.feature_names = ds.feature_names;
  q.feature_means.assign(static_cast<size_t>(d), 0.0);
  q.feature_scales.assign(static_cast<size_t>(d), 1.0);
  for (Eigen::Index j = 0; j < d; ++j) {
    double mean = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) mean += ds.state(static_cast<size_t>(i))[static_cast<size_t>(j)];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double dv = ds.state(static_cast<size_t>(i))[static_cast<size_t>(j)] - mean;
      var += dv * dv;
    }
    const double sd = std::sqrt(var / static_cast<double>(n));
    q.feature_means[static_cast<size_t>(j)] = mean;
    q.feature_scales[static_cast<size_t>(j)] = sd < 1e-12 ? 1.0 : sd;
  }

  const Eigen::MatrixXd x = design_matrix(ds, q.feature_means, q.feature_scales);

  // Terminal = last step of its episode (no bootstrap target beyond it).
  std::vector<uint8_t> terminal(static_cast<size_t>(n), 0);
  for (const Episode& ep : ds.episodes) terminal[ep.end - 1] = 1;

  // Per-action row lists, Gram factorizations (intercept unpenalized), and —
  // fixed across iterations — the evaluated policy's probabilities at each
  // non-terminal step's successor. With exactly collinear designs (one-hot
  // states plus the intercept) the coefficient null direction is pinned only
  // by rounding noise over the ridge, so coefficient deltas bottom out around
  // 1e-7 rather than machine epsilon; tolerances below that cannot be met.
  std::vector<std::vector<Eigen::Index>> rows_of(static_cast<size_t>(a_count));
  for (Eigen::Index i = 0; i < n; ++i)
    rows_of[static_cast<size_t>(ds.steps[static_cast<size_t>(i)].action)].push_back(i);

  std::vector<Eigen::LDLT<Eigen::MatrixXd>> gram(static_cast<size_t>(a_count));
  std::vector<Eigen::MatrixXd> xa(static_cast<size_t>(a_count));
  for (int a = 0; a < a_count; ++a) {
    const auto& rows = rows_of[static_cast<size_t>(a)];
    if (rows.empty()) {
      q.unobserved_actions.push_back(a);
      continue;
    }
    Eigen::MatrixXd& xm = xa[static_cast<size_t>(a)];
    xm.resize(static_cast<Eigen::Index>(rows.size()), d + 1);
    for (size_t r = 0; r < rows.size(); ++r) xm.row(static_cast<Eigen::Index>(r)) = x.row(rows[r]);
    Eigen::MatrixXd g = xm.transpose() * xm;
    for (Eigen::Index j = 0; j < d; ++j) g(j, j) += opts.ridge_lambda;
    gram[static_cast<size_t>(a)].compute(g);
  }

  Eigen::MatrixXd next_probs(n, a_count);
  next_probs.setZero();
  std::vector<double> prob_buf(static_cast<size_t>(a_count));
  for (Eigen::Index i = 0; i < n; ++i) {
    if (terminal[static_cast<size_t>(i)]) continue;
    const StepContext ctx = step_context(ds, static_cast<size_t>(i) + 1);
    policy.action_probs(ctx, prob_buf);
    for (int a = 0; a < a_count; ++a) next_probs(i, a) = prob_buf[static_cast<size_t>(a)];
  }

  q.theta = Eigen::MatrixXd::Zero(a_count, d + 1);
  Eigen::VectorXd y(n);
  Eigen::MatrixXd qvals;  // n x A, Q_k at every step's own features

  const bool discount_free = opts.gamma == 0.0;
  const int iters = discount_free ? 1 : opts.max_iters;
  for (int k = 0; k < iters; ++k) {
    if (discount_free) {
      for (Eigen::Index i = 0; i < n; ++i) y[i] = ds.steps[static_cast<size_t>(i)].reward;
    } else {
      qvals.noalias() = x * q.theta.transpose();
      for (Eigen::Index i = 0; i < n; ++i) {
        const double r = ds.steps[static_cast<size_t>(i)].reward;
        if (terminal[static_cast<size_t>(i)]) {
          y[i] = r;
        } else {
          y[i] = r + opts.gamma * next_probs.row(i).dot(qvals.row(i + 1));
        }
      }
    }

    double delta = 0.0;
    for (int a = 0; a < a_count; ++a) {
      const auto& rows = rows_of[static_cast<size_t>(a)];
      if (rows.empty()) continue;
      Eigen::VectorXd ya(static_cast<Eigen::Index>(rows.size()));
      for (size_t r = 0; r < rows.size(); ++r) ya[static_cast<Eigen::Index>(r)] = y[rows[r]];
      const Eigen::VectorXd rhs = xa[static_cast<size_t>(a)].transpose() * ya;
      const Eigen::VectorXd sol = gram[static_cast<size_t>(a)].solve(rhs);
      delta = std::max(delta, (sol - q.theta.row(a).transpose()).cwiseAbs().maxCoeff());
      q.theta.row(a) = sol.transpose();
    }

    q.iterations_run = k + 1;
    if (opts.observer) opts.observer(q.iterations_run, q.theta);
    if (discount_free) {
      // Targets never depend on the parameters, so the fixed point is exact.
      q.converged = true;
      q.final_delta = 0.0;
      break;
    }
    q.final_delta = delta;
    if (delta < opts.tol) {
      q.converged = true;
      break;
    }
  }
  return q;
}

FQEResult estimate_v0(const LinearQ& q, const Dataset& ds, const Policy& policy, V0Mode mode) {
  if (ds.size() == 0) throw EmptyDatasetError();
  if (q.feature_names != ds.feature_names)
    throw FeatureMismatchError("fqe: dataset features differ from the fitted value function");
  const int a_count = static_cast<int>(q.theta.rows());
  if (policy.action_count() != a_count)
    throw FeatureMismatchError("fqe: policy and value function disagree on action count");
  const auto d = static_cast<Eigen::Index>(ds.state_dim());

  FQEResult res;
  res.v0_mode = mode;
  res.converged = q.converged;
  res.final_delta = q.final_delta;
  res.per_episode_v0.reserve(ds.episodes.size());

  Eigen::VectorXd row(d + 1);
  std::vector<double> probs(static_cast<size_t>(a_count));
  double total = 0.0;
  for (const Episode& ep : ds.episodes) {
    const size_t i0 = ep.begin;
    const auto s = ds.state(i0);
    for (Eigen::Index j = 0; j < d; ++j)
      row[j] = (s[static_cast<size_t>(j)] - q.feature_means[static_cast<size_t>(j)]) /
               q.feature_scales[static_cast<size_t>(j)];
    row[d] = 1.0;
    const StepContext ctx = step_context(ds, i0);
    double v = 0.0;
    if (mode == V0Mode::Expectation) {
      policy.action_probs(ctx, probs);
      for (int a = 0; a < a_count; ++a) v += probs[static_cast<size_t>(a)] * q.value(row, a);
    } else {
      v = q.value(row, policy.greedy(ctx));
    }
    res.per_episode_v0.push_back(v);
    total += v;
  }
  res.v0 = total / static_cast<double>(res.per_episode_v0.size());
  return res;
}

std::string to_string(V0Mode mode) {
  return mode == V0Mode::Expectation ? "expectation" : "greedy";
}

}  // namespace haco
