#include "haco/policy_learning.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "haco/csv.hpp"
#include "haco/errors.hpp"
#include "haco/trajectory_store.hpp"
#include "newton.hpp"

namespace haco {

namespace {

// Flattened parameter layout: classes 1..A-1 in order, each as d weights
// followed by one intercept. Class 0 is the reference with logit 0.
struct ParamView {
  const Eigen::VectorXd& theta;
  int d;

  double weight(int cls, int j) const { return theta[(cls - 1) * (d + 1) + j]; }
  double bias(int cls) const { return theta[(cls - 1) * (d + 1) + d]; }
};

void check_fit_inputs(const Eigen::MatrixXd& x, const std::vector<int>& actions, int action_count,
                      double l2_lambda, std::span<const double> sample_weights) {
  const auto n = static_cast<size_t>(x.rows());
  if (n == 0) throw EmptyDatasetError();
  if (actions.size() != n)
    throw InvalidConfigError("policy fit: feature rows and action labels disagree in length");
  if (action_count < 2) throw InvalidConfigError("policy fit needs at least two actions");
  if (!std::isfinite(l2_lambda) || l2_lambda < 0.0)
    throw InvalidConfigError("policy fit: l2_lambda must be finite and non-negative");
  if (!x.allFinite()) throw InvalidConfigError("policy fit: non-finite feature value");
  std::vector<uint8_t> seen(static_cast<size_t>(action_count), 0);
  for (int a : actions) {
    if (a < 0 || a >= action_count)
      throw InvalidConfigError("policy fit: action label outside [0, action_count)");
    seen[static_cast<size_t>(a)] = 1;
  }
  if (l2_lambda == 0.0 &&
      std::find(seen.begin(), seen.end(), uint8_t{0}) != seen.end())
    throw InvalidConfigError(
        "unregularized policy fit requires every action to appear in the data");
  if (!sample_weights.empty()) {
    if (sample_weights.size() != n)
      throw InvalidConfigError("policy fit: sample_weights length must match rows");
    double total = 0.0;
    for (double w : sample_weights) {
      if (!std::isfinite(w) || w < 0.0)
        throw InvalidConfigError("policy fit: sample weights must be finite and non-negative");
      total += w;
    }
    if (total <= 0.0) throw InvalidConfigError("policy fit: sample weights sum to zero");
  }
}

// Logits for classes 1..A-1 as an n x (A-1) matrix.
Eigen::MatrixXd logits(const Eigen::MatrixXd& x, int action_count, const Eigen::VectorXd& theta) {
  const int d = static_cast<int>(x.cols());
  const int k = action_count - 1;
  Eigen::MatrixXd w(k, d);
  Eigen::VectorXd b(k);
  for (int a = 0; a < k; ++a) {
    w.row(a) = theta.segment(a * (d + 1), d).transpose();
    b[a] = theta[a * (d + 1) + d];
  }
  Eigen::MatrixXd z = x * w.transpose();
  z.rowwise() += b.transpose();
  return z;
}

// Full probability matrix n x A, including the pinned class 0.
Eigen::MatrixXd probabilities(const Eigen::MatrixXd& z) {
  const auto n = z.rows();
  const int k = static_cast<int>(z.cols());
  Eigen::MatrixXd p(n, k + 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    double m = 0.0;  // class-0 logit
    for (int a = 0; a < k; ++a) m = std::max(m, z(i, a));
    double denom = std::exp(-m);
    for (int a = 0; a < k; ++a) denom += std::exp(z(i, a) - m);
    p(i, 0) = std::exp(-m) / denom;
    for (int a = 0; a < k; ++a) p(i, a + 1) = std::exp(z(i, a) - m) / denom;
  }
  return p;
}

double weight_norm_sq(const Eigen::VectorXd& theta, int d, int k) {
  double s = 0.0;
  for (int a = 0; a < k; ++a) s += theta.segment(a * (d + 1), d).squaredNorm();
  return s;
}

}  // namespace

double multinomial_objective(const Eigen::MatrixXd& x, const std::vector<int>& actions,
                             int action_count, double l2_lambda,
                             std::span<const double> sample_weights,
                             const Eigen::VectorXd& params) {
  const auto n = static_cast<size_t>(x.rows());
  const int d = static_cast<int>(x.cols());
  const int k = action_count - 1;
  const Eigen::MatrixXd z = logits(x, action_count, params);
  double total_weight = 0.0;
  double loss = 0.0;
  for (size_t i = 0; i < n; ++i) {
    const double wi = sample_weights.empty() ? 1.0 : sample_weights[i];
    if (wi == 0.0) continue;
    double m = 0.0;
    for (int a = 0; a < k; ++a) m = std::max(m, z(static_cast<Eigen::Index>(i), a));
    double sum = std::exp(-m);
    for (int a = 0; a < k; ++a) sum += std::exp(z(static_cast<Eigen::Index>(i), a) - m);
    const double lse = m + std::log(sum);
    const int y = actions[i];
    const double zy = (y == 0) ? 0.0 : z(static_cast<Eigen::Index>(i), y - 1);
    loss += wi * (lse - zy);
    total_weight += wi;
  }
  if (total_weight <= 0.0) throw InvalidConfigError("policy fit: sample weights sum to zero");
  return loss / total_weight + 0.5 * l2_lambda * weight_norm_sq(params, d, k);
}

Eigen::VectorXd multinomial_gradient(const Eigen::MatrixXd& x, const std::vector<int>& actions,
                                     int action_count, double l2_lambda,
                                     std::span<const double> sample_weights,
                                     const Eigen::VectorXd& params) {
  const auto n = static_cast<size_t>(x.rows());
  const int d = static_cast<int>(x.cols());
  const int k = action_count - 1;
  const Eigen::MatrixXd p = probabilities(logits(x, action_count, params));
  double total_weight = 0.0;
  if (sample_weights.empty()) {
    total_weight = static_cast<double>(n);
  } else {
    for (double w : sample_weights) total_weight += w;
  }
  // Residual matrix for the non-reference classes: r_{ia} = w_i (p_{ia} - 1[y_i = a]).
  Eigen::MatrixXd r(static_cast<Eigen::Index>(n), k);
  for (size_t i = 0; i < n; ++i) {
    const double wi = sample_weights.empty() ? 1.0 : sample_weights[i];
    for (int a = 0; a < k; ++a) {
      const double ind = (actions[i] == a + 1) ? 1.0 : 0.0;
      r(static_cast<Eigen::Index>(i), a) = wi * (p(static_cast<Eigen::Index>(i), a + 1) - ind);
    }
  }
  Eigen::VectorXd g = Eigen::VectorXd::Zero(k * (d + 1));
  for (int a = 0; a < k; ++a) {
    g.segment(a * (d + 1), d) =
        (x.transpose() * r.col(a)) / total_weight + l2_lambda * params.segment(a * (d + 1), d);
    g[a * (d + 1) + d] = r.col(a).sum() / total_weight;
  }
  return g;
}

namespace {

// Newton fit over the flattened parameters; returns (A-1) x (d+1) solution.
Eigen::VectorXd fit_multinomial(const Eigen::MatrixXd& x, const std::vector<int>& actions,
                                int action_count, const PolicyFitOptions& opts) {
  std::span<const double> sw;
  if (opts.sample_weights) sw = *opts.sample_weights;
  check_fit_inputs(x, actions, action_count, opts.l2_lambda, sw);
  if (opts.max_iter < 1) throw InvalidConfigError("policy fit: max_iter must be >= 1");
  if (!(opts.tol > 0.0)) throw InvalidConfigError("policy fit: tol must be positive");

  const auto n = static_cast<Eigen::Index>(x.rows());
  const int d = static_cast<int>(x.cols());
  const int k = action_count - 1;
  const int dim = k * (d + 1);

  double total_weight = 0.0;
  if (sw.empty()) {
    total_weight = static_cast<double>(n);
  } else {
    for (double w : sw) total_weight += w;
  }

  // Features with the intercept column appended, shared by all Hessian blocks.
  Eigen::MatrixXd xt(n, d + 1);
  xt.leftCols(d) = x;
  xt.col(d).setOnes();

  auto objective = [&](const Eigen::VectorXd& theta) {
    return multinomial_objective(x, actions, action_count, opts.l2_lambda, sw, theta);
  };
  auto gradient = [&](const Eigen::VectorXd& theta, Eigen::VectorXd& out) {
    out = multinomial_gradient(x, actions, action_count, opts.l2_lambda, sw, theta);
  };
  Eigen::MatrixXd scaled(n, d + 1);
  auto hessian = [&](const Eigen::VectorXd& theta, Eigen::MatrixXd& h) {
    const Eigen::MatrixXd p = probabilities(logits(x, action_count, theta));
    h.setZero();
    Eigen::VectorXd c(n);
    for (int a = 0; a < k; ++a) {
      for (int b = a; b < k; ++b) {
        for (Eigen::Index i = 0; i < n; ++i) {
          const double wi = sw.empty() ? 1.0 : sw[static_cast<size_t>(i)];
          const double pa = p(i, a + 1);
          const double pb = p(i, b + 1);
          c[i] = wi * pa * ((a == b ? 1.0 : 0.0) - pb);
        }
        scaled.noalias() = c.asDiagonal() * xt;
        Eigen::MatrixXd block = (xt.transpose() * scaled) / total_weight;
        h.block(a * (d + 1), b * (d + 1), d + 1, d + 1) = block;
        if (a != b) h.block(b * (d + 1), a * (d + 1), d + 1, d + 1) = block.transpose();
      }
      for (int j = 0; j < d; ++j) h(a * (d + 1) + j, a * (d + 1) + j) += opts.l2_lambda;
    }
  };

  const NewtonResult res = newton_minimize(Eigen::VectorXd::Zero(dim), objective, gradient,
                                           hessian, opts.max_iter, opts.tol);
  if (!res.converged)
    throw DidNotConvergeError("policy fit did not reach the gradient tolerance", res.grad_norm);
  return res.x;
}

struct RowSelection {
  Eigen::MatrixXd x;
  std::vector<int> actions;
  double t_scale = 1.0;
};

// Assembles [t/t_scale, prev_reward, state...] rows for the given step
// indices; t_scale is the max t across the selection (at least 1).
RowSelection select_rows(const Dataset& ds, const std::vector<size_t>& rows) {
  const size_t d_state = ds.state_dim();
  const int d = static_cast<int>(d_state) + 2;
  int max_t = 1;
  for (size_t i : rows) max_t = std::max(max_t, ds.steps[i].t);
  RowSelection sel;
  sel.t_scale = static_cast<double>(max_t);
  sel.x.resize(static_cast<Eigen::Index>(rows.size()), d);
  sel.actions.reserve(rows.size());
  for (size_t r = 0; r < rows.size(); ++r) {
    const size_t i = rows[r];
    const Step& st = ds.steps[i];
    sel.x(static_cast<Eigen::Index>(r), 0) = static_cast<double>(st.t) / sel.t_scale;
    sel.x(static_cast<Eigen::Index>(r), 1) = st.prev_reward;
    const auto state = ds.state(i);
    for (size_t j = 0; j < d_state; ++j)
      sel.x(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j + 2)) = state[j];
    sel.actions.push_back(st.action);
  }
  return sel;
}

SoftmaxPolicy policy_from_params(const Dataset& ds, int action_count, double t_scale,
                                 double l2_lambda, const Eigen::VectorXd& theta) {
  const int d = static_cast<int>(ds.state_dim()) + 2;
  SoftmaxPolicy pol;
  pol.feature_names = policy_feature_names(ds);
  pol.t_scale = t_scale;
  pol.l2_lambda = l2_lambda;
  pol.weights.assign(static_cast<size_t>(action_count) * static_cast<size_t>(d), 0.0);
  pol.bias.assign(static_cast<size_t>(action_count), 0.0);
  for (int a = 1; a < action_count; ++a) {
    for (int j = 0; j < d; ++j)
      pol.weights[static_cast<size_t>(a) * static_cast<size_t>(d) + static_cast<size_t>(j)] =
          theta[(a - 1) * (d + 1) + j];
    pol.bias[static_cast<size_t>(a)] = theta[(a - 1) * (d + 1) + d];
  }
  return pol;
}

}  // namespace

SoftmaxPolicy fit_preference_policy(const Dataset& ds, std::span<const uint8_t> safe_mask,
                                    const PolicyFitOptions& opts) {
  if (safe_mask.size() != ds.size())
    throw InvalidConfigError("safe mask length must match the dataset");
  std::vector<size_t> rows;
  for (size_t i = 0; i < safe_mask.size(); ++i)
    if (safe_mask[i]) rows.push_back(i);
  if (rows.empty()) throw EmptySafeSetError();
  std::set<int> distinct;
  for (size_t i : rows) distinct.insert(ds.steps[i].action);
  if (distinct.size() < 2) throw SingleActionSafeSetError();

  PolicyFitOptions fit_opts = opts;
  if (fit_opts.sample_weights && fit_opts.sample_weights->size() == ds.size()) {
    // Weights are aligned with the full dataset; restrict them to the safe rows.
    std::vector<double> sub;
    sub.reserve(rows.size());
    for (size_t i : rows) sub.push_back((*fit_opts.sample_weights)[i]);
    fit_opts.sample_weights = std::move(sub);
  }

  const RowSelection sel = select_rows(ds, rows);
  const Eigen::VectorXd theta =
      fit_multinomial(sel.x, sel.actions, ds.action_count, fit_opts);
  return policy_from_params(ds, ds.action_count, sel.t_scale, opts.l2_lambda, theta);
}

BcResult fit_behavior_cloning(const Dataset& ds, const BcSplit& split,
                              const PolicyFitOptions& opts) {
  if (!(split.train_frac > 0.0) || !(split.train_frac < 1.0))
    throw InvalidConfigError("behavior cloning train_frac must lie in (0, 1)");
  const size_t n_ep = ds.episodes.size();
  const auto n_train =
      static_cast<size_t>(std::floor(split.train_frac * static_cast<double>(n_ep) + 1e-9));
  if (n_train == 0 || n_train >= n_ep)
    throw InsufficientEpisodesError(
        "behavior cloning needs at least one training and one held-out episode");

  std::vector<size_t> train_rows;
  for (size_t e = 0; e < n_train; ++e)
    for (size_t i = ds.episodes[e].begin; i < ds.episodes[e].end; ++i) train_rows.push_back(i);

  PolicyFitOptions fit_opts = opts;
  if (fit_opts.sample_weights && fit_opts.sample_weights->size() == ds.size()) {
    std::vector<double> sub;
    sub.reserve(train_rows.size());
    for (size_t i : train_rows) sub.push_back((*fit_opts.sample_weights)[i]);
    fit_opts.sample_weights = std::move(sub);
  }

  const RowSelection sel = select_rows(ds, train_rows);
  const Eigen::VectorXd theta =
      fit_multinomial(sel.x, sel.actions, ds.action_count, fit_opts);

  BcResult out;
  out.policy = policy_from_params(ds, ds.action_count, sel.t_scale, opts.l2_lambda, theta);

  size_t correct = 0;
  size_t total = 0;
  for (size_t e = n_train; e < n_ep; ++e) {
    for (size_t i = ds.episodes[e].begin; i < ds.episodes[e].end; ++i) {
      const StepContext ctx = step_context(ds, i);
      if (out.policy.greedy(ctx) == ds.steps[i].action) ++correct;
      ++total;
    }
  }
  out.n_test_steps = total;
  out.test_accuracy = total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
  return out;
}

void save_policy(const SoftmaxPolicy& policy, const std::string& path) {
  nlohmann::json j;
  j["type"] = "softmax";
  j["action_count"] = policy.action_count();
  j["feature_names"] = policy.feature_names;
  j["t_scale"] = policy.t_scale;
  j["l2_lambda"] = policy.l2_lambda;
  const size_t d = policy.feature_dim();
  nlohmann::json rows = nlohmann::json::array();
  for (int a = 0; a < policy.action_count(); ++a) {
    nlohmann::json row = nlohmann::json::array();
    for (size_t jcol = 0; jcol < d; ++jcol)
      row.push_back(policy.weights[static_cast<size_t>(a) * d + jcol]);
    rows.push_back(std::move(row));
  }
  j["weights"] = std::move(rows);
  j["bias"] = policy.bias;
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path + " for writing");
  out << j.dump(2) << "\n";
}

SoftmaxPolicy load_softmax_policy(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error("malformed policy file " + path + ": " + e.what());
  }
  try {
    if (j.at("type").get<std::string>() != "softmax")
      throw Error("policy file " + path + " is not a softmax policy");
    SoftmaxPolicy pol;
    pol.feature_names = j.at("feature_names").get<std::vector<std::string>>();
    pol.t_scale = j.at("t_scale").get<double>();
    pol.l2_lambda = j.value("l2_lambda", 0.0);
    const int a_count = j.at("action_count").get<int>();
    const size_t d = pol.feature_names.size();
    const auto& rows = j.at("weights");
    if (!rows.is_array() || rows.size() != static_cast<size_t>(a_count))
      throw Error("policy file " + path + ": weights must have one row per action");
    pol.weights.reserve(static_cast<size_t>(a_count) * d);
    for (const auto& row : rows) {
      if (!row.is_array() || row.size() != d)
        throw Error("policy file " + path + ": weight row width disagrees with feature_names");
      for (const auto& v : row) pol.weights.push_back(v.get<double>());
    }
    pol.bias = j.at("bias").get<std::vector<double>>();
    if (pol.bias.size() != static_cast<size_t>(a_count))
      throw Error("policy file " + path + ": bias length disagrees with action_count");
    if (a_count < 2) throw Error("policy file " + path + ": action_count must be >= 2");
    if (!(pol.t_scale > 0.0)) throw Error("policy file " + path + ": t_scale must be positive");
    return pol;
  } catch (const nlohmann::json::exception& e) {
    throw Error("malformed policy file " + path + ": " + e.what());
  }
}

ExternalPolicy load_external_policy(const std::string& path, int action_count, size_t n_steps) {
  if (action_count < 2) throw InvalidConfigError("external policy needs at least two actions");
  if (n_steps == 0) throw EmptyDatasetError();
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  const auto table = csv::parse(buf.str());
  if (table.empty()) throw EmptyDatasetError();

  std::vector<std::string> header;
  header.reserve(table[0].size());
  for (const auto& cell : table[0]) header.push_back(sanitize_column_name(cell));
  auto col_of = [&](const std::string& name) {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw MissingRequiredColumnError(name);
    return static_cast<size_t>(it - header.begin());
  };
  const size_t idx_col = col_of("step_index");
  std::vector<size_t> prob_cols;
  prob_cols.reserve(static_cast<size_t>(action_count));
  for (int a = 0; a < action_count; ++a) prob_cols.push_back(col_of("p" + std::to_string(a)));

  std::vector<double> probs(n_steps * static_cast<size_t>(action_count),
                            std::numeric_limits<double>::quiet_NaN());
  for (size_t r = 1; r < table.size(); ++r) {
    const auto& row = table[r];
    if (row.size() != header.size())
      throw InvalidConfigError("external policy row " + std::to_string(r) +
                               " has the wrong number of fields");
    size_t step = 0;
    try {
      step = static_cast<size_t>(std::stoull(row[idx_col]));
    } catch (const std::exception&) {
      throw InvalidConfigError("external policy row " + std::to_string(r) +
                               ": unparseable step_index");
    }
    if (step >= n_steps)
      throw InvalidConfigError("external policy step_index " + std::to_string(step) +
                               " is outside the dataset");
    if (!std::isnan(probs[step * static_cast<size_t>(action_count)]))
      throw InvalidConfigError("external policy repeats step_index " + std::to_string(step));
    double sum = 0.0;
    for (int a = 0; a < action_count; ++a) {
      double v = 0.0;
      try {
        v = std::stod(row[prob_cols[static_cast<size_t>(a)]]);
      } catch (const std::exception&) {
        throw InvalidConfigError("external policy row " + std::to_string(r) +
                                 ": unparseable probability");
      }
      if (!std::isfinite(v) || v < 0.0)
        throw InvalidConfigError("external policy probabilities must be finite and non-negative");
      probs[step * static_cast<size_t>(action_count) + static_cast<size_t>(a)] = v;
      sum += v;
    }
    if (sum <= 0.0)
      throw InvalidConfigError("external policy row " + std::to_string(r) +
                               " has zero total probability");
    for (int a = 0; a < action_count; ++a)
      probs[step * static_cast<size_t>(action_count) + static_cast<size_t>(a)] /= sum;
  }
  for (size_t i = 0; i < n_steps; ++i)
    if (std::isnan(probs[i * static_cast<size_t>(action_count)]))
      throw InvalidConfigError("external policy is missing step_index " + std::to_string(i));
  return ExternalPolicy(std::move(probs), action_count);
}

}  // namespace haco
