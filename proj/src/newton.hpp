#pragma once

#include <Eigen/Dense>

namespace haco {

struct NewtonResult {
  Eigen::VectorXd x;
  int iterations = 0;
  double grad_norm = 0.0;
  bool converged = false;
};

// Damped Newton descent with Armijo step halving. Falls back to the raw
// gradient direction whenever the Hessian factorization is unusable
// (non-positive pivots or condition estimate above 1e12). Deterministic:
// no randomness, fixed evaluation order.
template <typename ObjectiveFn, typename GradientFn, typename HessianFn>
NewtonResult newton_minimize(Eigen::VectorXd x, ObjectiveFn&& objective, GradientFn&& gradient,
                             HessianFn&& hessian, int max_iter, double tol) {
  const auto n = x.size();
  Eigen::VectorXd g(n);
  Eigen::MatrixXd h(n, n);
  gradient(x, g);
  double grad_norm = g.norm();

  int iter = 0;
  for (; iter < max_iter && grad_norm > tol; ++iter) {
    hessian(x, h);
    Eigen::VectorXd direction;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(h);
    if (ldlt.info() == Eigen::Success) {
      const auto d = ldlt.vectorD();
      const double d_min = d.minCoeff();
      const double d_max = d.maxCoeff();
      if (d_min > 0.0 && d_max / d_min < 1e12) direction = ldlt.solve(g);
    }
    if (direction.size() == 0) direction = g;

    double slope = g.dot(direction);
    if (slope <= 0.0) {  // not a descent direction; retreat to the gradient
      direction = g;
      slope = g.squaredNorm();
    }

    const double obj0 = objective(x);
    double step = 1.0;
    bool accepted = false;
    for (int halving = 0; halving < 60; ++halving) {
      const Eigen::VectorXd candidate = x - step * direction;
      if (objective(candidate) <= obj0 - 1e-4 * step * slope) {
        x = candidate;
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;  // stagnated at floating-point resolution

    gradient(x, g);
    grad_norm = g.norm();
  }
  return {std::move(x), iter, grad_norm, grad_norm <= tol};
}

}  // namespace haco
