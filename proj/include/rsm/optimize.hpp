#pragma once

// Box-constrained quasi-Newton minimization (projected BFGS).

#include <Eigen/Dense>

#include <functional>
#include <string>

namespace rsm {

/// Returns f(x); fills *grad when non-null.
using Objective = std::function<double(const Eigen::VectorXd& x, Eigen::VectorXd* grad)>;

struct OptimizeOptions {
  int max_iterations = 500;
  double gradient_tolerance = 1e-7; ///< on the projected gradient, inf-norm
  double value_tolerance = 1e-13;   ///< relative decrease treated as stalled
};

struct OptimizeResult {
  Eigen::VectorXd x;
  double value = 0.0;
  int iterations = 0;
  bool converged = false;
  std::string message;
};

OptimizeResult minimize_box(const Objective& f, Eigen::VectorXd x0, const Eigen::VectorXd& lower,
                            const Eigen::VectorXd& upper, const OptimizeOptions& options = {});

/// Finite-difference Hessian of an analytic gradient, symmetrized. Central
/// differences where both neighbours lie inside the box, one-sided otherwise.
Eigen::MatrixXd numeric_hessian(const Objective& f, const Eigen::VectorXd& x, const Eigen::VectorXd& step,
                                const Eigen::VectorXd& lower, const Eigen::VectorXd& upper);

} // namespace rsm
