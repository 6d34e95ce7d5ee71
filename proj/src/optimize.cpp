#include <rsm/optimize.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

namespace rsm {

namespace {

Eigen::VectorXd project(const Eigen::VectorXd& x, const Eigen::VectorXd& lo, const Eigen::VectorXd& hi) {
  return x.cwiseMax(lo).cwiseMin(hi);
}

// Gradient with components that point out of an active bound removed.
Eigen::VectorXd projected_gradient(const Eigen::VectorXd& x, const Eigen::VectorXd& g, const Eigen::VectorXd& lo,
                                   const Eigen::VectorXd& hi) {
  Eigen::VectorXd pg = g;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    if ((x[i] <= lo[i] && g[i] > 0.0) || (x[i] >= hi[i] && g[i] < 0.0)) {
      pg[i] = 0.0;
    }
  }
  return pg;
}

} // namespace

OptimizeResult minimize_box(const Objective& f, Eigen::VectorXd x0, const Eigen::VectorXd& lower,
                            const Eigen::VectorXd& upper, const OptimizeOptions& options) {
  const Eigen::Index n = x0.size();
  if (lower.size() != n || upper.size() != n) {
    throw std::invalid_argument("minimize_box: bound dimensions differ from x0");
  }
  if ((lower.array() > upper.array()).any()) {
    throw std::invalid_argument("minimize_box: lower bound exceeds upper bound");
  }

  OptimizeResult res;
  Eigen::VectorXd x = project(x0, lower, upper);
  Eigen::VectorXd g(n);
  double fx = f(x, &g);
  if (!std::isfinite(fx) || !g.allFinite()) {
    res.x = x;
    res.value = fx;
    res.message = "objective not finite at the starting point";
    return res;
  }
  Eigen::MatrixXd H = Eigen::MatrixXd::Identity(n, n);
  const double eps = std::numeric_limits<double>::epsilon();

  for (int it = 0; it < options.max_iterations; ++it) {
    res.iterations = it;
    const Eigen::VectorXd pg = projected_gradient(x, g, lower, upper);
    if (pg.lpNorm<Eigen::Infinity>() <= options.gradient_tolerance) {
      res.converged = true;
      res.message = "projected gradient below tolerance";
      break;
    }

    // Newton-like step restricted to the free variables.
    std::vector<Eigen::Index> free;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (pg[i] != 0.0 || (x[i] > lower[i] && x[i] < upper[i])) {
        free.push_back(i);
      }
    }
    Eigen::VectorXd d = Eigen::VectorXd::Zero(n);
    for (Eigen::Index a : free) {
      for (Eigen::Index b : free) {
        d[a] -= H(a, b) * pg[b];
      }
    }
    if (!(d.dot(pg) < 0.0)) {
      H.setIdentity();
      d = -pg;
    }

    // Backtracking Armijo search along the projected path.
    double step = 1.0;
    Eigen::VectorXd x_new;
    Eigen::VectorXd g_new(n);
    double f_new = 0.0;
    bool accepted = false;
    for (int ls = 0; ls < 60; ++ls) {
      x_new = project(x + step * d, lower, upper);
      f_new = f(x_new, &g_new);
      if (std::isfinite(f_new) && g_new.allFinite() && f_new <= fx + 1e-4 * g.dot(x_new - x)) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      if (!H.isIdentity()) {
        H.setIdentity();
        continue;
      }
      res.message = "line search failed";
      break;
    }

    const Eigen::VectorXd s = x_new - x;
    const Eigen::VectorXd y = g_new - g;
    const double decrease = fx - f_new;
    x = x_new;
    g = g_new;
    fx = f_new;

    const double sy = s.dot(y);
    if (sy > 1e-10 * s.norm() * y.norm()) {
      const double rho = 1.0 / sy;
      const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(n, n);
      H = (I - rho * s * y.transpose()) * H * (I - rho * y * s.transpose()) + rho * s * s.transpose();
    }
    if (decrease <= options.value_tolerance * (std::abs(fx) + eps) && s.lpNorm<Eigen::Infinity>() <= 1e-12) {
      res.converged = true;
      res.message = "no further progress";
      break;
    }
    res.iterations = it + 1;
  }
  if (!res.converged && res.message.empty()) {
    res.message = "iteration limit reached";
  }
  res.x = x;
  res.value = fx;
  return res;
}

Eigen::MatrixXd numeric_hessian(const Objective& f, const Eigen::VectorXd& x, const Eigen::VectorXd& step,
                                const Eigen::VectorXd& lower, const Eigen::VectorXd& upper) {
  const Eigen::Index n = x.size();
  Eigen::MatrixXd H = Eigen::MatrixXd::Zero(n, n);
  Eigen::VectorXd g0(n);
  f(x, &g0);
  Eigen::VectorXd gp(n);
  Eigen::VectorXd gm(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double h = step[i];
    if (!(h > 0.0) || lower[i] == upper[i]) {
      continue;
    }
    const bool up_ok = x[i] + h <= upper[i];
    const bool down_ok = x[i] - h >= lower[i];
    Eigen::VectorXd xp = x;
    Eigen::VectorXd xm = x;
    if (up_ok && down_ok) {
      xp[i] += h;
      xm[i] -= h;
      f(xp, &gp);
      f(xm, &gm);
      H.col(i) = (gp - gm) / (2.0 * h);
    } else if (up_ok) {
      xp[i] += h;
      f(xp, &gp);
      H.col(i) = (gp - g0) / h;
    } else {
      xm[i] -= h;
      f(xm, &gm);
      H.col(i) = (g0 - gm) / h;
    }
  }
  return 0.5 * (H + H.transpose());
}

} // namespace rsm
