#include <rsm/estimate.hpp>
#include <rsm/optimize.hpp>

#include <boost/math/tools/minima.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace rsm {

namespace {

using detail::sigmoid;
using detail::softplus_increment;

void require(bool ok, const char* what) {
  if (!ok) {
    throw std::invalid_argument(what);
  }
}

// ln f or ln S of one spin with derivatives in (gamma, eps, kT).
struct SpinTerm {
  double value = 0.0;
  std::array<double, 3> d{};
};

SpinTerm spin_log_survival(double gamma, double kT, double r, double eps, double t) {
  const double x0 = eps / kT;
  const double x = (eps + r * t) / kT;
  const double delta = softplus_increment(x0, r * t / kT);
  SpinTerm out;
  out.value = -(gamma * kT / r) * delta;
  out.d[0] = -(kT / r) * delta;
  out.d[1] = -(gamma / r) * (sigmoid(x) - sigmoid(x0));
  out.d[2] = -(gamma / r) * delta + (gamma / r) * (x * sigmoid(x) - x0 * sigmoid(x0));
  return out;
}

SpinTerm spin_log_pdf(double gamma, double kT, double r, double eps, double t) {
  SpinTerm out = spin_log_survival(gamma, kT, r, eps, t);
  const double x = (eps + r * t) / kT;
  const double s_neg = sigmoid(-x);
  out.value += std::log(gamma) + detail::log_sigmoid(x);
  out.d[0] += 1.0 / gamma;
  out.d[1] += s_neg / kT;
  out.d[2] += -x * s_neg / kT;
  return out;
}

double log_add_exp(double a, double b) {
  if (a == -std::numeric_limits<double>::infinity()) {
    return b;
  }
  if (b == -std::numeric_limits<double>::infinity()) {
    return a;
  }
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

// Mixes per-spin log terms with weight p_up; accumulates the gradient in
// physical parameters (gamma, T_e, eps0_down, E_Z, p_up).
double mix_terms(const SpinTerm& up, const SpinTerm& down, double p_up, std::array<double, 5>* grad,
                 double weight) {
  const double a_up = p_up > 0.0 ? std::log(p_up) + up.value : -std::numeric_limits<double>::infinity();
  const double a_down = p_up < 1.0 ? std::log1p(-p_up) + down.value : -std::numeric_limits<double>::infinity();
  const double lm = log_add_exp(a_up, a_down);
  if (grad) {
    const double w_up = std::exp(a_up - lm);
    const double w_down = std::exp(a_down - lm);
    auto& g = *grad;
    g[0] += weight * (w_up * up.d[0] + w_down * down.d[0]);
    g[1] += weight * constants::k_B * (w_up * up.d[2] + w_down * down.d[2]);
    g[2] += weight * (w_up * up.d[1] + w_down * down.d[1]);
    g[3] += weight * w_up * up.d[1];
    g[4] += weight * (std::exp(up.value - lm) - std::exp(down.value - lm));
  }
  return lm;
}

std::string format_flag(const char* name, const char* what) {
  std::ostringstream os;
  os << name << ' ' << what;
  return os.str();
}

// Internal coordinates: log rates/temperatures, energies in units of the
// initial k_B T_e.
struct Scaling {
  double energy = 1.0;

  Eigen::VectorXd to_u(const MixtureParams& p) const {
    Eigen::VectorXd u(5);
    u << std::log(p.gamma), std::log(p.T_e), p.eps0_down / energy, p.E_Z / energy, p.p_up;
    return u;
  }
  MixtureParams from_u(const Eigen::VectorXd& u) const {
    return MixtureParams{std::exp(u[0]), std::exp(u[1]), u[2] * energy, u[3] * energy, u[4]};
  }
  // d(physical)/d(u), diagonal.
  Eigen::VectorXd jacobian(const MixtureParams& p) const {
    Eigen::VectorXd j(5);
    j << p.gamma, p.T_e, energy, energy, 1.0;
    return j;
  }
};

using LogLik = std::function<double(const MixtureParams&, std::array<double, 5>*)>;

MixtureFit run_mixture_fit(const LogLik& loglik, std::size_t n_shots, double r, const MixtureParams& init,
                           const MixtureBounds& bounds, const MixtureFitOptions& options) {
  require(bounds.contains(init), "fit_mixture: init outside bounds");
  const Scaling sc{constants::k_B * init.T_e};
  Eigen::VectorXd lo = sc.to_u(bounds.lower);
  Eigen::VectorXd hi = sc.to_u(bounds.upper);
  const Eigen::VectorXd u_init = sc.to_u(init);
  if (options.freeze_T_e) {
    lo[1] = hi[1] = u_init[1];
  }
  if (options.freeze_E_Z) {
    lo[3] = hi[3] = u_init[3];
  }

  const Objective objective = [&](const Eigen::VectorXd& u, Eigen::VectorXd* grad) {
    const MixtureParams p = sc.from_u(u);
    std::array<double, 5> g{};
    const double ll = loglik(p, grad ? &g : nullptr);
    if (grad) {
      const Eigen::VectorXd j = sc.jacobian(p);
      grad->resize(5);
      for (int i = 0; i < 5; ++i) {
        (*grad)[i] = -g[static_cast<std::size_t>(i)] * j[i];
      }
    }
    return -ll;
  };

  // Starts: the supplied init, then jittered copies.
  std::vector<Eigen::VectorXd> starts{u_init};
  for (std::size_t j = 1; j <= options.n_jitter; ++j) {
    Rng rng(derive_seed(options.seed, 0x5717, j));
    Eigen::VectorXd u = u_init;
    u[0] += 0.3 * rng.normal();
    u[1] += 0.1 * rng.normal();
    u[2] += 1.0 * rng.normal();
    u[3] *= std::exp(0.15 * rng.normal());
    u[4] += 0.15 * rng.normal();
    const Eigen::VectorXd margin = 1e-6 * (hi - lo);
    starts.push_back(u.cwiseMax(lo + margin).cwiseMin(hi - margin));
  }

  MixtureFit fit;
  fit.r = r;
  fit.n_shots = n_shots;
  fit.init_log_likelihood = -objective(u_init, nullptr) * static_cast<double>(n_shots);
  OptimizeResult best;
  bool have = false;
  for (std::size_t j = 0; j < starts.size(); ++j) {
    OptimizeResult res = minimize_box(objective, starts[j], lo, hi);
    if (!std::isfinite(res.value)) {
      continue;
    }
    if (!have || res.value < best.value) {
      best = std::move(res);
      fit.best_start = j;
      have = true;
    }
  }
  if (!have) {
    throw FitDiagnostic("fit_mixture: likelihood not finite at any start");
  }
  fit.params = sc.from_u(best.x);
  fit.log_likelihood = -best.value * static_cast<double>(n_shots);
  if (!best.converged) {
    fit.status = FitStatus::not_converged;
    fit.flags.push_back("optimizer: " + best.message);
  }

  // Observed information in the free internal coordinates.
  std::vector<int> free;
  for (int i = 0; i < 5; ++i) {
    if (lo[i] < hi[i]) {
      free.push_back(i);
    }
  }
  const Eigen::VectorXd step = Eigen::VectorXd::Constant(5, 1e-4);
  const Eigen::MatrixXd H = numeric_hessian(objective, best.x, step, lo, hi) * static_cast<double>(n_shots);
  const auto m = static_cast<Eigen::Index>(free.size());
  Eigen::MatrixXd info(m, m);
  for (Eigen::Index a = 0; a < m; ++a) {
    for (Eigen::Index b = 0; b < m; ++b) {
      info(a, b) = H(free[static_cast<std::size_t>(a)], free[static_cast<std::size_t>(b)]);
    }
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(info);
  const double max_ev = eig.eigenvalues().cwiseAbs().maxCoeff();
  const bool definite = info.allFinite() && eig.eigenvalues().minCoeff() > 1e-12 * max_ev;
  const Eigen::VectorXd jac = sc.jacobian(fit.params);
  fit.covariance.setZero();
  if (definite) {
    const Eigen::MatrixXd cov_u =
        eig.eigenvectors() * eig.eigenvalues().cwiseInverse().asDiagonal() * eig.eigenvectors().transpose();
    for (Eigen::Index a = 0; a < m; ++a) {
      for (Eigen::Index b = 0; b < m; ++b) {
        const int i = free[static_cast<std::size_t>(a)];
        const int k = free[static_cast<std::size_t>(b)];
        fit.covariance(i, k) = jac[i] * cov_u(a, b) * jac[k];
      }
    }
  } else {
    fit.covariance.setConstant(std::numeric_limits<double>::quiet_NaN());
    fit.flags.emplace_back("information matrix not positive definite");
  }

  for (int i : free) {
    const double span = hi[i] - lo[i];
    if (best.x[i] - lo[i] <= 1e-6 * span || hi[i] - best.x[i] <= 1e-6 * span) {
      fit.flags.push_back(format_flag(MixtureParams::names[static_cast<std::size_t>(i)], "at bound"));
      if (fit.status == FitStatus::ok) {
        fit.status = FitStatus::boundary_pinned;
      }
    }
  }
  const double kT = constants::k_B * fit.params.T_e;
  const bool ez_null = !options.freeze_E_Z && (fit.params.E_Z < 0.05 * kT ||
                                               (definite && fit.params.E_Z < 2.0 * fit.error(3)));
  if (ez_null) {
    fit.flags.emplace_back("E_Z consistent with zero: p_up unidentifiable");
    fit.status = FitStatus::unidentifiable;
  } else if (!definite && (fit.status == FitStatus::ok || fit.status == FitStatus::boundary_pinned)) {
    fit.status = FitStatus::indefinite_information;
  }
  return fit;
}

double mixture_survival(const MixtureParams& p, double r, double t) {
  const ReadModel m = p.model(r);
  return p.p_up * std::exp(tunnel_out_log_survival(m, Spin::up, t)) +
         (1.0 - p.p_up) * std::exp(tunnel_out_log_survival(m, Spin::down, t));
}

std::size_t count_free(const MixtureFitOptions& o) {
  return 5 - (o.freeze_T_e ? 1 : 0) - (o.freeze_E_Z ? 1 : 0);
}

template <class F>
double grid_then_brent(F&& f, double lo, double hi, std::size_t grid, double* best_value) {
  double best_x = lo;
  double best_f = std::numeric_limits<double>::infinity();
  std::size_t best_i = 0;
  for (std::size_t i = 0; i <= grid; ++i) {
    const double x = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(grid);
    const double v = f(x);
    if (v < best_f) {
      best_f = v;
      best_x = x;
      best_i = i;
    }
  }
  const double h = (hi - lo) / static_cast<double>(grid);
  const double a = best_i == 0 ? lo : best_x - h;
  const double b = best_i == grid ? hi : best_x + h;
  std::uintmax_t iters = 200;
  const auto [x, v] = boost::math::tools::brent_find_minima(f, a, b, 52, iters);
  if (v < best_f) {
    best_f = v;
    best_x = x;
  }
  if (best_value) {
    *best_value = best_f;
  }
  return best_x;
}

} // namespace

std::string_view to_string(FitStatus s) {
  switch (s) {
  case FitStatus::ok:
    return "ok";
  case FitStatus::not_converged:
    return "not_converged";
  case FitStatus::boundary_pinned:
    return "boundary_pinned";
  case FitStatus::indefinite_information:
    return "indefinite_information";
  case FitStatus::unidentifiable:
    return "unidentifiable";
  }
  return "unknown";
}

MixtureBounds MixtureBounds::around(const MixtureParams& init) {
  const double kT = constants::k_B * init.T_e;
  MixtureBounds b;
  b.lower = {init.gamma / 20.0, init.T_e / 20.0, init.eps0_down - 40.0 * kT, 0.0, 0.0};
  b.upper = {init.gamma * 20.0, init.T_e * 20.0, init.eps0_down + 40.0 * kT, std::max(40.0 * kT, 3.0 * init.E_Z),
             1.0};
  return b;
}

bool MixtureBounds::contains(const MixtureParams& p) const {
  const auto v = p.values();
  const auto l = lower.values();
  const auto u = upper.values();
  for (std::size_t i = 0; i < MixtureParams::size; ++i) {
    if (!(v[i] >= l[i] && v[i] <= u[i])) {
      return false;
    }
  }
  return lower.gamma > 0.0 && lower.T_e > 0.0;
}

MixtureData MixtureData::from(std::span<const std::optional<double>> t_outs, double t_read) {
  MixtureData d;
  d.t_read = t_read;
  for (const auto& t : t_outs) {
    if (t && *t < t_read) {
      d.t_outs.push_back(*t);
    } else {
      ++d.n_censored;
    }
  }
  return d;
}

double mixture_log_likelihood(const MixtureData& data, double r, const MixtureParams& p,
                              std::array<double, 5>* grad) {
  require(p.gamma > 0.0 && p.T_e > 0.0 && r > 0.0, "mixture_log_likelihood: gamma, T_e and r must be > 0");
  require(p.p_up >= 0.0 && p.p_up <= 1.0, "mixture_log_likelihood: p_up must lie in [0, 1]");
  const std::size_t n = data.n_shots();
  require(n > 0, "mixture_log_likelihood: no shots");
  if (grad) {
    grad->fill(0.0);
  }
  const double kT = constants::k_B * p.T_e;
  const double eps_up = p.eps0_down + p.E_Z;
  const double w = 1.0 / static_cast<double>(n);
  double ll = 0.0;
  for (double t : data.t_outs) {
    const SpinTerm up = spin_log_pdf(p.gamma, kT, r, eps_up, t);
    const SpinTerm down = spin_log_pdf(p.gamma, kT, r, p.eps0_down, t);
    ll += mix_terms(up, down, p.p_up, grad, w);
  }
  if (data.n_censored > 0) {
    const SpinTerm up = spin_log_survival(p.gamma, kT, r, eps_up, data.t_read);
    const SpinTerm down = spin_log_survival(p.gamma, kT, r, p.eps0_down, data.t_read);
    const double wc = w * static_cast<double>(data.n_censored);
    ll += static_cast<double>(data.n_censored) * mix_terms(up, down, p.p_up, grad, wc);
  }
  return ll * w;
}

MixtureFit fit_mixture(const MixtureData& data, double r, const MixtureParams& init, const MixtureBounds& bounds,
                       const MixtureFitOptions& options) {
  require(data.t_outs.size() >= 100, "fit_mixture: need at least 100 uncensored t_out values");
  require(r > 0.0, "fit_mixture: r must be > 0");
  for (double t : data.t_outs) {
    require(t >= 0.0 && t < data.t_read, "fit_mixture: t_out values must lie in [0, t_read)");
  }
  const LogLik loglik = [&](const MixtureParams& p, std::array<double, 5>* g) {
    return mixture_log_likelihood(data, r, p, g);
  };
  MixtureFit fit = run_mixture_fit(loglik, data.n_shots(), r, init, bounds, options);
  fit.n_censored = data.n_censored;

  double t_hi = data.t_read;
  if (!std::isfinite(t_hi)) {
    t_hi = *std::max_element(data.t_outs.begin(), data.t_outs.end()) * (1.0 + 1e-9);
  }
  const double width = options.gof_bin_width > 0.0 ? options.gof_bin_width : t_hi / 40.0;
  std::vector<std::optional<double>> all(data.t_outs.begin(), data.t_outs.end());
  all.resize(all.size() + (std::isfinite(data.t_read) ? data.n_censored : 0));
  const Histogram h = build_histogram(all, width, t_hi);
  const GoodnessOfFit gof = mixture_goodness_of_fit(h, r, fit.params, count_free(options));
  fit.chi2_dof = gof.chi2_dof();
  fit.dof = gof.dof;
  return fit;
}

MixtureFit fit_mixture_binned(const Histogram& hist, double r, const MixtureParams& init,
                              const MixtureBounds& bounds, const MixtureFitOptions& options) {
  require(hist.observed() >= 100, "fit_mixture_binned: need at least 100 binned t_out values");
  require(r > 0.0, "fit_mixture_binned: r must be > 0");
  const std::size_t n = hist.n_total;
  const LogLik loglik = [&](const MixtureParams& p, std::array<double, 5>* grad) {
    if (grad) {
      grad->fill(0.0);
    }
    const double kT = constants::k_B * p.T_e;
    const double eps_up = p.eps0_down + p.E_Z;
    const double w = 1.0 / static_cast<double>(n);
    double ll = 0.0;
    SpinTerm up_a = spin_log_survival(p.gamma, kT, r, eps_up, hist.edge(0));
    SpinTerm dn_a = spin_log_survival(p.gamma, kT, r, p.eps0_down, hist.edge(0));
    for (std::size_t i = 0; i < hist.bins(); ++i) {
      const SpinTerm up_b = spin_log_survival(p.gamma, kT, r, eps_up, hist.edge(i + 1));
      const SpinTerm dn_b = spin_log_survival(p.gamma, kT, r, p.eps0_down, hist.edge(i + 1));
      if (hist.counts[i] > 0) {
        // P_i = p (S_u(a) - S_u(b)) + (1 - p) (S_d(a) - S_d(b))
        const double su_a = std::exp(up_a.value);
        const double su_b = std::exp(up_b.value);
        const double sd_a = std::exp(dn_a.value);
        const double sd_b = std::exp(dn_b.value);
        const double mass_u = -su_a * std::expm1(up_b.value - up_a.value);
        const double mass_d = -sd_a * std::expm1(dn_b.value - dn_a.value);
        const double P = p.p_up * mass_u + (1.0 - p.p_up) * mass_d;
        const double c = static_cast<double>(hist.counts[i]);
        ll += c * std::log(P);
        if (grad) {
          std::array<double, 3> du{};
          std::array<double, 3> dd{};
          for (std::size_t k = 0; k < 3; ++k) {
            du[k] = su_a * up_a.d[k] - su_b * up_b.d[k];
            dd[k] = sd_a * dn_a.d[k] - sd_b * dn_b.d[k];
          }
          const double s = w * c / P;
          auto& g = *grad;
          g[0] += s * (p.p_up * du[0] + (1.0 - p.p_up) * dd[0]);
          g[1] += s * constants::k_B * (p.p_up * du[2] + (1.0 - p.p_up) * dd[2]);
          g[2] += s * (p.p_up * du[1] + (1.0 - p.p_up) * dd[1]);
          g[3] += s * p.p_up * du[1];
          g[4] += s * (mass_u - mass_d);
        }
      }
      up_a = up_b;
      dn_a = dn_b;
    }
    if (hist.censored > 0) {
      const double wc = w * static_cast<double>(hist.censored);
      ll += static_cast<double>(hist.censored) * mix_terms(up_a, dn_a, p.p_up, grad, wc);
    }
    return ll * w;
  };
  MixtureFit fit = run_mixture_fit(loglik, n, r, init, bounds, options);
  fit.n_censored = hist.censored;
  const GoodnessOfFit gof = mixture_goodness_of_fit(hist, r, fit.params, count_free(options));
  fit.chi2_dof = gof.chi2_dof();
  fit.dof = gof.dof;
  return fit;
}

GoodnessOfFit mixture_goodness_of_fit(const Histogram& hist, double r, const MixtureParams& p, std::size_t n_free) {
  GoodnessOfFit out;
  const auto n = static_cast<double>(hist.n_total);
  if (hist.n_total == 0) {
    return out;
  }
  std::vector<double> expected;
  std::vector<double> observed;
  double s_prev = mixture_survival(p, r, hist.edge(0));
  for (std::size_t i = 0; i < hist.bins(); ++i) {
    const double s_next = mixture_survival(p, r, hist.edge(i + 1));
    expected.push_back(n * (s_prev - s_next));
    observed.push_back(static_cast<double>(hist.counts[i]));
    s_prev = s_next;
  }
  if (hist.censored > 0 || s_prev * n >= 5.0) {
    expected.push_back(n * s_prev);
    observed.push_back(static_cast<double>(hist.censored));
  }
  double e_acc = 0.0;
  double o_acc = 0.0;
  std::size_t cells = 0;
  for (std::size_t i = 0; i < expected.size(); ++i) {
    e_acc += expected[i];
    o_acc += observed[i];
    if (e_acc >= 5.0) {
      out.chi2 += (o_acc - e_acc) * (o_acc - e_acc) / e_acc;
      ++cells;
      e_acc = 0.0;
      o_acc = 0.0;
    }
  }
  if (e_acc > 0.0 && cells > 0) {
    out.chi2 += (o_acc - e_acc) * (o_acc - e_acc) / std::max(e_acc, 1e-300);
  }
  out.dof = cells > n_free + 1 ? cells - n_free - 1 : 0;
  return out;
}

MixtureParams guess_mixture_init(const MixtureData& data, double r, double gamma, double T_e) {
  require(data.t_outs.size() >= 2, "guess_mixture_init: need at least two t_out values");
  std::vector<double> t = data.t_outs;
  std::sort(t.begin(), t.end());
  double lo = t.front();
  double hi = t.back();
  double cut = 0.5 * (lo + hi);
  for (int it = 0; it < 100; ++it) {
    const auto split = std::upper_bound(t.begin(), t.end(), cut);
    if (split == t.begin() || split == t.end()) {
      break;
    }
    const double m_lo = std::accumulate(t.begin(), split, 0.0) / static_cast<double>(split - t.begin());
    const double m_hi = std::accumulate(split, t.end(), 0.0) / static_cast<double>(t.end() - split);
    const double next = 0.5 * (m_lo + m_hi);
    if (next == cut) {
      break;
    }
    cut = next;
  }
  const auto split = std::upper_bound(t.begin(), t.end(), cut);
  const auto n_lo = static_cast<std::size_t>(split - t.begin());
  const double med_lo = t[n_lo / 2];
  const double med_hi = t[n_lo + (t.size() - n_lo) / 2];
  const double kT = constants::k_B * T_e;
  MixtureParams p;
  p.gamma = gamma;
  p.T_e = T_e;
  p.p_up = std::clamp(static_cast<double>(n_lo) / static_cast<double>(data.n_shots()), 0.02, 0.98);
  p.E_Z = std::max(0.5 * kT, r * (med_hi - med_lo));
  p.eps0_down = kT * std::log(r / (gamma * kT)) - r * med_hi;
  return p;
}

DeltaT extract_delta_t(const MixtureFit& fit, double r) {
  require(r > 0.0, "extract_delta_t: r must be > 0");
  if (!(fit.params.E_Z > 0.0)) {
    return DeltaT{};
  }
  const ReadModel m = fit.params.model(r);
  if (!peak_time(m, Spin::up).interior) {
    throw FitDiagnostic("extract_delta_t: fitted spin-up peak sits at t = 0");
  }
  DeltaT out;
  out.delta_E = fit.params.E_Z;
  out.delta_E_error = fit.error(3);
  out.delta_t = out.delta_E / r;
  out.delta_t_error = out.delta_E_error / r;
  return out;
}

GFactorFit fit_g_factor(std::span<const FieldScanPoint> points, bool free_intercept) {
  require(points.size() >= 3, "fit_g_factor: need at least 3 points");
  const bool weighted = std::all_of(points.begin(), points.end(), [](const auto& p) { return p.error > 0.0; });
  const Eigen::Index n = static_cast<Eigen::Index>(points.size());
  const Eigen::Index k = free_intercept ? 2 : 1;
  Eigen::MatrixXd X(n, k);
  Eigen::VectorXd y(n);
  Eigen::VectorXd w(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& p = points[static_cast<std::size_t>(i)];
    X(i, 0) = p.B;
    if (free_intercept) {
      X(i, 1) = 1.0;
    }
    y[i] = p.value;
    w[i] = weighted ? 1.0 / (p.error * p.error) : 1.0;
  }
  const auto [bmin, bmax] = std::minmax_element(points.begin(), points.end(),
                                                [](const auto& a, const auto& b) { return a.B < b.B; });
  if (!(bmax->B > bmin->B) && free_intercept) {
    throw std::invalid_argument("fit_g_factor: all fields equal, slope undetermined");
  }
  const Eigen::MatrixXd A = X.transpose() * w.asDiagonal() * X;
  const Eigen::VectorXd rhs = X.transpose() * w.asDiagonal() * y;
  Eigen::LDLT<Eigen::MatrixXd> ldlt(A);
  if (ldlt.info() != Eigen::Success || !(std::abs(A.determinant()) > 0.0)) {
    throw std::invalid_argument("fit_g_factor: singular design");
  }
  const Eigen::VectorXd beta = ldlt.solve(rhs);
  Eigen::MatrixXd cov = A.inverse();
  const Eigen::VectorXd resid = y - X * beta;
  GFactorFit out;
  out.chi2 = resid.dot(w.asDiagonal() * resid);
  out.dof = static_cast<std::size_t>(n - k);
  if (!weighted && out.dof > 0) {
    cov *= out.chi2 / static_cast<double>(out.dof);
  }
  out.free_intercept = free_intercept;
  out.g = beta[0] / constants::mu_B;
  out.g_error = std::sqrt(cov(0, 0)) / constants::mu_B;
  if (free_intercept) {
    out.intercept = beta[1];
    out.intercept_error = std::sqrt(cov(1, 1));
    out.intercept_significant = std::abs(out.intercept) > 2.0 * out.intercept_error;
  }
  return out;
}

DecayFit fit_exponential_decay(std::span<const DecayPoint> scan) {
  require(scan.size() >= 4, "fit_exponential_decay: need at least 4 points");
  const bool weighted = std::all_of(scan.begin(), scan.end(), [](const auto& p) { return p.error > 0.0; });
  std::vector<double> w(scan.size());
  double t_max = 0.0;
  double t_min_pos = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < scan.size(); ++i) {
    require(scan[i].t_load >= 0.0, "fit_exponential_decay: t_load must be >= 0");
    w[i] = weighted ? 1.0 / (scan[i].error * scan[i].error) : 1.0;
    t_max = std::max(t_max, scan[i].t_load);
    if (scan[i].t_load > 0.0) {
      t_min_pos = std::min(t_min_pos, scan[i].t_load);
    }
  }
  require(t_max > 0.0, "fit_exponential_decay: t_load values must not all be zero");

  struct Linear {
    double a = 0.0;
    double c = 0.0;
    bool clamped = false;
    double chi2 = 0.0;
  };
  // Amplitude and offset are linear given T1.
  const auto solve_linear = [&](double T1) {
    double see = 0, se = 0, s1 = 0, sey = 0, sy = 0;
    std::vector<double> e(scan.size());
    for (std::size_t i = 0; i < scan.size(); ++i) {
      e[i] = std::exp(-scan[i].t_load / T1);
      see += w[i] * e[i] * e[i];
      se += w[i] * e[i];
      s1 += w[i];
      sey += w[i] * e[i] * scan[i].fraction;
      sy += w[i] * scan[i].fraction;
    }
    Linear L;
    const double det = see * s1 - se * se;
    if (std::abs(det) > 1e-14 * see * s1) {
      L.a = (sey * s1 - se * sy) / det;
      L.c = (see * sy - se * sey) / det;
    } else {
      L.c = 0.5;
      L.clamped = true;
    }
    if (L.c < 0.0 || L.c > 1.0 || L.clamped) {
      L.c = std::clamp(L.c, 0.0, 1.0);
      L.clamped = true;
      L.a = (sey - L.c * se) / see;
    }
    for (std::size_t i = 0; i < scan.size(); ++i) {
      const double r = scan[i].fraction - (L.a * e[i] + L.c);
      L.chi2 += w[i] * r * r;
    }
    return L;
  };

  const double log_lo = std::log(std::min(t_min_pos, t_max) / 50.0);
  const double log_hi = std::log(t_max * 50.0);
  double best_chi2 = 0.0;
  const double log_T1 = grid_then_brent([&](double lt) { return solve_linear(std::exp(lt)).chi2; }, log_lo,
                                          log_hi, 400, &best_chi2);
  DecayFit out;
  out.T1 = std::exp(log_T1);
  const Linear L = solve_linear(out.T1);
  out.amplitude = L.a;
  out.offset = L.c;
  out.chi2 = L.chi2;
  const std::size_t n_par = L.clamped ? 2 : 3;
  out.dof = scan.size() > n_par ? scan.size() - n_par : 0;

  // Gauss-Newton covariance in (a, T1, c).
  const Eigen::Index k = static_cast<Eigen::Index>(n_par);
  Eigen::MatrixXd J(static_cast<Eigen::Index>(scan.size()), k);
  for (std::size_t i = 0; i < scan.size(); ++i) {
    const double t = scan[i].t_load;
    const double e = std::exp(-t / out.T1);
    const auto row = static_cast<Eigen::Index>(i);
    J(row, 0) = e;
    J(row, 1) = out.amplitude * t * e / (out.T1 * out.T1);
    if (!L.clamped) {
      J(row, 2) = 1.0;
    }
  }
  const Eigen::Map<const Eigen::VectorXd> wv(w.data(), static_cast<Eigen::Index>(w.size()));
  const Eigen::MatrixXd A = J.transpose() * wv.asDiagonal() * J;
  Eigen::FullPivLU<Eigen::MatrixXd> lu(A);
  if (lu.isInvertible()) {
    Eigen::MatrixXd cov = lu.inverse();
    if (!weighted && out.dof > 0) {
      cov *= out.chi2 / static_cast<double>(out.dof);
    }
    out.amplitude_error = std::sqrt(std::max(0.0, cov(0, 0)));
    out.T1_error = std::sqrt(std::max(0.0, cov(1, 1)));
    out.offset_error = L.clamped ? 0.0 : std::sqrt(std::max(0.0, cov(2, 2)));
  } else {
    out.amplitude_error = out.T1_error = out.offset_error = std::numeric_limits<double>::quiet_NaN();
  }
  if (L.clamped) {
    out.flags.emplace_back("offset at bound");
  }
  if (log_T1 <= log_lo + 1e-6 || log_T1 >= log_hi - 1e-6) {
    out.flags.emplace_back("T1 at search limit");
    out.status = FitStatus::boundary_pinned;
  }
  if (!(std::abs(out.amplitude) > 2.0 * out.amplitude_error) || out.amplitude <= 0.0) {
    out.flags.emplace_back("amplitude consistent with zero: T1 unidentifiable");
    out.status = FitStatus::unidentifiable;
  }
  return out;
}

RelaxationLawFit fit_rate_field_law(std::span<const FieldScanPoint> points) {
  require(points.size() >= 3, "fit_rate_field_law: need at least 3 points");
  const bool weighted = std::all_of(points.begin(), points.end(), [](const auto& p) { return p.error > 0.0; });
  const Eigen::Index n = static_cast<Eigen::Index>(points.size());
  Eigen::MatrixXd X(n, 2);
  Eigen::VectorXd y(n);
  Eigen::VectorXd w(n);
  double b_min = std::numeric_limits<double>::infinity();
  double b_max = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& p = points[static_cast<std::size_t>(i)];
    require(p.B > 0.0, "fit_rate_field_law: B must be > 0");
    X(i, 0) = p.B * p.B * p.B;
    X(i, 1) = std::pow(p.B, 7);
    y[i] = p.value;
    w[i] = weighted ? 1.0 / (p.error * p.error) : 1.0;
    b_min = std::min(b_min, p.B);
    b_max = std::max(b_max, p.B);
  }
  RelaxationLawFit out;
  if (b_max / b_min < 1.5) {
    out.flags.emplace_back("field span ratio < 1.5: B^3 and B^7 nearly collinear");
  }
  const Eigen::MatrixXd A = X.transpose() * w.asDiagonal() * X;
  const Eigen::VectorXd rhs = X.transpose() * w.asDiagonal() * y;
  const auto chi2_of = [&](const Eigen::Vector2d& k) {
    const Eigen::VectorXd r = y - X * k;
    return r.dot(w.asDiagonal() * r);
  };

  // Two-variable non-negative least squares by enumerating active sets.
  Eigen::Vector2d best = Eigen::Vector2d::Zero();
  double best_chi2 = chi2_of(best);
  Eigen::FullPivLU<Eigen::MatrixXd> lu(A);
  if (lu.isInvertible()) {
    const Eigen::Vector2d full = lu.solve(rhs);
    if ((full.array() >= 0.0).all()) {
      best = full;
      best_chi2 = chi2_of(full);
    }
  }
  if (best.isZero()) {
    for (int j = 0; j < 2; ++j) {
      if (A(j, j) > 0.0) {
        Eigen::Vector2d k = Eigen::Vector2d::Zero();
        k[j] = std::max(0.0, rhs[j] / A(j, j));
        const double c = chi2_of(k);
        if (c < best_chi2) {
          best = k;
          best_chi2 = c;
        }
      }
    }
  }
  out.law = RelaxationLaw{best[0], best[1]};
  out.chi2 = best_chi2;
  out.dof = points.size() - 2;
  if (lu.isInvertible()) {
    Eigen::MatrixXd cov = lu.inverse();
    if (!weighted && out.dof > 0) {
      cov *= out.chi2 / static_cast<double>(out.dof);
    }
    out.K_J_error = std::sqrt(std::max(0.0, cov(0, 0)));
    out.K_ph_error = std::sqrt(std::max(0.0, cov(1, 1)));
    const double corr = cov(0, 1) / std::sqrt(cov(0, 0) * cov(1, 1));
    if (std::abs(corr) > 0.999) {
      out.flags.emplace_back("K_J and K_ph correlation above 0.999");
    }
  } else {
    out.K_J_error = out.K_ph_error = std::numeric_limits<double>::quiet_NaN();
    out.flags.emplace_back("singular design");
  }
  return out;
}

ThermometryFit fit_thermometry(std::span<const ThermometryPoint> scan) {
  require(scan.size() >= 3, "fit_thermometry: need at least 3 points");
  const bool weighted = std::all_of(scan.begin(), scan.end(), [](const auto& p) { return p.error > 0.0; });
  std::vector<double> w(scan.size());
  double t_max = 0.0;
  for (std::size_t i = 0; i < scan.size(); ++i) {
    require(scan[i].T_MXC >= 0.0, "fit_thermometry: T_MXC must be >= 0");
    w[i] = weighted ? 1.0 / (scan[i].error * scan[i].error) : 1.0;
    t_max = std::max(t_max, scan[i].T_MXC);
  }
  require(t_max > 0.0, "fit_thermometry: T_MXC values must not all be zero");

  // width = s * sqrt(T_eff^2 + T^2) with s = k_B / alpha; s is linear.
  const auto slope_for = [&](double T_eff, double* chi2) {
    double sgg = 0.0;
    double sgw = 0.0;
    for (std::size_t i = 0; i < scan.size(); ++i) {
      const double g = std::hypot(T_eff, scan[i].T_MXC);
      sgg += w[i] * g * g;
      sgw += w[i] * g * scan[i].width;
    }
    const double s = sgw / sgg;
    if (chi2) {
      *chi2 = 0.0;
      for (std::size_t i = 0; i < scan.size(); ++i) {
        const double r = scan[i].width - s * std::hypot(T_eff, scan[i].T_MXC);
        *chi2 += w[i] * r * r;
      }
    }
    return s;
  };
  const auto profile = [&](double T_eff) {
    double c = 0.0;
    slope_for(T_eff, &c);
    return c;
  };
  const double T_hi = 10.0 * t_max;
  double chi2 = 0.0;
  const double T_eff = grid_then_brent(profile, 0.0, T_hi, 400, &chi2);
  const double s = slope_for(T_eff, &chi2);

  ThermometryFit out;
  out.law = ThermometryLaw{T_eff, constants::k_B / s};
  out.chi2 = chi2;
  out.dof = scan.size() - 2;
  const double alpha = out.law.alpha_QQ;

  Eigen::MatrixXd J(static_cast<Eigen::Index>(scan.size()), 2);
  for (std::size_t i = 0; i < scan.size(); ++i) {
    const double g = std::hypot(T_eff, scan[i].T_MXC);
    const auto row = static_cast<Eigen::Index>(i);
    J(row, 0) = g > 0.0 ? s * T_eff / g : 0.0;
    J(row, 1) = -s * g / alpha;
  }
  const Eigen::Map<const Eigen::VectorXd> wv(w.data(), static_cast<Eigen::Index>(w.size()));
  const Eigen::MatrixXd A = J.transpose() * wv.asDiagonal() * J;
  const double scale = (!weighted && out.dof > 0) ? chi2 / static_cast<double>(out.dof) : 1.0;
  Eigen::FullPivLU<Eigen::MatrixXd> lu(A);
  if (lu.isInvertible()) {
    const Eigen::MatrixXd cov = lu.inverse() * scale;
    out.T_eff_error = std::sqrt(std::max(0.0, cov(0, 0)));
    out.alpha_error = std::sqrt(std::max(0.0, cov(1, 1)));
    const double corr = cov(0, 1) / std::sqrt(cov(0, 0) * cov(1, 1));
    if (std::abs(corr) > 0.995) {
      out.flags.emplace_back("T_eff and alpha_QQ correlation above 0.995");
    }
  } else {
    out.T_eff_error = 0.0;
    out.alpha_error = A(1, 1) > 0.0 ? std::sqrt(scale / A(1, 1)) : std::numeric_limits<double>::quiet_NaN();
  }
  if (T_eff <= 1e-9 * T_hi) {
    out.flags.emplace_back("T_eff at lower bound");
  }
  if (t_max < T_eff) {
    out.flags.emplace_back("plateau-only data: alpha_QQ unidentifiable");
  }
  return out;
}

std::vector<VisibilityPoint> predict_visibility_vs_field(const ReadModel& base, double g, std::span<const double> B) {
  std::vector<VisibilityPoint> out;
  for (double b : B) {
    VisibilityPoint p;
    p.B = b;
    p.E_Z = zeeman_energy(g, b);
    if (p.E_Z > 0.0) {
      ReadModel m = base;
      m.E_Z = p.E_Z;
      const Threshold th = optimal_threshold(m);
      p.t_star = th.t_star;
      p.V_star = th.V_star;
    }
    out.push_back(p);
  }
  return out;
}

ReadModel average_model(std::span<const MixtureFit> fits) {
  require(!fits.empty(), "average_model: no fits");
  ReadModel m{0.0, 0.0, 0.0, 0.0, 0.0};
  for (const auto& f : fits) {
    m.gamma += f.params.gamma;
    m.T_e += f.params.T_e;
    m.eps0_down += f.params.eps0_down;
    m.r += f.r;
  }
  const auto n = static_cast<double>(fits.size());
  m.gamma /= n;
  m.T_e /= n;
  m.eps0_down /= n;
  m.r /= n;
  return m;
}

} // namespace rsm
