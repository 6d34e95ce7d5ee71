#pragma once

// Fitting pipelines: tunnel-out mixture, peak separation and g-factor,
// T1 decay, relaxation-rate law, thermometry and visibility prediction.

#include <rsm/classify.hpp>
#include <rsm/model.hpp>
#include <rsm/rng.hpp>

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace rsm {

/// A fit that ran but whose result cannot be trusted (non-convergence,
/// unidentifiable parameters, invalid derived quantity).
struct FitDiagnostic : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class FitStatus { ok, not_converged, boundary_pinned, indefinite_information, unidentifiable };

std::string_view to_string(FitStatus s);

// ---------------------------------------------------------------------------
// Mixture fit

struct MixtureParams {
  double gamma = 0.0;
  double T_e = 0.0;
  double eps0_down = 0.0;
  double E_Z = 0.0;
  double p_up = 0.5;

  static constexpr std::size_t size = 5;
  static constexpr std::array<const char*, size> names{"gamma", "T_e", "eps0_down", "E_Z", "p_up"};

  ReadModel model(double r) const { return ReadModel{gamma, T_e, r, eps0_down, E_Z}; }
  std::array<double, size> values() const { return {gamma, T_e, eps0_down, E_Z, p_up}; }
  static MixtureParams from(const std::array<double, size>& v) { return {v[0], v[1], v[2], v[3], v[4]}; }
};

struct MixtureBounds {
  MixtureParams lower;
  MixtureParams upper;

  /// Generous box around a starting point: rates and temperature within a
  /// factor 20, detuning within 40 k_B T, E_Z up to 40 k_B T, p_up in [0, 1].
  static MixtureBounds around(const MixtureParams& init);
  bool contains(const MixtureParams& p) const;
};

/// First-exit times of one batch. Shots without an exit before t_read are
/// censored and enter the likelihood through the survival function.
struct MixtureData {
  std::vector<double> t_outs;
  std::size_t n_censored = 0;
  double t_read = std::numeric_limits<double>::infinity();

  static MixtureData from(std::span<const std::optional<double>> t_outs, double t_read);
  std::size_t n_shots() const { return t_outs.size() + n_censored; }
};

struct MixtureFitOptions {
  bool freeze_T_e = false;
  bool freeze_E_Z = false;
  std::size_t n_jitter = 5; ///< starts in addition to the supplied init
  std::uint64_t seed = 0x6d69787475726500ULL;
  double gof_bin_width = 0.0; ///< 0 selects t_read / 40 (or the data span)
};

struct MixtureFit {
  MixtureParams params;
  double r = 0.0;
  Eigen::Matrix<double, 5, 5> covariance = Eigen::Matrix<double, 5, 5>::Zero();
  double log_likelihood = 0.0;
  double init_log_likelihood = 0.0;
  std::size_t n_shots = 0;
  std::size_t n_censored = 0;
  std::size_t best_start = 0;
  FitStatus status = FitStatus::ok;
  std::vector<std::string> flags;
  double chi2_dof = std::numeric_limits<double>::quiet_NaN(); ///< Pearson, on a histogram of the data
  std::size_t dof = 0;

  double error(std::size_t i) const { return std::sqrt(std::max(0.0, covariance(i, i))); }
  ReadModel model() const { return params.model(r); }
};

/// Per-shot mean log-likelihood and its gradient in physical parameters.
double mixture_log_likelihood(const MixtureData& data, double r, const MixtureParams& p,
                              std::array<double, 5>* grad = nullptr);

/// Unbinned maximum likelihood with multi-start.
MixtureFit fit_mixture(const MixtureData& data, double r, const MixtureParams& init, const MixtureBounds& bounds,
                       const MixtureFitOptions& options = {});

/// Poisson-deviance fit to histogram counts; censored count enters as a
/// final bin beyond hist.hi.
MixtureFit fit_mixture_binned(const Histogram& hist, double r, const MixtureParams& init,
                              const MixtureBounds& bounds, const MixtureFitOptions& options = {});

struct GoodnessOfFit {
  double chi2 = 0.0;
  std::size_t dof = 0;
  double chi2_dof() const { return dof == 0 ? std::numeric_limits<double>::quiet_NaN() : chi2 / double(dof); }
};

/// Pearson chi-square of binned counts against the mixture, merging
/// adjacent bins until each expects at least 5 counts.
GoodnessOfFit mixture_goodness_of_fit(const Histogram& hist, double r, const MixtureParams& p, std::size_t n_free);

/// Starting point from the data: two-means split for p_up and the peak
/// separation, gamma and T_e taken from the caller.
MixtureParams guess_mixture_init(const MixtureData& data, double r, double gamma, double T_e);

// ---------------------------------------------------------------------------
// Peak separation and g-factor

struct DeltaT {
  double delta_t = 0.0;
  double delta_t_error = 0.0;
  double delta_E = 0.0;
  double delta_E_error = 0.0;
};

/// Throws FitDiagnostic when the fitted up peak sits at the boundary.
DeltaT extract_delta_t(const MixtureFit& fit, double r);

struct FieldScanPoint {
  double B = 0.0;
  double value = 0.0; ///< delta_E (eV) for g fits, rate (Hz) for T1 law fits
  double error = 0.0;
};

struct GFactorFit {
  double g = 0.0;
  double g_error = 0.0;
  double intercept = 0.0; ///< eV
  double intercept_error = 0.0;
  bool free_intercept = true;
  bool intercept_significant = false; ///< |intercept| > 2 sigma
  double chi2 = 0.0;
  std::size_t dof = 0;
};

GFactorFit fit_g_factor(std::span<const FieldScanPoint> points, bool free_intercept = true);

// ---------------------------------------------------------------------------
// T1 decay

struct DecayPoint {
  double t_load = 0.0;
  double fraction = 0.0;
  double error = 0.0;
};

struct DecayFit {
  double T1 = 0.0;
  double T1_error = 0.0;
  double amplitude = 0.0;
  double amplitude_error = 0.0;
  double offset = 0.0;
  double offset_error = 0.0;
  double chi2 = 0.0;
  std::size_t dof = 0;
  FitStatus status = FitStatus::ok;
  std::vector<std::string> flags;

  double predict(double t) const { return amplitude * std::exp(-t / T1) + offset; }
};

/// Weighted least squares of a exp(-t / T1) + c with c in [0, 1].
DecayFit fit_exponential_decay(std::span<const DecayPoint> scan);

// ---------------------------------------------------------------------------
// Relaxation-rate field law

struct RelaxationLawFit {
  RelaxationLaw law;
  double K_J_error = 0.0;
  double K_ph_error = 0.0;
  double chi2 = 0.0;
  std::size_t dof = 0;
  std::vector<std::string> flags;
};

/// Weighted non-negative least squares on the basis (B^3, B^7).
RelaxationLawFit fit_rate_field_law(std::span<const FieldScanPoint> points);

// ---------------------------------------------------------------------------
// Thermometry

struct ThermometryPoint {
  double T_MXC = 0.0; ///< K
  double width = 0.0; ///< V
  double error = 0.0;
};

struct ThermometryFit {
  ThermometryLaw law;
  double T_eff_error = 0.0;
  double alpha_error = 0.0;
  double chi2 = 0.0;
  std::size_t dof = 0;
  std::vector<std::string> flags;
};

/// Profile fit: the slope k_B / alpha is linear given T_eff >= 0.
ThermometryFit fit_thermometry(std::span<const ThermometryPoint> scan);

// ---------------------------------------------------------------------------
// Visibility versus field

struct VisibilityPoint {
  double B = 0.0;
  double E_Z = 0.0;
  double t_star = std::numeric_limits<double>::quiet_NaN();
  double V_star = 0.5;
};

/// Holds gamma, T_e, eps0_down and r fixed and sets E_Z = g mu_B B.
std::vector<VisibilityPoint> predict_visibility_vs_field(const ReadModel& base, double g, std::span<const double> B);

/// Parameter average across per-field fits, weighted equally.
ReadModel average_model(std::span<const MixtureFit> fits);

// ---------------------------------------------------------------------------
// Bootstrap

struct BootstrapResult {
  Eigen::VectorXd mean;
  Eigen::VectorXd std_error;
  Eigen::VectorXd lower; ///< percentile interval at the requested level
  Eigen::VectorXd upper;
  std::size_t n_resamples = 0;
  std::size_t n_failed = 0;
};

/// Nonparametric bootstrap: resamples `data` with replacement and collects
/// the parameter vectors returned by `fit`. Resample i draws from its own
/// counter-derived stream, so results do not depend on evaluation order.
template <class T, class Fit>
BootstrapResult bootstrap_errors(std::span<const T> data, Fit&& fit, std::size_t n_resamples, std::uint64_t seed,
                                 double level = 0.6827) {
  if (n_resamples < 100) {
    throw std::invalid_argument("bootstrap_errors: n_resamples must be >= 100");
  }
  if (data.empty()) {
    throw std::invalid_argument("bootstrap_errors: data must be non-empty");
  }
  std::vector<Eigen::VectorXd> draws;
  draws.reserve(n_resamples);
  BootstrapResult out;
  out.n_resamples = n_resamples;
  std::vector<T> sample(data.size());
  for (std::size_t i = 0; i < n_resamples; ++i) {
    Rng rng(derive_seed(seed, 0xb0075, i));
    for (auto& s : sample) {
      s = data[rng.below(data.size())];
    }
    try {
      draws.push_back(fit(std::span<const T>(sample)));
    } catch (const std::exception&) {
      ++out.n_failed;
    }
  }
  if (draws.empty()) {
    throw FitDiagnostic("bootstrap_errors: every resample failed");
  }
  const Eigen::Index k = draws.front().size();
  const auto m = static_cast<double>(draws.size());
  out.mean = Eigen::VectorXd::Zero(k);
  for (const auto& d : draws) {
    out.mean += d;
  }
  out.mean /= m;
  out.std_error = Eigen::VectorXd::Zero(k);
  for (const auto& d : draws) {
    out.std_error += (d - out.mean).cwiseAbs2();
  }
  out.std_error = (out.std_error / std::max(1.0, m - 1.0)).cwiseSqrt();
  out.lower.resize(k);
  out.upper.resize(k);
  std::vector<double> col(draws.size());
  const double tail = 0.5 * (1.0 - level);
  for (Eigen::Index j = 0; j < k; ++j) {
    for (std::size_t i = 0; i < draws.size(); ++i) {
      col[i] = draws[i][j];
    }
    std::sort(col.begin(), col.end());
    const auto at = [&](double q) {
      const double pos = q * (m - 1.0);
      const auto lo = static_cast<std::size_t>(std::floor(pos));
      const auto hi = std::min(lo + 1, col.size() - 1);
      return col[lo] + (pos - std::floor(pos)) * (col[hi] - col[lo]);
    };
    out.lower[j] = at(tail);
    out.upper[j] = at(1.0 - tail);
  }
  return out;
}

} // namespace rsm
