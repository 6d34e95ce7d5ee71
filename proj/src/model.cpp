#include <rsm/model.hpp>

#include <boost/math/tools/minima.hpp>
#include <boost/math/tools/roots.hpp>

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace rsm {

namespace {

void require(bool ok, const char* what) {
  if (!ok) {
    throw std::invalid_argument(what);
  }
}

void require_time(double t) { require(t >= 0.0, "time must be non-negative"); }

// Time at which ln S(t) reaches log_s (< 0), by exact inversion of the
// survival function.
double survival_quantile(const detail::SpinKernel& k, double log_s) {
  const double p = k.gamma * k.kT / k.r;
  const double y = detail::softplus(k.x0()) - log_s / p;
  const double x = y + std::log(-std::expm1(-y));
  return std::max(0.0, (k.kT * x - k.eps0) / k.r);
}

} // namespace

std::string_view to_string(Spin s) { return s == Spin::up ? "up" : "down"; }

void ReadModel::validate() const {
  require(std::isfinite(gamma) && gamma > 0.0, "ReadModel: gamma must be > 0");
  require(std::isfinite(T_e) && T_e > 0.0, "ReadModel: T_e must be > 0");
  require(std::isfinite(r) && r > 0.0, "ReadModel: ramp rate r must be > 0");
  require(std::isfinite(eps0_down), "ReadModel: eps0_down must be finite");
  require(std::isfinite(E_Z) && E_Z >= 0.0, "ReadModel: E_Z must be >= 0");
}

void LeverArmMatrix::validate() const {
  for (double a : {a_QQ, a_QS, a_SQ, a_SS}) {
    require(a > 0.0 && a <= 1.0, "LeverArmMatrix: entries must lie in (0, 1]");
  }
  require(a_QQ > a_QS, "LeverArmMatrix: a_QQ must exceed a_QS");
  require(a_SS > a_SQ, "LeverArmMatrix: a_SS must exceed a_SQ");
}

void RampSpec::validate() const {
  require(t_ramp > 0.0, "RampSpec: t_ramp must be > 0");
  require(dV.qubit != 0.0 || dV.sensor != 0.0, "RampSpec: dV must be non-zero");
}

void RelaxationLaw::validate() const {
  require(K_J >= 0.0 && K_ph >= 0.0, "RelaxationLaw: coefficients must be >= 0");
}

void ThermometryLaw::validate() const {
  require(T_eff > 0.0, "ThermometryLaw: T_eff must be > 0");
  require(alpha_QQ > 0.0 && alpha_QQ <= 1.0, "ThermometryLaw: alpha_QQ must lie in (0, 1]");
}

double zeeman_energy(double g, double B) {
  require(B >= 0.0, "zeeman_energy: B must be >= 0");
  return g * constants::mu_B * B;
}

double normalized_detuning(const ReadModel& m, Spin spin, double t) {
  m.validate();
  require_time(t);
  return (m.eps0(spin) + m.r * t) / m.kT();
}

double tunnel_out_log_pdf(const ReadModel& m, Spin spin, double t) {
  m.validate();
  require_time(t);
  return detail::kernel(m, spin).log_pdf(t);
}

double tunnel_out_pdf(const ReadModel& m, Spin spin, double t) {
  return std::exp(tunnel_out_log_pdf(m, spin, t));
}

double tunnel_out_log_survival(const ReadModel& m, Spin spin, double t) {
  m.validate();
  require_time(t);
  return detail::kernel(m, spin).log_survival(t);
}

double tunnel_out_cdf(const ReadModel& m, Spin spin, double t) {
  return -std::expm1(tunnel_out_log_survival(m, spin, t));
}

double mixture_pdf(const ReadModel& m, double p_up, double t) {
  require(p_up >= 0.0 && p_up <= 1.0, "mixture_pdf: p_up must lie in [0, 1]");
  return p_up * tunnel_out_pdf(m, Spin::up, t) + (1.0 - p_up) * tunnel_out_pdf(m, Spin::down, t);
}

double mixture_cdf(const ReadModel& m, double p_up, double t) {
  require(p_up >= 0.0 && p_up <= 1.0, "mixture_cdf: p_up must lie in [0, 1]");
  return p_up * tunnel_out_cdf(m, Spin::up, t) + (1.0 - p_up) * tunnel_out_cdf(m, Spin::down, t);
}

double visibility(const ReadModel& m, double t) {
  m.validate();
  require_time(t);
  const double s_up = std::exp(detail::kernel(m, Spin::up).log_survival(t));
  const double s_down = std::exp(detail::kernel(m, Spin::down).log_survival(t));
  return 0.5 * (1.0 + s_down - s_up);
}

PeakTime peak_time(const ReadModel& m, Spin spin) {
  m.validate();
  const double kT = m.kT();
  const double stationary = (kT * std::log(m.r / (m.gamma * kT)) - m.eps0(spin)) / m.r;
  PeakTime out;
  out.stationary = stationary;
  out.interior = stationary > 0.0;
  out.t = out.interior ? stationary : 0.0;
  return out;
}

Threshold optimal_threshold(const ReadModel& m) {
  m.validate();
  if (!(m.E_Z > 0.0)) {
    throw NoDiscrimination("optimal_threshold: E_Z = 0, spins are indistinguishable");
  }
  const auto up = detail::kernel(m, Spin::up);
  const auto down = detail::kernel(m, Spin::down);
  const auto log_ratio = [&](double t) { return up.log_pdf(t) - down.log_pdf(t); };

  const double lo = peak_time(m, Spin::up).t;
  const double hi = peak_time(m, Spin::down).t;

  double t_star = 0.0;
  if (hi > lo && log_ratio(lo) > 0.0 && log_ratio(hi) < 0.0) {
    std::uintmax_t iters = 200;
    const auto [a, b] = boost::math::tools::toms748_solve(
        log_ratio, lo, hi, boost::math::tools::eps_tolerance<double>(50), iters);
    t_star = 0.5 * (a + b);
  } else {
    // Peaks at the boundary: maximize V directly over the bulk of the
    // spin-down distribution.
    const double t_hi = std::max(survival_quantile(down, -40.0), hi);
    const auto neg_v = [&](double t) {
      return -(std::exp(down.log_survival(t)) - std::exp(up.log_survival(t)));
    };
    std::uintmax_t iters = 500;
    t_star = boost::math::tools::brent_find_minima(neg_v, 0.0, t_hi, 52, iters).first;
  }
  return Threshold{t_star, visibility(m, t_star)};
}

DotDetuning detuning_transform(const LeverArmMatrix& L, const GateVoltages& dV) {
  // eV = e * alpha * V / e
  return DotDetuning{L.a_QQ * dV.qubit + L.a_QS * dV.sensor, L.a_SQ * dV.qubit + L.a_SS * dV.sensor};
}

double ramp_rate(double eps_ramp, double t_ramp) {
  require(t_ramp > 0.0, "ramp_rate: t_ramp must be > 0");
  return std::abs(eps_ramp) / t_ramp;
}

double ramp_rate(const LeverArmMatrix& L, const RampSpec& ramp) {
  ramp.validate();
  return ramp_rate(detuning_transform(L, ramp.dV).qubit, ramp.t_ramp);
}

double relaxation_rate(const RelaxationLaw& law, double B) {
  law.validate();
  require(B >= 0.0, "relaxation_rate: B must be >= 0");
  return law.K_J * B * B * B + law.K_ph * std::pow(B, 7);
}

double crossover_field(const RelaxationLaw& law) {
  law.validate();
  require(law.K_ph > 0.0, "crossover_field: K_ph must be > 0");
  return std::pow(law.K_J / law.K_ph, 0.25);
}

double thermometry_width(const ThermometryLaw& law, double T_MXC) {
  law.validate();
  require(T_MXC >= 0.0, "thermometry_width: T_MXC must be >= 0");
  return constants::k_B * std::hypot(law.T_eff, T_MXC) / law.alpha_QQ;
}

} // namespace rsm
