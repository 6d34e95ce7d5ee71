#pragma once

// Closed-form physics of ramped energy-selective spin readout.
//
// Units throughout: energies in eV, times in s, fields in T, temperatures
// in K, rates in Hz. Detuning is measured upward from the reservoir Fermi
// level; during the read ramp the dot levels rise at rate r > 0, so a
// loaded electron starts at a negative detuning.

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string_view>

namespace rsm {

namespace constants {
inline constexpr double k_B = 8.617333262e-5;   // eV/K
inline constexpr double mu_B = 5.7883818060e-5; // eV/T
inline constexpr double e = 1.602176634e-19;    // C
} // namespace constants

enum class Spin : std::uint8_t { down = 0, up = 1 };

std::string_view to_string(Spin s);

/// Parameters of the non-homogeneous Poisson tunnel-out process during a
/// linear detuning ramp.
struct ReadModel {
  double gamma = 0.0;     ///< maximum tunnel-out rate (Hz)
  double T_e = 0.0;       ///< electron temperature (K)
  double r = 0.0;         ///< detuning ramp rate (eV/s)
  double eps0_down = 0.0; ///< spin-down detuning at read start (eV)
  double E_Z = 0.0;       ///< Zeeman splitting (eV)

  /// Throws std::invalid_argument when an invariant is violated.
  void validate() const;

  double kT() const { return constants::k_B * T_e; }
  double eps0(Spin s) const { return s == Spin::up ? eps0_down + E_Z : eps0_down; }
  /// Dimensionless exponent Γ·k_B·T_e / r of the survival function.
  double shape() const { return gamma * kT() / r; }
};

/// Row = dot {Q, S}, column = gate {Q, S}.
struct LeverArmMatrix {
  double a_QQ = 0.0;
  double a_QS = 0.0;
  double a_SQ = 0.0;
  double a_SS = 0.0;

  void validate() const;
};

struct GateVoltages {
  double qubit = 0.0;  // V
  double sensor = 0.0; // V
};

struct DotDetuning {
  double qubit = 0.0;  // eV
  double sensor = 0.0; // eV
};

struct RampSpec {
  GateVoltages dV;
  double t_ramp = 0.0; // s

  void validate() const;
};

struct RelaxationLaw {
  double K_J = 0.0;  // Hz/T^3
  double K_ph = 0.0; // Hz/T^7

  void validate() const;
};

struct ThermometryLaw {
  double T_eff = 0.0;    // K
  double alpha_QQ = 0.0; // dimensionless

  void validate() const;
};

/// Thrown when an operation needs spin discrimination but E_Z = 0.
struct NoDiscrimination : std::domain_error {
  using std::domain_error::domain_error;
};

double zeeman_energy(double g, double B);

double normalized_detuning(const ReadModel& m, Spin spin, double t);

double tunnel_out_pdf(const ReadModel& m, Spin spin, double t);
double tunnel_out_log_pdf(const ReadModel& m, Spin spin, double t);
double tunnel_out_cdf(const ReadModel& m, Spin spin, double t);
/// ln(1 - C(t)); finite for all t where C(t) < 1 in exact arithmetic.
double tunnel_out_log_survival(const ReadModel& m, Spin spin, double t);

double mixture_pdf(const ReadModel& m, double p_up, double t);
double mixture_cdf(const ReadModel& m, double p_up, double t);

double visibility(const ReadModel& m, double t);

struct Threshold {
  double t_star = 0.0;
  double V_star = 0.5;
};

/// Time that maximizes the visibility. Throws NoDiscrimination for E_Z = 0.
Threshold optimal_threshold(const ReadModel& m);

struct PeakTime {
  double t = 0.0;          ///< location of the maximum of the density
  double stationary = 0.0; ///< analytic stationary point, may be negative
  bool interior = false;   ///< false when the maximum sits at t = 0
};

PeakTime peak_time(const ReadModel& m, Spin spin);

DotDetuning detuning_transform(const LeverArmMatrix& L, const GateVoltages& dV);

double ramp_rate(double eps_ramp, double t_ramp);
/// Detuning ramp rate seen by the qubit dot for a gate-voltage ramp.
double ramp_rate(const LeverArmMatrix& L, const RampSpec& ramp);

double relaxation_rate(const RelaxationLaw& law, double B);
/// Field at which the B^3 and B^7 contributions are equal.
double crossover_field(const RelaxationLaw& law);

/// Fermi-broadened gate-voltage width (V) at mixing-chamber temperature T_MXC.
double thermometry_width(const ThermometryLaw& law, double T_MXC);

namespace detail {

inline double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double ex = std::exp(x);
  return ex / (1.0 + ex);
}

inline double log_sigmoid(double x) { return -softplus(-x); }

/// softplus(x0 + d) - softplus(x0) for d >= 0, accurate when d is small.
inline double softplus_increment(double x0, double d) {
  if (d < 30.0) {
    return std::log1p(sigmoid(x0) * std::expm1(d));
  }
  return softplus(x0 + d) - softplus(x0);
}

/// Unchecked kernels in terms of the energy-scaled quantities. Callers
/// guarantee a valid model and t >= 0.
struct SpinKernel {
  double gamma;
  double kT;
  double r;
  double eps0;

  double x0() const { return eps0 / kT; }
  double log_survival(double t) const {
    return -(gamma * kT / r) * softplus_increment(eps0 / kT, r * t / kT);
  }
  double log_hazard(double t) const {
    return std::log(gamma) + log_sigmoid((eps0 + r * t) / kT);
  }
  double log_pdf(double t) const { return log_hazard(t) + log_survival(t); }
};

inline SpinKernel kernel(const ReadModel& m, Spin s) {
  return SpinKernel{m.gamma, m.kT(), m.r, m.eps0(s)};
}

} // namespace detail

} // namespace rsm
