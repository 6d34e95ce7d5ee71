#include <doctest.h>

#include <rsm/estimate.hpp>
#include <rsm/rng.hpp>
#include <rsm/simulate.hpp>

#include <boost/math/tools/minima.hpp>

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

using namespace rsm;

namespace {

constexpr double kRead = 3e-3;

struct Truth {
  ReadModel m;
  double p_up;
};

MixtureParams params_of(const Truth& t) { return {t.m.gamma, t.m.T_e, t.m.eps0_down, t.m.E_Z, t.p_up}; }

/// Exact first-exit draws, censored at the end of the read window.
MixtureData draw(const Truth& truth, std::size_t n, std::uint64_t seed, double t_read = kRead) {
  Rng rng(seed);
  std::vector<std::optional<double>> t(n);
  for (auto& v : t) {
    const Spin s = rng.uniform() < truth.p_up ? Spin::up : Spin::down;
    v = sample_tunnel_time(truth.m, s, rng.uniform_open());
  }
  return MixtureData::from(t, t_read);
}

Truth device_b(double B, double p_up = 0.5) {
  return {ReadModel{10036.723, 0.84, 0.36809, -0.447467977e-3, zeeman_energy(2.09, B)}, p_up};
}

Truth device_a(double B, double p_up = 0.5) {
  return {ReadModel{5095.844, 0.821, 0.374755, -0.60e-3, zeeman_energy(2.00, B)}, p_up};
}

MixtureFit fit_from_guess(const MixtureData& d, const Truth& truth, MixtureFitOptions opt = {}) {
  const MixtureParams init = guess_mixture_init(d, truth.m.r, 1.3 * truth.m.gamma, 0.9 * truth.m.T_e);
  return fit_mixture(d, truth.m.r, init, MixtureBounds::around(init), opt);
}

bool within_sigma(const MixtureFit& f, const MixtureParams& truth, double k) {
  const auto v = f.params.values();
  const auto t = truth.values();
  for (std::size_t i = 0; i < MixtureParams::size; ++i) {
    if (!(std::abs(v[i] - t[i]) <= k * f.error(i))) {
      return false;
    }
  }
  return true;
}

/// Argmax of the spin density by dense grid then golden-section refinement.
double numeric_peak(const ReadModel& m, Spin s, double t_hi) {
  const auto neg = [&](double t) { return -tunnel_out_pdf(m, s, t); };
  const int n = 20000;
  int best = 0;
  for (int i = 1; i <= n; ++i) {
    if (neg(t_hi * i / n) < neg(t_hi * best / n)) {
      best = i;
    }
  }
  const double h = t_hi / n;
  std::uintmax_t it = 200;
  return boost::math::tools::brent_find_minima(neg, std::max(0.0, (best - 1) * h), (best + 1) * h, 52, it).first;
}

std::vector<FieldScanPoint> rate_scan(const RelaxationLaw& law, double noise, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<FieldScanPoint> pts;
  for (int i = 0; i < 8; ++i) {
    const double B = 1.0 + 3.0 * i / 7.0;
    const double rate = relaxation_rate(law, B);
    pts.push_back({B, rate * (1.0 + noise * rng.normal()), noise * rate});
  }
  return pts;
}

std::vector<ThermometryPoint> thermo_scan(const ThermometryLaw& law, double noise, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<ThermometryPoint> pts;
  for (int i = 0; i < 16; ++i) {
    const double T = 0.05 + 2.95 * i / 15.0;
    const double w = thermometry_width(law, T);
    pts.push_back({T, w * (1.0 + noise * rng.normal()), noise * w});
  }
  return pts;
}

std::vector<DecayPoint> decay_scan(double T1, double a, double c, std::size_t shots, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<DecayPoint> pts;
  for (double m : {0.0, 0.25, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0}) {
    const double t = m * T1;
    const double p = a * std::exp(-t / T1) + c;
    std::size_t k = 0;
    for (std::size_t i = 0; i < shots; ++i) {
      k += rng.uniform() < p;
    }
    const double f = static_cast<double>(k) / static_cast<double>(shots);
    const double fe = std::clamp(f, 0.5 / static_cast<double>(shots), 1.0 - 0.5 / static_cast<double>(shots));
    pts.push_back({t, f, std::sqrt(fe * (1.0 - fe) / static_cast<double>(shots))});
  }
  return pts;
}

bool has_flag(const std::vector<std::string>& flags, const std::string& needle) {
  return std::any_of(flags.begin(), flags.end(), [&](const auto& f) { return f.find(needle) != std::string::npos; });
}

} // namespace

TEST_CASE("likelihood gradient matches finite differences") {
  const Truth truth = device_b(2.5, 0.4);
  const MixtureData d = draw(truth, 2000, 1, 1.2e-3);
  REQUIRE(d.n_censored > 0);
  MixtureParams p = params_of(truth);
  p.gamma *= 1.2;
  p.T_e *= 0.9;
  p.eps0_down += 20e-6;
  p.E_Z *= 1.1;
  p.p_up = 0.55;
  std::array<double, 5> g{};
  mixture_log_likelihood(d, truth.m.r, p, &g);
  const auto v = p.values();
  for (std::size_t i = 0; i < 5; ++i) {
    const double h = 1e-5 * (i == 4 ? 1.0 : std::abs(v[i]));
    auto up = v;
    auto dn = v;
    up[i] += h;
    dn[i] -= h;
    const double fd = (mixture_log_likelihood(d, truth.m.r, MixtureParams::from(up)) -
                       mixture_log_likelihood(d, truth.m.r, MixtureParams::from(dn))) /
                      (2.0 * h);
    CHECK(g[i] * v[i] == doctest::Approx(fd * v[i]).epsilon(1e-5).scale(1e-3));
  }
}

TEST_CASE("unbinned fit recovers parameters across a grid of devices") {
  struct Case {
    double gamma;
    double T_e;
    double B;
    double p_up;
  };
  const std::vector<Case> grid{
      {10036.723, 0.84, 2.5, 0.5}, {10036.723, 0.84, 1.4, 0.5}, {10036.723, 0.84, 3.25, 0.3},
      {5095.844, 0.821, 2.5, 0.5}, {5095.844, 0.821, 3.25, 0.6}, {2e4, 0.84, 2.0, 0.5},
      {2e4, 0.5, 1.4, 0.4},        {8e3, 0.5, 2.5, 0.5},         {8e3, 0.6, 3.0, 0.7},
      {15e3, 1.0, 3.25, 0.5},      {6e3, 0.7, 2.2, 0.35},
  };
  std::size_t k = 0;
  for (const Case& c : grid) {
    const Truth truth{ReadModel{c.gamma, c.T_e, 0.36809, -0.447467977e-3, zeeman_energy(2.09, c.B)}, c.p_up};
    const MixtureData d = draw(truth, 10000, derive_seed(7, k++));
    const MixtureFit f = fit_from_guess(d, truth);
    CAPTURE(c.gamma);
    CAPTURE(c.T_e);
    CAPTURE(c.B);
    CHECK(f.status == FitStatus::ok);
    CHECK(within_sigma(f, params_of(truth), 3.0));
    // Each start ascends from its init, so the best does too.
    CHECK(f.log_likelihood >= f.init_log_likelihood);
    CHECK(f.chi2_dof >= 0.5);
    CHECK(f.chi2_dof <= 2.0);
    // Covariance is symmetric positive semi-definite.
    CHECK((f.covariance - f.covariance.transpose()).cwiseAbs().maxCoeff() <= 1e-12 * f.covariance.cwiseAbs().maxCoeff());
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix<double, 5, 5>> eig(f.covariance);
    CHECK(eig.eigenvalues().minCoeff() >= 0.0);
  }
}

TEST_CASE("zero splitting is flagged as unidentifiable") {
  const Truth truth = device_b(0.0);
  const MixtureData d = draw(truth, 5000, 3);
  MixtureParams init = params_of(truth);
  init.E_Z = 50e-6;
  const MixtureFit f = fit_mixture(d, truth.m.r, init, MixtureBounds::around(init));
  CHECK(f.status == FitStatus::unidentifiable);
  CHECK(has_flag(f.flags, "E_Z consistent with zero: p_up unidentifiable"));
}

TEST_CASE("parameters pinned to a bound are reported") {
  const Truth truth = device_b(2.5);
  const MixtureData d = draw(truth, 3000, 4);
  const MixtureParams init = params_of(truth);
  // Upper gamma bound well below the truth.
  MixtureBounds b = MixtureBounds::around(init);
  b.lower.gamma = 0.5 * init.gamma;
  b.upper.gamma = 0.6 * init.gamma;
  MixtureParams shifted = init;
  shifted.gamma = 0.6 * init.gamma;
  const MixtureFit f = fit_mixture(d, truth.m.r, shifted, b, {.n_jitter = 2});
  CHECK(f.status == FitStatus::boundary_pinned);
  CHECK(has_flag(f.flags, "gamma at bound"));
}

TEST_CASE("fit inputs are validated") {
  const Truth truth = device_b(2.5);
  const MixtureData small = draw(truth, 50, 1);
  const MixtureParams init = params_of(truth);
  CHECK_THROWS_AS(fit_mixture(small, truth.m.r, init, MixtureBounds::around(init)), std::invalid_argument);
  const MixtureData d = draw(truth, 500, 1);
  MixtureParams outside = init;
  outside.p_up = 1.5;
  CHECK_THROWS_AS(fit_mixture(d, truth.m.r, outside, MixtureBounds::around(init)), std::invalid_argument);
}

TEST_CASE("peak separation") {
  SUBCASE("hand arithmetic") {
    MixtureFit f;
    f.params = MixtureParams{5095.844, 0.821, -0.60e-3, 289.4e-6, 0.5};
    f.r = 0.373;
    f.covariance(3, 3) = 4e-12;
    const DeltaT d = extract_delta_t(f, 0.373);
    CHECK(d.delta_t == doctest::Approx(0.776e-3).epsilon(1e-3));
    CHECK(d.delta_E == 289.4e-6);
    CHECK(d.delta_t_error == doctest::Approx(2e-6 / 0.373));
    // Against the numeric argmax of the two fitted densities.
    const ReadModel m = f.model();
    const double sep = numeric_peak(m, Spin::down, 5e-3) - numeric_peak(m, Spin::up, 5e-3);
    CHECK(d.delta_t == doctest::Approx(sep).epsilon(1e-3));
  }
  SUBCASE("fitted device B") {
    const Truth truth = device_b(2.5);
    const MixtureFit f = fit_from_guess(draw(truth, 5000, 9), truth);
    const ReadModel m = f.model();
    const double sep = numeric_peak(m, Spin::down, 6e-3) - numeric_peak(m, Spin::up, 6e-3);
    CHECK(extract_delta_t(f, truth.m.r).delta_t == doctest::Approx(sep).epsilon(1e-3));
  }
  SUBCASE("grows with field") {
    const Truth lo = device_b(1.4);
    const Truth hi = device_b(2.5);
    const double dt_lo = extract_delta_t(fit_from_guess(draw(lo, 3000, 5), lo), lo.m.r).delta_t;
    const double dt_hi = extract_delta_t(fit_from_guess(draw(hi, 3000, 5), hi), hi.m.r).delta_t;
    CHECK(dt_hi > dt_lo);
  }
  SUBCASE("zero splitting") {
    MixtureFit f;
    f.params = MixtureParams{1e4, 0.84, -0.4e-3, 0.0, 0.5};
    CHECK(extract_delta_t(f, 0.368).delta_t == 0.0);
  }
  SUBCASE("boundary peak") {
    MixtureFit f;
    f.params = MixtureParams{1e4, 0.84, -0.1e-3, 1e-3, 0.5};
    CHECK_THROWS_AS(extract_delta_t(f, 0.368), FitDiagnostic);
  }
}

TEST_CASE("binned and unbinned fits agree") {
  const Truth truth = device_b(2.5);
  std::vector<std::optional<double>> t;
  Rng rng(21);
  for (int i = 0; i < 8000; ++i) {
    const Spin s = rng.uniform() < truth.p_up ? Spin::up : Spin::down;
    t.push_back(sample_tunnel_time(truth.m, s, rng.uniform_open()));
  }
  const MixtureData d = MixtureData::from(t, kRead);
  const MixtureFit u = fit_from_guess(d, truth);
  const Histogram h = build_histogram(t, 25e-6, kRead);
  const MixtureParams init = guess_mixture_init(d, truth.m.r, 1.3 * truth.m.gamma, 0.9 * truth.m.T_e);
  const MixtureFit b = fit_mixture_binned(h, truth.m.r, init, MixtureBounds::around(init));
  CHECK(b.status == FitStatus::ok);
  const auto vu = u.params.values();
  const auto vb = b.params.values();
  for (std::size_t i = 0; i < 5; ++i) {
    CAPTURE(i);
    // Same data, so the two estimates differ by far less than one sigma.
    CHECK(std::abs(vu[i] - vb[i]) < 0.5 * u.error(i));
    CHECK(b.error(i) == doctest::Approx(u.error(i)).epsilon(0.2));
  }
}

TEST_CASE("fitting in milliseconds gives the same physical parameters") {
  const Truth truth = device_b(2.5);
  const MixtureData d = draw(truth, 4000, 31);
  const MixtureFit s = fit_from_guess(d, truth);

  MixtureData d_ms = d;
  for (double& t : d_ms.t_outs) {
    t *= 1e3;
  }
  d_ms.t_read *= 1e3;
  const double r_ms = truth.m.r * 1e-3;
  MixtureParams init = guess_mixture_init(d, truth.m.r, 1.3 * truth.m.gamma, 0.9 * truth.m.T_e);
  init.gamma *= 1e-3;
  const MixtureFit ms = fit_mixture(d_ms, r_ms, init, MixtureBounds::around(init));
  CHECK(ms.params.gamma * 1e3 == doctest::Approx(s.params.gamma).epsilon(1e-4));
  CHECK(ms.params.T_e == doctest::Approx(s.params.T_e).epsilon(1e-4));
  CHECK(ms.params.eps0_down == doctest::Approx(s.params.eps0_down).epsilon(1e-4));
  CHECK(ms.params.E_Z == doctest::Approx(s.params.E_Z).epsilon(1e-4));
  CHECK(ms.params.p_up == doctest::Approx(s.params.p_up).epsilon(1e-4));
  CHECK(ms.error(3) == doctest::Approx(s.error(3)).epsilon(1e-3));
}

TEST_CASE("g-factor line") {
  SUBCASE("exact points") {
    std::vector<FieldScanPoint> pts;
    for (double B : {1.4, 2.0, 2.5, 3.25}) {
      pts.push_back({B, zeeman_energy(2.09, B), 1e-6});
    }
    const GFactorFit free = fit_g_factor(pts);
    CHECK(free.g == doctest::Approx(2.09).epsilon(1e-12));
    CHECK(free.chi2 < 1e-20);
    CHECK(std::abs(free.intercept) < 1e-15);
    CHECK_FALSE(free.intercept_significant);
    const GFactorFit fixed = fit_g_factor(pts, false);
    CHECK(fixed.g == doctest::Approx(2.09).epsilon(1e-12));
    CHECK(fixed.dof == 3);
  }
  SUBCASE("offset line is reported") {
    std::vector<FieldScanPoint> pts;
    for (double B : {1.4, 2.0, 2.5, 3.25}) {
      pts.push_back({B, zeeman_energy(2.0, B) + 20e-6, 1e-6});
    }
    CHECK(fit_g_factor(pts).intercept_significant);
  }
  SUBCASE("degenerate designs") {
    const std::vector<FieldScanPoint> same{{2.0, 1e-4, 1e-6}, {2.0, 1.1e-4, 1e-6}, {2.0, 0.9e-4, 1e-6}};
    CHECK_THROWS_AS(fit_g_factor(same), std::invalid_argument);
    const std::vector<FieldScanPoint> two{{1.0, 1e-4, 1e-6}, {2.0, 2e-4, 1e-6}};
    CHECK_THROWS_AS(fit_g_factor(two), std::invalid_argument);
  }
}

TEST_CASE("g-factor from per-field mixture fits") {
  const auto run = [](auto make, double g_truth, std::uint64_t seed, std::vector<double> fields) {
    std::vector<FieldScanPoint> pts;
    for (double B : fields) {
      const Truth truth = make(B, 0.5);
      const MixtureFit f = fit_from_guess(draw(truth, 1000, derive_seed(seed, static_cast<std::uint64_t>(B * 100))), truth);
      const DeltaT d = extract_delta_t(f, truth.m.r);
      pts.push_back({B, d.delta_E, d.delta_E_error});
    }
    const GFactorFit g = fit_g_factor(pts);
    CAPTURE(g.g);
    CAPTURE(g.g_error);
    CHECK(std::abs(g.g - g_truth) < 3.0 * g.g_error);
    CHECK(g.g_error < 0.3);
  };
  run(device_a, 2.00, 1, {1.4, 1.8, 2.2, 2.5, 2.9, 3.25});
  // Above about 3 T the device B spin-up peak merges into t = 0.
  run(device_b, 2.09, 2, {1.4, 1.7, 2.0, 2.3, 2.6, 2.9});
}

TEST_CASE("T1 decay") {
  SUBCASE("errors cover the truth at 100 shots per point") {
    for (double T1 : {24.5e-3, 13.2e-3}) {
      int covered = 0;
      for (std::uint64_t s = 0; s < 40; ++s) {
        const DecayFit f = fit_exponential_decay(decay_scan(T1, 0.5, 0.0, 100, derive_seed(T1 * 1e4, s)));
        covered += std::abs(f.T1 - T1) < 2.0 * f.T1_error;
      }
      CAPTURE(T1);
      // About 95% expected.
      CHECK(covered >= 32);
    }
  }
  SUBCASE("errors cover the truth at high statistics") {
    const DecayFit f = fit_exponential_decay(decay_scan(24.5e-3, 0.45, 0.05, 5000, 3));
    CHECK(f.status == FitStatus::ok);
    CHECK(std::abs(f.T1 - 24.5e-3) < 3.0 * f.T1_error);
    CHECK(std::abs(f.offset - 0.05) < 3.0 * f.offset_error);
    CHECK(f.offset >= 0.0);
    CHECK(f.offset <= 1.0);
  }
  SUBCASE("exact data") {
    std::vector<DecayPoint> pts;
    for (double t : {0.0, 5e-3, 10e-3, 20e-3, 40e-3, 80e-3}) {
      pts.push_back({t, 0.4 * std::exp(-t / 17e-3) + 0.1, 0.0});
    }
    const DecayFit f = fit_exponential_decay(pts);
    CHECK(f.T1 == doctest::Approx(17e-3).epsilon(1e-6));
    CHECK(f.amplitude == doctest::Approx(0.4).epsilon(1e-6));
    CHECK(f.offset == doctest::Approx(0.1).epsilon(1e-5));
  }
  SUBCASE("all spin down") {
    const DecayFit f = fit_exponential_decay(decay_scan(20e-3, 0.0, 0.0, 100, 5));
    CHECK(f.status == FitStatus::unidentifiable);
    CHECK(has_flag(f.flags, "amplitude consistent with zero: T1 unidentifiable"));
  }
  SUBCASE("negative offset is clamped") {
    std::vector<DecayPoint> pts;
    for (double t : {0.0, 5e-3, 10e-3, 20e-3, 40e-3}) {
      pts.push_back({t, 0.5 * std::exp(-t / 10e-3) - 0.05, 0.01});
    }
    const DecayFit f = fit_exponential_decay(pts);
    CHECK(f.offset == 0.0);
    CHECK(has_flag(f.flags, "offset at bound"));
  }
  SUBCASE("decay far slower than the scan") {
    std::vector<DecayPoint> pts;
    for (double t : {0.0, 1e-3, 2e-3, 3e-3, 4e-3}) {
      pts.push_back({t, 0.5 - 0.5 * t, 0.001});
    }
    const DecayFit f = fit_exponential_decay(pts);
    CHECK(has_flag(f.flags, "T1 at search limit"));
  }
  SUBCASE("too few points") {
    const std::vector<DecayPoint> pts{{0.0, 0.5, 0.05}, {1e-3, 0.4, 0.05}, {2e-3, 0.3, 0.05}};
    CHECK_THROWS_AS(fit_exponential_decay(pts), std::invalid_argument);
  }
}

TEST_CASE("relaxation-rate field law") {
  SUBCASE("device A and B coefficients") {
    for (const RelaxationLaw law : {RelaxationLaw{4.7, 0.05}, RelaxationLaw{5.6, 0.04}}) {
      const RelaxationLawFit f = fit_rate_field_law(rate_scan(law, 0.15, 11));
      CAPTURE(law.K_J);
      CHECK(std::abs(f.law.K_J - law.K_J) < 0.9);
      CHECK(std::abs(f.law.K_ph - law.K_ph) < 0.01);
      CHECK(std::abs(f.law.K_J - law.K_J) < 3.0 * f.K_J_error);
      CHECK(f.flags.empty());
    }
  }
  SUBCASE("exact data") {
    const RelaxationLawFit f = fit_rate_field_law(rate_scan({4.7, 0.05}, 0.0, 1));
    CHECK(f.law.K_J == doctest::Approx(4.7).epsilon(1e-10));
    CHECK(f.law.K_ph == doctest::Approx(0.05).epsilon(1e-10));
  }
  SUBCASE("pure cubic") {
    const RelaxationLawFit f = fit_rate_field_law(rate_scan({5.0, 0.0}, 0.05, 2));
    CHECK(f.law.K_ph >= 0.0);
    CHECK(f.law.K_ph < 2.0 * f.K_ph_error + 1e-12);
  }
  SUBCASE("narrow field span") {
    std::vector<FieldScanPoint> pts;
    for (double B : {2.0, 2.2, 2.4, 2.6}) {
      pts.push_back({B, relaxation_rate({4.7, 0.05}, B), 0.1});
    }
    CHECK(has_flag(fit_rate_field_law(pts).flags, "field span ratio < 1.5"));
  }
  SUBCASE("single field repeated") {
    const std::vector<FieldScanPoint> pts{{2.0, 40.0, 1.0}, {2.0, 41.0, 1.0}, {2.0, 39.0, 1.0}};
    CHECK(has_flag(fit_rate_field_law(pts).flags, "singular design"));
  }
}

TEST_CASE("thermometry") {
  SUBCASE("device A and B") {
    const struct {
      ThermometryLaw law;
      double tol;
    } cases[] = {{{0.821, 0.56}, 0.028}, {{0.84, 0.55}, 0.035}};
    for (const auto& c : cases) {
      const ThermometryFit f = fit_thermometry(thermo_scan(c.law, 0.01, 5));
      CAPTURE(c.law.T_eff);
      CHECK(std::abs(f.law.T_eff - c.law.T_eff) < c.tol);
      CHECK(std::abs(f.law.alpha_QQ - c.law.alpha_QQ) < 0.02);
      CHECK(std::abs(f.law.T_eff - c.law.T_eff) < 3.0 * f.T_eff_error);
    }
  }
  SUBCASE("zero effective temperature") {
    std::vector<ThermometryPoint> pts;
    for (double T : {0.1, 0.5, 1.0, 2.0}) {
      pts.push_back({T, constants::k_B * T / 0.5, 0.0});
    }
    const ThermometryFit f = fit_thermometry(pts);
    CHECK(f.law.T_eff < 1e-6);
    CHECK(f.law.alpha_QQ == doctest::Approx(0.5).epsilon(1e-9));
    CHECK(has_flag(f.flags, "T_eff at lower bound"));
  }
  SUBCASE("plateau only") {
    std::vector<ThermometryPoint> pts;
    const ThermometryLaw law{0.821, 0.56};
    for (double T : {0.02, 0.05, 0.1, 0.15}) {
      pts.push_back({T, thermometry_width(law, T), 0.01 * thermometry_width(law, T)});
    }
    const ThermometryFit f = fit_thermometry(pts);
    CHECK(has_flag(f.flags, "plateau-only data: alpha_QQ unidentifiable"));
  }
}

TEST_CASE("visibility versus field") {
  const ReadModel base = device_a(0.0).m;
  const std::vector<double> B{1e-6, 1.0, 2.0, 3.25, 4.5, 6.0};
  const auto v = predict_visibility_vs_field(base, 2.0, B);
  REQUIRE(v.size() == B.size());
  CHECK(v[0].V_star == doctest::Approx(0.5).epsilon(1e-3));
  CHECK(v[3].V_star == doctest::Approx(0.931).epsilon(5e-4));
  for (std::size_t i = 1; i < v.size(); ++i) {
    CHECK(v[i].V_star > v[i - 1].V_star);
  }
  const auto zero = predict_visibility_vs_field(base, 2.0, std::vector<double>{0.0});
  CHECK(zero[0].V_star == 0.5);
  CHECK(std::isnan(zero[0].t_star));
}

TEST_CASE("averaging fitted models") {
  std::vector<MixtureFit> fits(2);
  fits[0].params = {1e4, 0.8, -0.4e-3, 1e-4, 0.5};
  fits[0].r = 0.36;
  fits[1].params = {2e4, 0.9, -0.5e-3, 3e-4, 0.4};
  fits[1].r = 0.38;
  const ReadModel m = average_model(fits);
  CHECK(m.gamma == doctest::Approx(1.5e4));
  CHECK(m.T_e == doctest::Approx(0.85));
  CHECK(m.eps0_down == doctest::Approx(-0.45e-3));
  CHECK(m.r == doctest::Approx(0.37));
}

TEST_CASE("bootstrap") {
  SUBCASE("zero-noise data gives near-zero intervals") {
    std::vector<DecayPoint> pts;
    for (int i = 0; i < 24; ++i) {
      const double t = 4e-3 * i;
      pts.push_back({t, 0.4 * std::exp(-t / 17e-3) + 0.1, 0.0});
    }
    const auto fit = [](std::span<const DecayPoint> s) {
      const DecayFit f = fit_exponential_decay(s);
      Eigen::VectorXd v(1);
      v << f.T1;
      return v;
    };
    const BootstrapResult r = bootstrap_errors<DecayPoint>(pts, fit, 200, 1);
    CHECK(r.std_error[0] < 1e-6 * 17e-3);
    CHECK(r.upper[0] - r.lower[0] < 1e-6 * 17e-3);
  }
  const Truth truth = device_b(2.5);
  std::vector<double> t;
  {
    Rng rng(17);
    for (int i = 0; i < 3000; ++i) {
      const Spin s = rng.uniform() < truth.p_up ? Spin::up : Spin::down;
      const double v = sample_tunnel_time(truth.m, s, rng.uniform_open());
      if (v < kRead) {
        t.push_back(v);
      }
    }
  }
  const auto fit_of = [&](std::span<const double> s) {
    std::vector<std::optional<double>> o(s.begin(), s.end());
    const MixtureData d = MixtureData::from(o, kRead);
    const MixtureFit f = fit_mixture(d, truth.m.r, params_of(truth), MixtureBounds::around(params_of(truth)),
                                     {.n_jitter = 0});
    const auto v = f.params.values();
    return Eigen::Map<const Eigen::VectorXd>(v.data(), 5).eval();
  };
  SUBCASE("fixed seed is reproducible") {
    const std::span<const double> small(t.data(), 300);
    const BootstrapResult a = bootstrap_errors<double>(small, fit_of, 100, 5);
    const BootstrapResult b = bootstrap_errors<double>(small, fit_of, 100, 5);
    CHECK(a.lower == b.lower);
    CHECK(a.upper == b.upper);
    CHECK(a.std_error == b.std_error);
  }
  SUBCASE("agrees with the information matrix") {
    std::vector<std::optional<double>> o(t.begin(), t.end());
    const MixtureFit f = fit_mixture(MixtureData::from(o, kRead), truth.m.r, params_of(truth),
                                     MixtureBounds::around(params_of(truth)), {.n_jitter = 0});
    const BootstrapResult r = bootstrap_errors<double>(t, fit_of, 200, 9);
    for (std::size_t i = 0; i < 5; ++i) {
      CAPTURE(i);
      CHECK(r.std_error[static_cast<Eigen::Index>(i)] == doctest::Approx(f.error(i)).epsilon(0.3));
    }
  }
  SUBCASE("too few resamples") {
    CHECK_THROWS_AS(bootstrap_errors<double>(t, fit_of, 50, 1), std::invalid_argument);
  }
}
