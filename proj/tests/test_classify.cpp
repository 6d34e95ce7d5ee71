#include <doctest.h>

#include <rsm/classify.hpp>
#include <rsm/estimate.hpp>
#include <rsm/simulate.hpp>

#include <boost/math/distributions/chi_squared.hpp>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <stdexcept>
#include <vector>

using namespace rsm;

namespace {

const ReadModel kDeviceB25{10036.723, 0.84, 0.36809, -0.447467977e-3, zeeman_energy(2.09, 2.5)};

ShotTrace synthetic(std::size_t n, double dt = 1e-6) {
  ShotTrace t;
  t.samples.assign(n, 0.0);
  t.sample_period = dt;
  t.model = kDeviceB25;
  return t;
}

void raise(ShotTrace& t, std::size_t from, std::size_t to) {
  std::fill(t.samples.begin() + static_cast<std::ptrdiff_t>(from),
            t.samples.begin() + static_cast<std::ptrdiff_t>(std::min(to, t.samples.size())), 1.0);
}

FinalExitConfig fe_config(double T_eff = 0.84) {
  FinalExitConfig c;
  c.T_eff = T_eff;
  c.ramp_rate = kDeviceB25.r;
  return c;
}

BatchSetup setup(double B, SensorModel sensor = {}) {
  BatchSetup b;
  b.seq.t_empty = 1e-3;
  b.seq.t_load = 1e-3;
  b.seq.t_read = 3e-3;
  b.seq.read_ramp = RampSpec{{-2.05e-3, 0.505e-3}, 3e-3};
  b.model = kDeviceB25;
  b.model.E_Z = zeeman_energy(2.09, B);
  b.sensor = sensor;
  b.options.init_amplitude = 1e-3;
  return b;
}

/// Time of the edge the final-exit detector should find.
std::optional<double> true_final_exit(const ShotTruth& t) {
  if (t.t_down_out) {
    return t.t_down_out;
  }
  if (t.t_up_out && !t.t_blip_in) {
    return t.t_up_out;
  }
  return std::nullopt;
}

} // namespace

TEST_CASE("boxcar filter is a causal mean") {
  const std::vector<double> y{1, 2, 3, 4, 5};
  const auto f = boxcar_filter(y, 2);
  CHECK(f == std::vector<double>{1.0, 1.5, 2.5, 3.5, 4.5});
  CHECK(boxcar_filter(y, 1) == y);
  CHECK_THROWS_AS(boxcar_filter(y, 0), std::invalid_argument);
}

TEST_CASE("all-low trace has no crossing and reads spin down") {
  const ShotTrace t = synthetic(3000);
  ThresholdConfig tc;
  tc.t_threshold = 1e-3;
  CHECK_FALSE(first_threshold_crossing(t, tc).has_value());
  const ClassifiedShot s = classify_static(t, tc);
  CHECK(s.label == Label::down);
  CHECK(s.censored);
  CHECK_FALSE(s.t_out.has_value());
  const ClassifiedShot f = classify_final_exit_referenced(t, fe_config());
  CHECK(f.label == Label::undetermined);
  CHECK(f.censored);
}

TEST_CASE("threshold crossing lies within one filter window of the edge") {
  for (std::size_t w : {1u, 3u, 8u, 25u}) {
    for (std::size_t edge : {10u, 400u, 1777u}) {
      ShotTrace t = synthetic(3000);
      raise(t, edge, 3000);
      ThresholdConfig tc;
      tc.t_threshold = 1e-3;
      tc.filter_window = w;
      const auto c = first_threshold_crossing(t, tc);
      REQUIRE(c.has_value());
      const double k = *c / t.sample_period;
      CHECK(k >= static_cast<double>(edge) - 1e-9);
      CHECK(k < static_cast<double>(edge + w) + 1e-9);
    }
  }
}

TEST_CASE("static labels follow the threshold time") {
  ShotTrace early = synthetic(3000);
  raise(early, 200, 3000);
  ShotTrace late = synthetic(3000);
  raise(late, 2000, 3000);
  ThresholdConfig tc;
  tc.t_threshold = 1e-3;
  CHECK(classify_static(early, tc).label == Label::up);
  CHECK(classify_static(late, tc).label == Label::down);
  tc.t_threshold = 0.0;
  CHECK_THROWS_AS(classify_static(early, tc), std::invalid_argument);
}

TEST_CASE("zero splitting gives chance accuracy") {
  BatchSetup b = setup(0.0);
  ThresholdConfig tc;
  tc.t_threshold = 0.9e-3;
  const auto shots = simulate_batch(4000, b, 12);
  double correct = 0.0;
  for (const ShotTrace& t : shots) {
    const Label l = classify_static(t, tc).label;
    correct += (l == Label::up) == (t.truth.initial_spin == Spin::up);
  }
  const double acc = correct / static_cast<double>(shots.size());
  CHECK(std::abs(acc - 0.5) < 4.0 * 0.5 / std::sqrt(4000.0));
}

TEST_CASE("clean step is located within one sample") {
  for (std::size_t edge : {5u, 300u, 1500u, 2990u}) {
    ShotTrace t = synthetic(3000);
    raise(t, edge, 3000);
    const auto fe = detect_final_exit(t, fe_config());
    REQUIRE(fe.has_value());
    CHECK(std::abs(*fe / t.sample_period - static_cast<double>(edge)) <= 1.0);
  }
}

TEST_CASE("a step after a blip returns the step") {
  ShotTrace t = synthetic(3000);
  raise(t, 300, 340);
  raise(t, 1800, 3000);
  const auto fe = detect_final_exit(t, fe_config());
  REQUIRE(fe.has_value());
  CHECK(std::abs(*fe / t.sample_period - 1800.0) <= 1.0);
  const ClassifiedShot s = classify_final_exit_referenced(t, fe_config());
  CHECK(s.label == Label::up);
  REQUIRE(s.t_out.has_value());
  CHECK(std::abs(*s.t_out / t.sample_period - 300.0) <= 1.0);
}

TEST_CASE("blips inside the exclusion window are ignored") {
  const FinalExitConfig cfg = fe_config();
  const double kT_time = constants::k_B * cfg.T_eff / cfg.ramp_rate;
  CHECK(cfg.exclusion_time() == doctest::Approx(1.75 * kT_time));
  const std::size_t exit = 2200;
  const auto blip_before = [&](double multiple) {
    ShotTrace t = synthetic(3000);
    const auto onset = exit - static_cast<std::size_t>(std::llround(multiple * kT_time / t.sample_period));
    raise(t, onset, onset + 20);
    raise(t, exit, 3000);
    return classify_final_exit_referenced(t, cfg).label;
  };
  CHECK(blip_before(1.0) == Label::down);
  CHECK(blip_before(5.0) == Label::up);
  // Exclusion disabled: any blip counts.
  FinalExitConfig open = cfg;
  open.exclusion_energy = 0.0;
  ShotTrace t = synthetic(3000);
  raise(t, exit - 100, exit - 80);
  raise(t, exit, 3000);
  CHECK(classify_final_exit_referenced(t, open).label == Label::up);
}

TEST_CASE("single-sample spikes are not blips") {
  ShotTrace t = synthetic(3000);
  t.samples[400] = 1.0;
  raise(t, 2000, 3000);
  CHECK(classify_final_exit_referenced(t, fe_config()).label == Label::down);
}

TEST_CASE("final exit on noisy simulated traces") {
  const BatchSetup b = setup(2.5);
  const FinalExitConfig cfg = fe_config();
  std::vector<double> err;
  for (const ShotTrace& t : simulate_batch(1000, b, 2024)) {
    const auto truth = true_final_exit(t.truth);
    if (!truth) {
      continue;
    }
    const auto fe = detect_final_exit(t, cfg);
    REQUIRE(fe.has_value());
    err.push_back(std::abs(*fe - *truth) / t.sample_period);
  }
  REQUIRE(err.size() > 800);
  std::nth_element(err.begin(), err.begin() + static_cast<std::ptrdiff_t>(err.size() / 2), err.end());
  CHECK(err[err.size() / 2] < 5.0);
}

TEST_CASE("static and final-exit labels agree at high SNR") {
  // Low sensor noise and well separated spin peaks.
  SensorModel sensor;
  sensor.t_min = 1e-10;
  BatchSetup b = setup(4.0, sensor);
  b.model.T_e = 0.2;
  ThresholdConfig tc;
  tc.t_threshold = optimal_threshold(b.model).t_star;
  const FinalExitConfig cfg = fe_config(0.2);
  std::size_t agree = 0;
  std::size_t compared = 0;
  for (const ShotTrace& t : simulate_batch(2000, b, 5)) {
    const ClassifiedShot f = classify_final_exit_referenced(t, cfg);
    if (f.label == Label::undetermined) {
      continue;
    }
    ++compared;
    agree += classify_static(t, tc).label == f.label;
  }
  REQUIRE(compared > 1900);
  CHECK(static_cast<double>(agree) / static_cast<double>(compared) > 0.99);
}

TEST_CASE("noiseless traces reproduce the true labels") {
  SensorModel ideal;
  ideal.t_min = 0.0;
  ideal.rise_time = 0.0;
  ideal.sample_period = 1e-8;
  BatchSetup b = setup(6.0, ideal);
  b.model.T_e = 0.1;
  ThresholdConfig tc;
  tc.t_threshold = optimal_threshold(b.model).t_star;
  const FinalExitConfig cfg = fe_config(0.1);
  for (const ShotTrace& t : simulate_batch(300, b, 5)) {
    const Label truth = t.truth.initial_spin == Spin::up ? Label::up : Label::down;
    CHECK(classify_static(t, tc).label == truth);
    CHECK(classify_final_exit_referenced(t, cfg).label == truth);
  }
}

TEST_CASE("raising the voltage threshold never moves the crossing earlier") {
  const auto shots = simulate_batch(40, setup(2.5), 17);
  for (const ShotTrace& t : shots) {
    std::optional<double> prev = 0.0;
    for (double v : {0.2, 0.35, 0.5, 0.65, 0.8}) {
      ThresholdConfig tc;
      tc.t_threshold = 1e-3;
      tc.v_threshold = v;
      const auto c = first_threshold_crossing(t, tc);
      if (!prev) {
        CHECK_FALSE(c.has_value());
      } else if (c) {
        CHECK(*c >= *prev);
      }
      prev = c;
    }
  }
}

TEST_CASE("exclusion window is closed at its boundary") {
  FinalExitConfig cfg = fe_config();
  const double dt = 1e-6;
  // Exactly 300 samples of exclusion.
  cfg.T_eff = 300.0 * dt * cfg.ramp_rate / (cfg.exclusion_energy * constants::k_B);
  REQUIRE(cfg.exclusion_time() / dt == doctest::Approx(300.0));
  const std::size_t exit = 2000;
  const auto label_with_onset = [&](std::size_t onset) {
    ShotTrace t = synthetic(3000, dt);
    raise(t, onset, onset + 10);
    raise(t, exit, 3000);
    return classify_final_exit_referenced(t, cfg).label;
  };
  CHECK(label_with_onset(exit - 300) == Label::down);
  CHECK(label_with_onset(exit - 301) == Label::up);
}

TEST_CASE("censored traces are never labelled up by the static classifier") {
  ShotTrace t = synthetic(3000);
  t.samples[2999] = 0.4;
  ThresholdConfig tc;
  tc.t_threshold = 2.9e-3;
  CHECK(classify_static(t, tc).label == Label::down);
}

TEST_CASE("segmentation is deterministic") {
  const ShotTrace t = simulate_indexed_shot(setup(2.5), 9, 4);
  const FinalExitConfig cfg = fe_config();
  const ClassifiedShot a = classify_final_exit_referenced(t, cfg);
  const ClassifiedShot b = classify_final_exit_referenced(t, cfg);
  CHECK(a.t_final_exit == b.t_final_exit);
  CHECK(a.t_out == b.t_out);
  CHECK(a.label == b.label);
}

TEST_CASE("two-means levels") {
  const BatchSetup b = setup(2.5);
  const auto shots = simulate_batch(50, b, 3);
  const SignalLevels lv = estimate_levels(shots);
  CHECK(lv.low == doctest::Approx(0.0).epsilon(0.05).scale(1.0));
  CHECK(lv.high == doctest::Approx(1.0).epsilon(0.05));
  const std::vector<ShotTrace> flat{synthetic(10)};
  CHECK_THROWS_AS(estimate_levels(flat), std::invalid_argument);
}

TEST_CASE("histogram conserves counts") {
  const std::vector<std::optional<double>> t{0.0, 0.5e-3, 0.99e-3, 1e-3, std::nullopt, 2.9999e-3, 3e-3, 5e-3};
  const Histogram h = build_histogram(t, 0.5e-3, 3e-3);
  CHECK(h.bins() == 6);
  std::size_t sum = 0;
  for (auto c : h.counts) {
    sum += c;
  }
  CHECK(h.n_total == t.size());
  CHECK(sum + h.censored == h.n_total);
  CHECK(h.censored == 3);
  CHECK(h.counts[0] == 1);
  CHECK(h.counts[1] == 2);
  CHECK(h.counts[2] == 1);
  CHECK(h.counts[5] == 1);
  CHECK(h.edge(6) == 3e-3);

  const Histogram empty = build_histogram({}, 1e-4, 3e-3);
  CHECK(empty.n_total == 0);
  CHECK(empty.bins() == 30);
  CHECK_THROWS_AS(build_histogram(t, 0.0, 3e-3), std::invalid_argument);
}

TEST_CASE("tunnel-out histogram matches the mixture density") {
  SensorModel ideal;
  ideal.t_min = 0.0;
  ideal.rise_time = 0.0;
  const BatchSetup b = setup(2.5, ideal);
  ThresholdConfig tc;
  tc.t_threshold = 1e-3;
  std::vector<std::optional<double>> t_outs;
  for (const ShotTrace& t : simulate_batch(10000, b, 31)) {
    // The visible first rise: the up exit if its blip spans a sample.
    t_outs.push_back(classify_static(t, tc).t_out);
  }
  const Histogram h = build_histogram(t_outs, 50e-6, 3e-3);
  const MixtureParams truth{b.model.gamma, b.model.T_e, b.model.eps0_down, b.model.E_Z, 0.5};
  const GoodnessOfFit gof = mixture_goodness_of_fit(h, b.model.r, truth, 0);
  REQUIRE(gof.dof > 20);
  const boost::math::chi_squared_distribution<double> chi2(static_cast<double>(gof.dof));
  CHECK(gof.chi2 < boost::math::quantile(chi2, 0.999));
}
