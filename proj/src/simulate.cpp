#include <rsm/simulate.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace rsm {

namespace {

void require(bool ok, const char* what) {
  if (!ok) {
    throw std::invalid_argument(what);
  }
}

} // namespace

void PulseSequence::validate() const {
  require(t_empty >= 0.0 && t_load >= 0.0 && t_read >= 0.0, "PulseSequence: durations must be >= 0");
  read_ramp.validate();
  require(std::abs(t_read - read_ramp.t_ramp) <= 1e-12 * std::max(1.0, t_read),
          "PulseSequence: t_read must equal read_ramp.t_ramp");
  if (init_ramp) {
    require(init_ramp->t_ramp >= 0.0, "PulseSequence: t_initial must be >= 0");
  }
  require(load_p_up >= 0.0 && load_p_up <= 1.0, "PulseSequence: load_p_up must lie in [0, 1]");
}

void SensorModel::validate() const {
  require(t_min >= 0.0, "SensorModel: t_min must be >= 0");
  require(sample_period > 0.0, "SensorModel: sample_period must be > 0");
  require(level_empty > level_occupied, "SensorModel: level_empty must exceed level_occupied");
  require(rise_time >= 0.0, "SensorModel: rise_time must be >= 0");
}

double SensorModel::noise_sigma() const {
  return (level_empty - level_occupied) * std::sqrt(t_min / sample_period);
}

std::size_t SensorModel::samples_for(double duration) const {
  return static_cast<std::size_t>(std::floor(duration / sample_period + 1e-9));
}

double sample_tunnel_time(const ReadModel& m, Spin spin, double u) {
  require(u > 0.0 && u < 1.0, "sample_tunnel_time: u must lie in (0, 1)");
  m.validate();
  // Invert S(t) = 1 - u:  softplus(x_t) = softplus(x0) - ln(1 - u) / p
  const double kT = m.kT();
  const double eps0 = m.eps0(spin);
  const double y = detail::softplus(eps0 / kT) - std::log1p(-u) / m.shape();
  const double x = y + std::log(-std::expm1(-y));
  return std::max(0.0, (kT * x - eps0) / m.r);
}

Spin load_during_ramp(const ReadModel& m, double t_initial, double amplitude, double gamma_in,
                      double load_p_up, Rng& rng) {
  // Lewis-Shedler thinning of the two tunnel-in channels, each bounded by
  // gamma_in. The down level descends from eps0_down + amplitude to
  // eps0_down; the up level sits E_Z above it.
  const double kT = m.kT();
  const double bound = 2.0 * gamma_in;
  double t = 0.0;
  while (t_initial > 0.0) {
    t += rng.exponential(bound);
    if (t >= t_initial) {
      break;
    }
    const double eps_down = m.eps0_down + amplitude * (1.0 - t / t_initial);
    const double rate_down = gamma_in * detail::sigmoid(-eps_down / kT);
    const double rate_up = gamma_in * detail::sigmoid(-(eps_down + m.E_Z) / kT);
    const double u = rng.uniform() * bound;
    if (u < rate_up) {
      return Spin::up;
    }
    if (u < rate_up + rate_down) {
      return Spin::down;
    }
  }
  return rng.bernoulli(load_p_up) ? Spin::up : Spin::down;
}

ShotTrace simulate_shot(const PulseSequence& seq, const ReadModel& m, const SensorModel& sensor,
                        double T1, Rng& rng, const ShotOptions& options) {
  seq.validate();
  m.validate();
  sensor.validate();
  require(T1 >= 0.0, "simulate_shot: T1 must be >= 0");
  require(options.residual_up >= 0.0 && options.residual_up <= 1.0,
          "simulate_shot: residual_up must lie in [0, 1]");
  require(options.gamma_in >= 0.0, "simulate_shot: gamma_in must be >= 0");

  ReadModel read = m;
  read.eps0_down += options.detuning_offset;
  const double gamma_in = options.gamma_in > 0.0 ? options.gamma_in : m.gamma;

  ShotTrace trace;
  trace.sample_period = sensor.sample_period;
  trace.field_B = options.field_B;
  trace.model = read;
  trace.detuning_offset = options.detuning_offset;
  ShotTruth& truth = trace.truth;

  // Load.
  Spin spin;
  if (seq.init_ramp && seq.init_ramp->t_ramp > 0.0) {
    require(options.init_amplitude > 0.0, "simulate_shot: init ramp needs init_amplitude > 0");
    spin = load_during_ramp(read, seq.init_ramp->t_ramp, options.init_amplitude, gamma_in, seq.load_p_up, rng);
  } else {
    spin = rng.bernoulli(seq.load_p_up) ? Spin::up : Spin::down;
  }
  truth.loaded_spin = spin;

  // Relaxation towards the residual population during the load dwell.
  if (seq.t_load > 0.0 && T1 < std::numeric_limits<double>::infinity()) {
    const double p_relax = T1 > 0.0 ? -std::expm1(-seq.t_load / T1) : 1.0;
    if (rng.bernoulli(p_relax)) {
      truth.relaxed = true;
      spin = rng.bernoulli(options.residual_up) ? Spin::up : Spin::down;
    }
  }
  truth.initial_spin = spin;

  // Read.
  const double t_read = seq.t_read;
  if (spin == Spin::up) {
    const double t_up = sample_tunnel_time(read, Spin::up, rng.uniform_open());
    if (t_up < t_read) {
      truth.t_up_out = t_up;
      const double t_in = t_up + rng.exponential(gamma_in);
      if (t_in < t_read) {
        truth.t_blip_in = t_in;
        ReadModel restarted = read;
        restarted.eps0_down = read.eps0_down + read.r * t_in;
        const double t_down = t_in + sample_tunnel_time(restarted, Spin::down, rng.uniform_open());
        if (t_down < t_read) {
          truth.t_down_out = t_down;
        }
      }
    }
  } else {
    const double t_down = sample_tunnel_time(read, Spin::down, rng.uniform_open());
    if (t_down < t_read) {
      truth.t_down_out = t_down;
    }
  }

  // Sensor waveform: high while the dot is empty.
  const std::size_t n = sensor.samples_for(t_read);
  trace.samples.resize(n);
  const double alpha = sensor.rise_time > 0.0 ? -std::expm1(-sensor.sample_period / sensor.rise_time) : 1.0;
  const double sigma = sensor.noise_sigma();
  double level = sensor.level_occupied;
  for (std::size_t k = 0; k < n; ++k) {
    const double t = trace.time_of(k);
    const bool in_blip = truth.t_up_out && t >= *truth.t_up_out && (!truth.t_blip_in || t < *truth.t_blip_in);
    const bool gone = truth.t_down_out && t >= *truth.t_down_out;
    const double target = (in_blip || gone) ? sensor.level_empty : sensor.level_occupied;
    level += alpha * (target - level);
    trace.samples[k] = sigma > 0.0 ? level + sigma * rng.normal() : level;
  }
  return trace;
}

double DriftSpec::offset(std::uint64_t index) const {
  switch (shape) {
  case DriftShape::none:
    return 0.0;
  case DriftShape::linear: {
    if (scan_length < 2) {
      return 0.0;
    }
    const double frac = static_cast<double>(std::min<std::uint64_t>(index, scan_length - 1)) /
                        static_cast<double>(scan_length - 1);
    return amplitude * (2.0 * frac - 1.0);
  }
  case DriftShape::sine: {
    if (period == 0) {
      return 0.0;
    }
    const double phase = 2.0 * std::numbers::pi * static_cast<double>(index % period) / static_cast<double>(period);
    return amplitude * std::sin(phase);
  }
  case DriftShape::jump:
    if (period == 0) {
      return 0.0;
    }
    return (index / period) % 2 == 0 ? amplitude : -amplitude;
  }
  return 0.0;
}

ShotTrace simulate_indexed_shot(const BatchSetup& setup, std::uint64_t base_seed, std::uint64_t index) {
  const std::uint64_t seed = derive_seed(base_seed, index);
  Rng rng(seed);
  ShotOptions options = setup.options;
  options.detuning_offset += setup.drift.offset(index);
  ShotTrace trace = simulate_shot(setup.seq, setup.model, setup.sensor, setup.T1, rng, options);
  trace.index = index;
  trace.seed = seed;
  return trace;
}

std::vector<ShotTrace> simulate_batch(std::size_t n, const BatchSetup& setup, std::uint64_t base_seed,
                                      std::uint64_t first_index) {
  std::vector<ShotTrace> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(simulate_indexed_shot(setup, base_seed, first_index + i));
  }
  return out;
}

} // namespace rsm
