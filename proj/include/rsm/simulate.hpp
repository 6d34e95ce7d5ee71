#pragma once

// Monte-Carlo generation of single-shot Empty-Load-Read experiments.

#include <rsm/model.hpp>
#include <rsm/rng.hpp>

#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <vector>

namespace rsm {

struct PulseSequence {
  double t_empty = 0.0;
  double t_load = 0.0;
  double t_read = 0.0; ///< equals read_ramp.t_ramp
  RampSpec read_ramp;
  /// Downward loading ramp; its t_ramp is the initialization time.
  std::optional<RampSpec> init_ramp;
  double load_p_up = 0.5;

  void validate() const;
};

struct SensorModel {
  double t_min = 9e-9;         ///< integration time for SNR = 1 (s); 0 disables noise
  double sample_period = 1e-6; ///< s
  double level_occupied = 0.0;
  double level_empty = 1.0;
  double rise_time = 1e-6; ///< single-pole time constant (s); 0 gives ideal steps

  void validate() const;
  /// Per-sample white-noise standard deviation.
  double noise_sigma() const;
  std::size_t samples_for(double duration) const;
};

struct ShotTruth {
  Spin initial_spin = Spin::down; ///< spin entering the read phase
  Spin loaded_spin = Spin::down;
  bool relaxed = false;
  std::optional<double> t_up_out;
  std::optional<double> t_blip_in;
  std::optional<double> t_down_out;

  /// No permanent exit inside the read window.
  bool censored() const { return !t_down_out && !(t_up_out && !t_blip_in); }
};

struct ShotTrace {
  std::vector<double> samples;
  double sample_period = 0.0;
  ShotTruth truth;
  std::uint64_t index = 0;
  std::uint64_t seed = 0;
  double field_B = std::numeric_limits<double>::quiet_NaN();
  ReadModel model;              ///< model in force during the read (drift included)
  double detuning_offset = 0.0; ///< injected drift (eV)

  double time_of(std::size_t k) const { return static_cast<double>(k) * sample_period; }
  double duration() const { return static_cast<double>(samples.size()) * sample_period; }
};

/// Knobs the closed-form model leaves open.
struct ShotOptions {
  double gamma_in = 0.0;        ///< refill rate of the replacement electron (Hz); 0 selects model.gamma
  double residual_up = 0.0;     ///< up population reached once the spin has relaxed
  double detuning_offset = 0.0; ///< eV added to every level during the shot
  double init_amplitude = 0.0;  ///< detuning swept by the initialization ramp (eV)
  double field_B = std::numeric_limits<double>::quiet_NaN();
};

/// Inverse-transform draw of a tunnel-out time, u in (0, 1).
double sample_tunnel_time(const ReadModel& m, Spin spin, double u);

/// Spin that tunnels in while both levels descend through the Fermi level
/// over `t_initial`. Falls back to a random load when nothing tunnels in.
Spin load_during_ramp(const ReadModel& m, double t_initial, double amplitude, double gamma_in,
                      double load_p_up, Rng& rng);

ShotTrace simulate_shot(const PulseSequence& seq, const ReadModel& m, const SensorModel& sensor,
                        double T1, Rng& rng, const ShotOptions& options = {});

enum class DriftShape { none, linear, sine, jump };

/// Slow detuning drift as a function of shot index over a scan.
struct DriftSpec {
  DriftShape shape = DriftShape::none;
  double amplitude = 0.0;      ///< eV
  std::size_t period = 0;      ///< shots per cycle (sine) or per dwell (jump)
  std::size_t scan_length = 0; ///< shots spanned by the linear ramp

  double offset(std::uint64_t index) const;
};

struct BatchSetup {
  PulseSequence seq;
  ReadModel model;
  SensorModel sensor;
  double T1 = std::numeric_limits<double>::infinity();
  ShotOptions options;
  DriftSpec drift;
};

/// Shot `index` of the batch seeded by `base_seed`; independent of any
/// other shot.
ShotTrace simulate_indexed_shot(const BatchSetup& setup, std::uint64_t base_seed, std::uint64_t index);

/// Shots [first_index, first_index + n).
std::vector<ShotTrace> simulate_batch(std::size_t n, const BatchSetup& setup, std::uint64_t base_seed,
                                      std::uint64_t first_index = 0);

} // namespace rsm
