#pragma once

// Load-time and initialization-ramp sweeps built on simulate + classify.

#include <rsm/classify.hpp>
#include <rsm/simulate.hpp>

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace rsm {

using ShotClassifier = std::function<ClassifiedShot(const ShotTrace&)>;

struct ScanRow {
  double x = 0.0; ///< swept quantity (s)
  std::size_t shots = 0;
  std::size_t truth_up = 0;
  std::size_t classified_up = 0;
  std::size_t undetermined = 0;

  double truth_fraction() const;
  /// Up fraction among determined shots.
  double classified_fraction() const;
  /// Binomial standard error of classified_fraction.
  double classified_error() const;
  double truth_error() const;
};

/// One row per t_load; the classifier may be empty, in which case only
/// ground truth is tallied.
std::vector<ScanRow> simulate_relaxation_scan(std::span<const double> t_loads, std::size_t shots_per_point,
                                              const BatchSetup& setup, std::uint64_t seed,
                                              const ShotClassifier& classify = {});

/// One row per t_initial; t_initial = 0 is a step load. The ramp amplitude
/// comes from setup.options.init_amplitude.
std::vector<ScanRow> simulate_initialization_scan(std::span<const double> t_initials,
                                                  std::size_t shots_per_point, const BatchSetup& setup,
                                                  std::uint64_t seed, const ShotClassifier& classify = {});

} // namespace rsm
