#include <rsm/scans.hpp>

#include <cmath>
#include <stdexcept>

namespace rsm {

namespace {

double shrunk_binomial_error(std::size_t k, std::size_t n) {
  if (n == 0) {
    return 0.0;
  }
  // Shrunk estimate keeps the error finite for 0/n and n/n.
  const double p = (static_cast<double>(k) + 0.5) / (static_cast<double>(n) + 1.0);
  return std::sqrt(p * (1.0 - p) / static_cast<double>(n));
}

ScanRow run_point(double x, std::size_t shots, const BatchSetup& setup, std::uint64_t seed,
                  const ShotClassifier& classify) {
  ScanRow row;
  row.x = x;
  row.shots = shots;
  for (std::size_t i = 0; i < shots; ++i) {
    const ShotTrace trace = simulate_indexed_shot(setup, seed, i);
    if (trace.truth.initial_spin == Spin::up) {
      ++row.truth_up;
    }
    if (classify) {
      const ClassifiedShot c = classify(trace);
      if (c.label == Label::up) {
        ++row.classified_up;
      } else if (c.label == Label::undetermined) {
        ++row.undetermined;
      }
    }
  }
  return row;
}

} // namespace

double ScanRow::truth_fraction() const {
  return shots == 0 ? 0.0 : static_cast<double>(truth_up) / static_cast<double>(shots);
}

double ScanRow::classified_fraction() const {
  const std::size_t n = shots - undetermined;
  return n == 0 ? 0.0 : static_cast<double>(classified_up) / static_cast<double>(n);
}

double ScanRow::classified_error() const { return shrunk_binomial_error(classified_up, shots - undetermined); }

double ScanRow::truth_error() const { return shrunk_binomial_error(truth_up, shots); }

std::vector<ScanRow> simulate_relaxation_scan(std::span<const double> t_loads, std::size_t shots_per_point,
                                              const BatchSetup& setup, std::uint64_t seed,
                                              const ShotClassifier& classify) {
  if (t_loads.empty()) {
    throw std::invalid_argument("simulate_relaxation_scan: t_loads must be non-empty");
  }
  std::vector<ScanRow> rows;
  for (std::size_t p = 0; p < t_loads.size(); ++p) {
    BatchSetup point = setup;
    point.seq.t_load = t_loads[p];
    rows.push_back(run_point(t_loads[p], shots_per_point, point, derive_seed(seed, p + 1, 0), classify));
  }
  return rows;
}

std::vector<ScanRow> simulate_initialization_scan(std::span<const double> t_initials,
                                                  std::size_t shots_per_point, const BatchSetup& setup,
                                                  std::uint64_t seed, const ShotClassifier& classify) {
  if (t_initials.empty()) {
    throw std::invalid_argument("simulate_initialization_scan: t_initials must be non-empty");
  }
  std::vector<ScanRow> rows;
  for (std::size_t p = 0; p < t_initials.size(); ++p) {
    BatchSetup point = setup;
    if (t_initials[p] > 0.0) {
      RampSpec ramp = setup.seq.init_ramp.value_or(setup.seq.read_ramp);
      ramp.t_ramp = t_initials[p];
      point.seq.init_ramp = ramp;
    } else {
      point.seq.init_ramp.reset();
    }
    // Common random numbers across ramp times keep the sweep smooth.
    rows.push_back(run_point(t_initials[p], shots_per_point, point, derive_seed(seed, 0, 0), classify));
  }
  return rows;
}

} // namespace rsm
