#pragma once

// Spin labels and tunnel-out times from sensor traces.

#include <rsm/simulate.hpp>

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

namespace rsm {

enum class Label : std::uint8_t { down = 0, up = 1, undetermined = 2 };
enum class Method : std::uint8_t { static_threshold = 0, final_exit = 1 };

std::string_view to_string(Label l);
std::string_view to_string(Method m);

struct ThresholdConfig {
  double v_threshold = 0.5;
  double t_threshold = 0.0; ///< s
  std::size_t filter_window = 1;

  void validate(double t_read) const;
};

struct FinalExitConfig {
  double penalty = 2.0; ///< beta in beta * sigma^2 * ln(n)
  double v_threshold = 0.5;
  double exclusion_energy = 1.75; ///< multiple of k_B * T_eff
  double T_eff = 0.84;            ///< K
  double ramp_rate = 0.0;         ///< eV/s
  std::size_t filter_window = 1;
  std::size_t min_blip_samples = 2;

  void validate() const;
  /// Blips starting within this time of the final exit are ignored.
  double exclusion_time() const;
};

struct ClassifiedShot {
  std::optional<double> t_out;
  std::optional<double> t_final_exit;
  Label label = Label::undetermined;
  Method method = Method::static_threshold;
  bool censored = false; ///< no exit seen inside the read window
};

/// Causal moving average: out[k] = mean(y[k - w + 1 .. k]), shorter at the start.
std::vector<double> boxcar_filter(std::span<const double> y, std::size_t window);

std::optional<double> first_threshold_crossing(const ShotTrace& trace, const ThresholdConfig& cfg);

ClassifiedShot classify_static(const ShotTrace& trace, const ThresholdConfig& cfg);

/// Start of the final high segment that persists to the end of the trace;
/// empty when no such segment follows a low one.
std::optional<double> detect_final_exit(const ShotTrace& trace, const FinalExitConfig& cfg);

ClassifiedShot classify_final_exit_referenced(const ShotTrace& trace, const FinalExitConfig& cfg);

/// Occupied/empty levels by two-means clustering of the pooled samples.
struct SignalLevels {
  double low = 0.0;
  double high = 1.0;
  double midpoint() const { return 0.5 * (low + high); }
};

SignalLevels estimate_levels(std::span<const ShotTrace> traces);

struct Histogram {
  double bin_width = 0.0;
  double lo = 0.0;
  double hi = 0.0;
  std::vector<std::size_t> counts;
  std::size_t n_total = 0; ///< observed plus censored
  std::size_t censored = 0;

  std::size_t bins() const { return counts.size(); }
  double edge(std::size_t i) const {
    return i >= counts.size() ? hi : lo + static_cast<double>(i) * bin_width;
  }
  std::size_t observed() const { return n_total - censored; }
};

/// Bins cover [0, t_read]; absent entries count as censored, as do times
/// at or beyond t_read.
Histogram build_histogram(std::span<const std::optional<double>> t_outs, double bin_width, double t_read);

} // namespace rsm
