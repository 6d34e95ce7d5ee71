#pragma once

// Exact penalized segmentation of a piecewise-constant signal under an L2
// cost, solved by optimal partitioning with functional pruning.

#include <cstddef>
#include <span>
#include <vector>

namespace rsm {

struct Segment {
  std::size_t begin = 0; ///< first sample
  std::size_t end = 0;   ///< one past the last sample
  double mean = 0.0;
};

struct Segmentation {
  std::vector<Segment> segments;
  double cost = 0.0;    ///< residual sum of squares plus penalty per change
  double penalty = 0.0; ///< per-change penalty used
};

/// Noise scale from the median absolute deviation of first differences,
/// robust to a handful of level changes.
double robust_noise_sigma(std::span<const double> y);

/// Minimizes sum of squared residuals + penalty * (number of changes).
Segmentation optimal_partition(std::span<const double> y, double penalty);

/// Penalty beta * sigma^2 * ln(n) with sigma from robust_noise_sigma,
/// floored at 1e-3 of the signal range.
double scaled_penalty(std::span<const double> y, double beta);

Segmentation segment_signal(std::span<const double> y, double beta);

} // namespace rsm
