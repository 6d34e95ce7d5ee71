#include <rsm/changepoint.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace rsm {

namespace {

struct Interval {
  double lo;
  double hi;
};

// Cost of candidate tau as a function of the segment mean mu:
// base + sum_sq - 2 mu sum + count mu^2.
struct Candidate {
  std::size_t tau = 0;
  double base = 0.0;
  double sum = 0.0;
  double sum_sq = 0.0;
  double count = 0.0;
  std::vector<Interval> set;

  double at(double mu) const { return base + sum_sq - 2.0 * mu * sum + count * mu * mu; }

  double minimum() const {
    double best = std::numeric_limits<double>::infinity();
    const double vertex = count > 0.0 ? sum / count : 0.0;
    for (const Interval& iv : set) {
      best = std::min(best, at(std::clamp(vertex, iv.lo, iv.hi)));
    }
    return best;
  }
};

void push_merged(std::vector<Interval>& out, Interval iv) {
  if (!out.empty() && iv.lo <= out.back().hi) {
    out.back().hi = std::max(out.back().hi, iv.hi);
  } else {
    out.push_back(iv);
  }
}

double median(std::vector<double> v) {
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  double m = v[mid];
  if (v.size() % 2 == 0) {
    m = 0.5 * (m + *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid)));
  }
  return m;
}

} // namespace

double robust_noise_sigma(std::span<const double> y) {
  if (y.size() < 3) {
    return 0.0;
  }
  std::vector<double> d(y.size() - 1);
  for (std::size_t i = 1; i < y.size(); ++i) {
    d[i - 1] = y[i] - y[i - 1];
  }
  const double med = median(d);
  for (double& v : d) {
    v = std::abs(v - med);
  }
  return median(std::move(d)) / (0.6745 * std::sqrt(2.0));
}

double scaled_penalty(std::span<const double> y, double beta) {
  if (!(beta > 0.0)) {
    throw std::invalid_argument("scaled_penalty: beta must be > 0");
  }
  if (y.size() < 2) {
    return beta;
  }
  const auto [lo, hi] = std::minmax_element(y.begin(), y.end());
  const double sigma = std::max(robust_noise_sigma(y), 1e-3 * (*hi - *lo));
  if (!(sigma > 0.0)) {
    return beta;
  }
  return beta * sigma * sigma * std::log(static_cast<double>(y.size()));
}

Segmentation optimal_partition(std::span<const double> y, double penalty) {
  if (!(penalty > 0.0)) {
    throw std::invalid_argument("optimal_partition: penalty must be > 0");
  }
  Segmentation out;
  out.penalty = penalty;
  const std::size_t n = y.size();
  if (n == 0) {
    return out;
  }
  const auto [lo_it, hi_it] = std::minmax_element(y.begin(), y.end());
  const Interval domain{*lo_it, *hi_it};

  std::vector<double> F(n + 1);
  std::vector<std::size_t> last_change(n + 1, 0);
  F[0] = -penalty;

  std::vector<Candidate> alive;
  alive.push_back(Candidate{0, F[0] + penalty, 0.0, 0.0, 0.0, {domain}});

  std::vector<Interval> freed;
  std::vector<Interval> kept;
  for (std::size_t t = 1; t <= n; ++t) {
    const double v = y[t - 1];
    double best = std::numeric_limits<double>::infinity();
    std::size_t arg = 0;
    for (Candidate& c : alive) {
      c.sum += v;
      c.sum_sq += v * v;
      c.count += 1.0;
      const double m = c.minimum();
      if (m < best) {
        best = m;
        arg = c.tau;
      }
    }
    F[t] = best;
    last_change[t] = arg;
    if (t == n) {
      break;
    }

    // Keep only the part of each set where the candidate can still beat a
    // change placed at t; the remainder goes to the new candidate.
    const double level = F[t] + penalty;
    freed.clear();
    std::vector<Candidate> next;
    next.reserve(alive.size() + 1);
    for (Candidate& c : alive) {
      // count mu^2 - 2 sum mu + (base + sum_sq - level) <= 0
      const double a = c.count;
      const double b = c.sum;
      const double disc = b * b - a * (c.base + c.sum_sq - level);
      kept.clear();
      if (disc >= 0.0) {
        const double half = std::sqrt(disc) / a;
        const double lo = b / a - half;
        const double hi = b / a + half;
        for (const Interval& iv : c.set) {
          const double klo = std::max(iv.lo, lo);
          const double khi = std::min(iv.hi, hi);
          if (klo <= khi) {
            if (iv.lo < klo) {
              freed.push_back({iv.lo, klo});
            }
            kept.push_back({klo, khi});
            if (khi < iv.hi) {
              freed.push_back({khi, iv.hi});
            }
          } else {
            freed.push_back(iv);
          }
        }
      } else {
        freed.insert(freed.end(), c.set.begin(), c.set.end());
      }
      if (!kept.empty()) {
        c.set = kept;
        next.push_back(std::move(c));
      }
    }
    std::sort(freed.begin(), freed.end(), [](const Interval& p, const Interval& q) { return p.lo < q.lo; });
    Candidate fresh{t, level, 0.0, 0.0, 0.0, {}};
    for (const Interval& iv : freed) {
      push_merged(fresh.set, iv);
    }
    if (!fresh.set.empty()) {
      next.push_back(std::move(fresh));
    }
    alive = std::move(next);
  }

  out.cost = F[n];
  std::vector<std::size_t> bounds{n};
  for (std::size_t t = n; t > 0;) {
    t = last_change[t];
    bounds.push_back(t);
  }
  std::reverse(bounds.begin(), bounds.end());
  for (std::size_t i = 0; i + 1 < bounds.size(); ++i) {
    Segment s{bounds[i], bounds[i + 1], 0.0};
    double acc = 0.0;
    for (std::size_t k = s.begin; k < s.end; ++k) {
      acc += y[k];
    }
    s.mean = acc / static_cast<double>(s.end - s.begin);
    out.segments.push_back(s);
  }
  return out;
}

Segmentation segment_signal(std::span<const double> y, double beta) {
  return optimal_partition(y, scaled_penalty(y, beta));
}

} // namespace rsm
