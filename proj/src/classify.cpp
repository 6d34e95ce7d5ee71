#include <rsm/changepoint.hpp>
#include <rsm/classify.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace rsm {

namespace {

void require(bool ok, const char* what) {
  if (!ok) {
    throw std::invalid_argument(what);
  }
}

} // namespace

std::string_view to_string(Label l) {
  switch (l) {
  case Label::down:
    return "down";
  case Label::up:
    return "up";
  case Label::undetermined:
    break;
  }
  return "undetermined";
}

std::string_view to_string(Method m) { return m == Method::final_exit ? "final-exit" : "static"; }

void ThresholdConfig::validate(double t_read) const {
  require(filter_window >= 1, "ThresholdConfig: filter_window must be >= 1");
  require(t_threshold > 0.0 && t_threshold < t_read, "ThresholdConfig: t_threshold must lie in (0, t_read)");
  require(std::isfinite(v_threshold), "ThresholdConfig: v_threshold must be finite");
}

void FinalExitConfig::validate() const {
  require(penalty > 0.0, "FinalExitConfig: penalty must be > 0");
  require(exclusion_energy >= 0.0, "FinalExitConfig: exclusion_energy must be >= 0");
  require(T_eff >= 0.0, "FinalExitConfig: T_eff must be >= 0");
  require(ramp_rate > 0.0, "FinalExitConfig: ramp_rate must be > 0");
  require(filter_window >= 1, "FinalExitConfig: filter_window must be >= 1");
  require(min_blip_samples >= 1, "FinalExitConfig: min_blip_samples must be >= 1");
  require(std::isfinite(v_threshold), "FinalExitConfig: v_threshold must be finite");
}

double FinalExitConfig::exclusion_time() const {
  return exclusion_energy * constants::k_B * T_eff / ramp_rate;
}

std::vector<double> boxcar_filter(std::span<const double> y, std::size_t window) {
  require(window >= 1, "boxcar_filter: window must be >= 1");
  std::vector<double> out(y.size());
  double acc = 0.0;
  for (std::size_t k = 0; k < y.size(); ++k) {
    acc += y[k];
    if (k >= window) {
      acc -= y[k - window];
    }
    out[k] = acc / static_cast<double>(std::min(k + 1, window));
  }
  return out;
}

std::optional<double> first_threshold_crossing(const ShotTrace& trace, const ThresholdConfig& cfg) {
  require(cfg.filter_window >= 1, "first_threshold_crossing: filter_window must be >= 1");
  const auto f = boxcar_filter(trace.samples, cfg.filter_window);
  for (std::size_t k = 0; k < f.size(); ++k) {
    if (f[k] > cfg.v_threshold) {
      return trace.time_of(k);
    }
  }
  return std::nullopt;
}

ClassifiedShot classify_static(const ShotTrace& trace, const ThresholdConfig& cfg) {
  cfg.validate(trace.duration());
  ClassifiedShot out;
  out.method = Method::static_threshold;
  out.t_out = first_threshold_crossing(trace, cfg);
  out.censored = !out.t_out.has_value();
  out.label = out.t_out && *out.t_out < cfg.t_threshold ? Label::up : Label::down;
  return out;
}

std::optional<double> detect_final_exit(const ShotTrace& trace, const FinalExitConfig& cfg) {
  if (trace.samples.size() < 2) {
    return std::nullopt;
  }
  const Segmentation seg = segment_signal(trace.samples, cfg.penalty);
  if (seg.segments.size() < 2) {
    return std::nullopt;
  }
  // Walk back over the trailing run of high segments.
  std::size_t first_high = seg.segments.size();
  while (first_high > 0 && seg.segments[first_high - 1].mean > cfg.v_threshold) {
    --first_high;
  }
  if (first_high == seg.segments.size() || first_high == 0) {
    return std::nullopt;
  }
  return trace.time_of(seg.segments[first_high].begin);
}

ClassifiedShot classify_final_exit_referenced(const ShotTrace& trace, const FinalExitConfig& cfg) {
  cfg.validate();
  ClassifiedShot out;
  out.method = Method::final_exit;
  out.t_final_exit = detect_final_exit(trace, cfg);
  if (!out.t_final_exit) {
    out.censored = true;
    out.label = Label::undetermined;
    return out;
  }
  const double dt = trace.sample_period;
  const auto final_idx = static_cast<std::size_t>(std::llround(*out.t_final_exit / dt));
  const double excl_samples = cfg.exclusion_time() / dt;
  const auto f = boxcar_filter(trace.samples, cfg.filter_window);

  std::size_t k = 0;
  while (k < final_idx) {
    if (!(f[k] > cfg.v_threshold)) {
      ++k;
      continue;
    }
    const std::size_t onset = k;
    while (k < f.size() && f[k] > cfg.v_threshold) {
      ++k;
    }
    // A run reaching the final segment is the exit edge itself.
    if (k >= final_idx) {
      break;
    }
    const bool long_enough = k - onset >= cfg.min_blip_samples;
    const bool outside_window = static_cast<double>(final_idx - onset) > excl_samples + 1e-9;
    if (long_enough && outside_window) {
      out.t_out = trace.time_of(onset);
      out.label = Label::up;
      return out;
    }
  }
  out.t_out = out.t_final_exit;
  out.label = Label::down;
  return out;
}

SignalLevels estimate_levels(std::span<const ShotTrace> traces) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  std::size_t total = 0;
  for (const ShotTrace& t : traces) {
    for (double v : t.samples) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    total += t.samples.size();
  }
  if (total == 0 || !(hi > lo)) {
    throw std::invalid_argument("estimate_levels: need samples spanning two levels");
  }
  SignalLevels lv{lo, hi};
  for (int iter = 0; iter < 100; ++iter) {
    const double cut = lv.midpoint();
    double s_lo = 0.0;
    double s_hi = 0.0;
    std::size_t n_lo = 0;
    std::size_t n_hi = 0;
    for (const ShotTrace& t : traces) {
      for (double v : t.samples) {
        if (v > cut) {
          s_hi += v;
          ++n_hi;
        } else {
          s_lo += v;
          ++n_lo;
        }
      }
    }
    if (n_lo == 0 || n_hi == 0) {
      break;
    }
    const SignalLevels next{s_lo / static_cast<double>(n_lo), s_hi / static_cast<double>(n_hi)};
    const bool done = next.low == lv.low && next.high == lv.high;
    lv = next;
    if (done) {
      break;
    }
  }
  return lv;
}

Histogram build_histogram(std::span<const std::optional<double>> t_outs, double bin_width, double t_read) {
  require(bin_width > 0.0, "build_histogram: bin_width must be > 0");
  require(t_read > 0.0, "build_histogram: t_read must be > 0");
  Histogram h;
  h.bin_width = bin_width;
  h.lo = 0.0;
  h.hi = t_read;
  h.counts.assign(static_cast<std::size_t>(std::ceil(t_read / bin_width - 1e-9)), 0);
  for (const auto& t : t_outs) {
    ++h.n_total;
    if (!t || !(*t < t_read) || *t < 0.0) {
      ++h.censored;
      continue;
    }
    const auto bin = std::min(static_cast<std::size_t>(*t / bin_width), h.counts.size() - 1);
    ++h.counts[bin];
  }
  return h;
}

} // namespace rsm
