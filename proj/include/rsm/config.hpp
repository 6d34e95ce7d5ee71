#pragma once

// Experiment configuration: JSON documents whose physical quantities are
// either numbers in canonical units or strings with a unit suffix
// ("821 mK", "3 ms", "-0.60 meV"). Unknown keys are rejected.

#include <rsm/classify.hpp>
#include <rsm/model.hpp>
#include <rsm/simulate.hpp>

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace rsm {

/// Invalid configuration; the message names the offending key path.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

enum class Dimension { none, time, energy, temperature, voltage, rate, field };

/// Parses "<number> [unit]" into canonical units for the dimension.
double parse_quantity(std::string_view text, Dimension dim);

struct DeviceConfig {
  std::string preset;
  double gamma = 0.0;
  double T_e = 0.0;
  double eps0_down = 0.0;
  double g = 2.0;
  LeverArmMatrix lever_arms;
  RampSpec read_ramp;
  ThermometryLaw thermometry;
  RelaxationLaw relaxation;
  SensorModel sensor;
  double gamma_in = 0.0;
  double residual_up = 0.0;
  double load_p_up = 0.5;
  double t_empty = 1e-3;
  double t_load = 1e-3;
  double init_amplitude = 1e-3; ///< eV swept by the initialization ramp

  double ramp_rate() const;
  ReadModel read_model(double B) const;
};

struct SweepConfig {
  std::vector<double> fields{2.5};
  std::vector<double> t_loads;    ///< empty selects device.t_load
  std::vector<double> t_initials; ///< empty means no initialization ramp
  std::size_t shots = 1000;
  /// Fixed T1 for every batch; empty derives T1 from the relaxation law.
  std::optional<double> T1;
  std::vector<double> T_mxc; ///< synthetic thermometry scan points (K)
  double width_noise = 0.01; ///< relative noise on synthetic widths
  std::vector<double> rate_fields; ///< synthetic relaxation-rate scan (T)
  double rate_noise = 0.15;
};

struct ClassifyConfig {
  std::optional<double> v_threshold; ///< empty: midpoint of the fitted levels
  std::optional<double> t_threshold; ///< empty: optimum of the batch model
  std::size_t filter_window = 1;
  double penalty = 2.0;
  double exclusion_energy = 1.75;
  std::size_t min_blip_samples = 2;
};

struct FitConfig {
  bool freeze_T_e = false;
  bool free_intercept = true;
  std::size_t n_jitter = 5;
  std::size_t bootstrap = 0; ///< resamples for the mixture cross-check; 0 disables
  double bin_width = 0.0;    ///< histogram bin for plot data; 0 selects t_read / 60
  std::vector<double> visibility_fields;
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::string output_dir = "rsm-out";
  DeviceConfig device;
  SweepConfig sweep;
  ClassifyConfig classify;
  DriftSpec drift;
  FitConfig fit;

  double T1_at(double B) const;
  BatchSetup batch_setup(double B, double t_load, double t_initial) const;
  FinalExitConfig final_exit_config(double ramp_rate, double v_threshold) const;
};

/// Device presets "A" and "B".
nlohmann::json device_preset(std::string_view name);

/// Resolved, canonical-unit form of a configuration.
nlohmann::json config_to_json(const ExperimentConfig& cfg);
ExperimentConfig config_from_json(const nlohmann::json& j);

/// "a.b.c=value"; the value is parsed as JSON when possible, otherwise
/// taken as a string.
void apply_override(nlohmann::json& j, std::string_view assignment);

ExperimentConfig load_config(const std::optional<std::filesystem::path>& file,
                             std::span<const std::string> overrides);

std::uint64_t config_hash(const ExperimentConfig& cfg);

} // namespace rsm
