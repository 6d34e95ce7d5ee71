#pragma once

// Subcommands of the rsm tool. Each writes its products under an output
// directory and records them, with content hashes, in manifest.json.

#include <rsm/classify.hpp>
#include <rsm/config.hpp>

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace rsm {

inline constexpr std::string_view kToolVersion = "1.0.0";

namespace exit_code {
inline constexpr int ok = 0;
inline constexpr int validation = 1;
inline constexpr int fit_diagnostic = 2;
inline constexpr int io = 3;
} // namespace exit_code

struct CommonOptions {
  std::optional<std::filesystem::path> config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> out;
};

struct CommandOutput {
  std::vector<std::filesystem::path> files;
  std::string summary;
  int exit_code = exit_code::ok;
};

ExperimentConfig resolve_config(const CommonOptions& opts);
std::filesystem::path resolve_output_dir(const CommonOptions& opts, const ExperimentConfig& cfg);

/// One trace batch per (field, load time, initialization time), plus the
/// synthetic thermometry and relaxation-rate scans when configured.
CommandOutput cmd_simulate(const ExperimentConfig& cfg, const std::filesystem::path& out);

/// Empty `inputs` selects every batch under out/traces.
CommandOutput cmd_classify(const ExperimentConfig& cfg, const std::filesystem::path& out, Method method,
                           std::span<const std::filesystem::path> inputs);

/// Families: mixture, g, t1, t1-field, thermometry, visibility, init.
CommandOutput cmd_fit(const ExperimentConfig& cfg, const std::filesystem::path& out, std::string_view family,
                      std::span<const std::filesystem::path> inputs);

CommandOutput cmd_report(const std::filesystem::path& out);

/// Fast invariant checks of the installed build.
CommandOutput cmd_selfcheck();

/// Parses arguments, dispatches, and maps exceptions to exit codes.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

} // namespace rsm
