#pragma once

// File formats: binary trace batches, delimited text tables, hashing.
//
// Trace batch layout (little-endian throughout):
//   "RSMTRACE"            8-byte magic
//   u32 version           currently 1
//   u32 header_bytes      size of the header block that follows
//   header block          f64/u64 fields, see BatchHeader
//   u64 n_shots
//   n_shots records:
//     u64 index, u64 seed
//     u8 initial_spin, u8 loaded_spin, u8 relaxed, u8 present (bit0 up-out,
//        bit1 blip-in, bit2 down-out)
//     f64 t_up_out, f64 t_blip_in, f64 t_down_out (NaN when absent)
//     f64 detuning_offset
//     u64 n_samples, then n_samples f64
//   u64 FNV-1a of every preceding byte

#include <rsm/classify.hpp>
#include <rsm/simulate.hpp>

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace rsm {

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Malformed binary input; `offset` is the byte where decoding failed.
struct FormatError : IoError {
  FormatError(const std::string& reason, std::uint64_t offset);
  std::string reason;
  std::uint64_t offset;
};

/// Structurally valid input with missing or inconsistent content.
struct SchemaError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL);
std::uint64_t file_hash(const std::filesystem::path& path);
std::string hex64(std::uint64_t v);

/// 17 significant digits, so the text reads back to the identical double;
/// "nan", "inf", "-inf" for non-finite values.
std::string format_double(double v);
double parse_double(std::string_view s);

inline constexpr char kTraceMagic[9] = "RSMTRACE";
inline constexpr std::uint32_t kTraceVersion = 1;

struct BatchHeader {
  ReadModel model;
  SensorModel sensor;
  double field_B = 0.0;
  double g = 0.0;
  double t_empty = 0.0;
  double t_load = 0.0;
  double t_read = 0.0;
  double t_initial = 0.0; ///< 0 when no initialization ramp
  double init_amplitude = 0.0;
  double T1 = 0.0;
  double load_p_up = 0.5;
  double residual_up = 0.0;
  double gamma_in = 0.0;
  DriftShape drift_shape = DriftShape::none;
  double drift_amplitude = 0.0;
  std::uint64_t drift_period = 0;
  std::uint64_t drift_scan_length = 0;
  std::uint64_t base_seed = 0;
  std::uint64_t first_index = 0;

  BatchSetup setup() const;
  static BatchHeader from(const BatchSetup& setup, double g, std::uint64_t base_seed, std::uint64_t first_index);
};

struct TraceBatch {
  BatchHeader header;
  std::vector<ShotTrace> shots;
};

void write_trace_batch(std::ostream& os, const TraceBatch& batch);
void write_trace_batch(const std::filesystem::path& path, const TraceBatch& batch);
TraceBatch read_trace_batch(std::istream& is);
TraceBatch read_trace_batch(const std::filesystem::path& path);

/// Tab-separated table with "# key<TAB>value" metadata lines before the
/// column header and optional footer metadata after the rows.
struct Table {
  std::vector<std::pair<std::string, std::string>> meta;
  std::vector<std::pair<std::string, std::string>> footer;
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;

  std::optional<std::string> meta_value(std::string_view key) const;
  double meta_number(std::string_view key) const;
  std::size_t column_index(std::string_view name) const;
  bool has_column(std::string_view name) const;
  /// Numeric column; "-" reads as NaN.
  std::vector<double> numbers(std::string_view name) const;
  const std::string& cell(std::size_t row, std::string_view column) const;
};

void write_table(std::ostream& os, const Table& t);
void write_table(const std::filesystem::path& path, const Table& t);
Table read_table(std::istream& is, const std::string& source = "<stream>");
Table read_table(const std::filesystem::path& path);

void write_text(const std::filesystem::path& path, std::string_view text);
std::string read_text(const std::filesystem::path& path);

} // namespace rsm
