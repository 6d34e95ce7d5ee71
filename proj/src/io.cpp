#include <rsm/io.hpp>

#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <iterator>
#include <limits>
#include <ostream>
#include <sstream>

namespace rsm {

namespace {

class ByteWriter {
public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) {
      u8(static_cast<std::uint8_t>(v >> (8 * i)));
    }
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      u8(static_cast<std::uint8_t>(v >> (8 * i)));
    }
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void bytes(std::string_view s) { buf_.append(s); }
  std::string& str() { return buf_; }

private:
  std::string buf_;
};

class ByteReader {
public:
  explicit ByteReader(std::string_view data) : data_(data) {}

  std::uint8_t u8(const char* what) {
    need(1, what);
    return static_cast<std::uint8_t>(data_[pos_++]);
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(data_[pos_++])) << (8 * i);
    }
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(data_[pos_++])) << (8 * i);
    }
    return v;
  }
  double f64(const char* what) { return std::bit_cast<double>(u64(what)); }
  std::string_view bytes(std::size_t n, const char* what) {
    need(n, what);
    const auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }

private:
  void need(std::size_t n, const char* what) {
    if (data_.size() - pos_ < n) {
      throw FormatError(std::string("truncated input reading ") + what, pos_);
    }
  }

  std::string_view data_;
  std::size_t pos_ = 0;
};

constexpr std::uint8_t kUp = 1;
constexpr std::uint8_t kBlip = 2;
constexpr std::uint8_t kDown = 4;

double opt_or_nan(const std::optional<double>& v) {
  return v ? *v : std::numeric_limits<double>::quiet_NaN();
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t tab = line.find('\t', start);
    out.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
    if (tab == std::string::npos) {
      break;
    }
    start = tab + 1;
  }
  return out;
}

} // namespace

FormatError::FormatError(const std::string& why, std::uint64_t off)
    : IoError(why + " at byte offset " + std::to_string(off)), reason(why), offset(off) {}

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h) {
  for (char c : bytes) {
    h ^= static_cast<std::uint8_t>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t file_hash(const std::filesystem::path& path) { return fnv1a(read_text(path)); }

std::string hex64(std::uint64_t v) {
  std::array<char, 17> buf{};
  const auto res = std::to_chars(buf.data(), buf.data() + 16, v, 16);
  std::string s(buf.data(), res.ptr);
  return std::string(16 - s.size(), '0') + s;
}

std::string format_double(double v) {
  if (std::isnan(v)) {
    return "nan";
  }
  if (std::isinf(v)) {
    return v > 0 ? "inf" : "-inf";
  }
  std::array<char, 64> buf{};
  const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v, std::chars_format::general, 17);
  return std::string(buf.data(), res.ptr);
}

double parse_double(std::string_view s) {
  if (s == "nan" || s == "-") {
    return std::numeric_limits<double>::quiet_NaN();
  }
  if (s == "inf") {
    return std::numeric_limits<double>::infinity();
  }
  if (s == "-inf") {
    return -std::numeric_limits<double>::infinity();
  }
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
    throw SchemaError("not a number: '" + std::string(s) + "'");
  }
  return v;
}

BatchSetup BatchHeader::setup() const {
  BatchSetup s;
  s.model = model;
  s.sensor = sensor;
  s.T1 = T1;
  s.seq.t_empty = t_empty;
  s.seq.t_load = t_load;
  s.seq.t_read = t_read;
  s.seq.read_ramp.t_ramp = t_read;
  s.seq.read_ramp.dV = GateVoltages{-1.0, 0.0}; // direction only; r carries the rate
  s.seq.load_p_up = load_p_up;
  if (t_initial > 0.0) {
    RampSpec init;
    init.dV = GateVoltages{1.0, 0.0};
    init.t_ramp = t_initial;
    s.seq.init_ramp = init;
  }
  s.options.gamma_in = gamma_in;
  s.options.residual_up = residual_up;
  s.options.init_amplitude = init_amplitude;
  s.options.field_B = field_B;
  s.drift.shape = drift_shape;
  s.drift.amplitude = drift_amplitude;
  s.drift.period = drift_period;
  s.drift.scan_length = drift_scan_length;
  return s;
}

BatchHeader BatchHeader::from(const BatchSetup& s, double g, std::uint64_t base_seed, std::uint64_t first_index) {
  BatchHeader h;
  h.model = s.model;
  h.sensor = s.sensor;
  h.field_B = s.options.field_B;
  h.g = g;
  h.t_empty = s.seq.t_empty;
  h.t_load = s.seq.t_load;
  h.t_read = s.seq.t_read;
  h.t_initial = s.seq.init_ramp ? s.seq.init_ramp->t_ramp : 0.0;
  h.init_amplitude = s.options.init_amplitude;
  h.T1 = s.T1;
  h.load_p_up = s.seq.load_p_up;
  h.residual_up = s.options.residual_up;
  h.gamma_in = s.options.gamma_in;
  h.drift_shape = s.drift.shape;
  h.drift_amplitude = s.drift.amplitude;
  h.drift_period = s.drift.period;
  h.drift_scan_length = s.drift.scan_length;
  h.base_seed = base_seed;
  h.first_index = first_index;
  return h;
}

void write_trace_batch(std::ostream& os, const TraceBatch& batch) {
  const BatchHeader& h = batch.header;
  ByteWriter head;
  for (double v : {h.model.gamma, h.model.T_e, h.model.r, h.model.eps0_down, h.model.E_Z, h.sensor.t_min,
                   h.sensor.sample_period, h.sensor.level_occupied, h.sensor.level_empty, h.sensor.rise_time,
                   h.field_B, h.g, h.t_empty, h.t_load, h.t_read, h.t_initial, h.init_amplitude, h.T1, h.load_p_up,
                   h.residual_up, h.gamma_in, h.drift_amplitude}) {
    head.f64(v);
  }
  head.u64(static_cast<std::uint64_t>(h.drift_shape));
  for (std::uint64_t v : {h.drift_period, h.drift_scan_length, h.base_seed, h.first_index}) {
    head.u64(v);
  }

  ByteWriter w;
  w.bytes(std::string_view(kTraceMagic, 8));
  w.u32(kTraceVersion);
  w.u32(static_cast<std::uint32_t>(head.str().size()));
  w.bytes(head.str());
  w.u64(batch.shots.size());
  for (const ShotTrace& s : batch.shots) {
    w.u64(s.index);
    w.u64(s.seed);
    w.u8(static_cast<std::uint8_t>(s.truth.initial_spin));
    w.u8(static_cast<std::uint8_t>(s.truth.loaded_spin));
    w.u8(s.truth.relaxed ? 1 : 0);
    w.u8(static_cast<std::uint8_t>((s.truth.t_up_out ? kUp : 0) | (s.truth.t_blip_in ? kBlip : 0) |
                                   (s.truth.t_down_out ? kDown : 0)));
    w.f64(opt_or_nan(s.truth.t_up_out));
    w.f64(opt_or_nan(s.truth.t_blip_in));
    w.f64(opt_or_nan(s.truth.t_down_out));
    w.f64(s.detuning_offset);
    w.u64(s.samples.size());
    for (double v : s.samples) {
      w.f64(v);
    }
  }
  w.u64(fnv1a(w.str()));
  os.write(w.str().data(), static_cast<std::streamsize>(w.str().size()));
  if (!os) {
    throw IoError("write_trace_batch: stream write failed");
  }
}

void write_trace_batch(const std::filesystem::path& path, const TraceBatch& batch) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) {
    throw IoError("cannot open " + path.string() + " for writing");
  }
  write_trace_batch(os, batch);
}

TraceBatch read_trace_batch(std::istream& is) {
  const std::string data((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  ByteReader r(data);
  if (r.bytes(8, "magic") != std::string_view(kTraceMagic, 8)) {
    throw FormatError("bad magic, not a trace batch", 0);
  }
  const std::size_t version_at = r.pos();
  const std::uint32_t version = r.u32("version");
  if (version != kTraceVersion) {
    throw FormatError("unsupported trace batch version " + std::to_string(version), version_at);
  }
  const std::size_t header_len_at = r.pos();
  const std::uint32_t header_len = r.u32("header size");
  constexpr std::uint32_t expected_header = 22 * 8 + 5 * 8;
  if (header_len != expected_header) {
    throw FormatError("unexpected header size " + std::to_string(header_len), header_len_at);
  }
  TraceBatch b;
  BatchHeader& h = b.header;
  for (double* v : {&h.model.gamma, &h.model.T_e, &h.model.r, &h.model.eps0_down, &h.model.E_Z, &h.sensor.t_min,
                    &h.sensor.sample_period, &h.sensor.level_occupied, &h.sensor.level_empty, &h.sensor.rise_time,
                    &h.field_B, &h.g, &h.t_empty, &h.t_load, &h.t_read, &h.t_initial, &h.init_amplitude, &h.T1,
                    &h.load_p_up, &h.residual_up, &h.gamma_in, &h.drift_amplitude}) {
    *v = r.f64("header field");
  }
  const std::size_t shape_at = r.pos();
  const std::uint64_t shape = r.u64("drift shape");
  if (shape > static_cast<std::uint64_t>(DriftShape::jump)) {
    throw FormatError("invalid drift shape " + std::to_string(shape), shape_at);
  }
  h.drift_shape = static_cast<DriftShape>(shape);
  for (std::uint64_t* v : {&h.drift_period, &h.drift_scan_length, &h.base_seed, &h.first_index}) {
    *v = r.u64("header field");
  }
  if (!(h.sensor.sample_period > 0.0)) {
    throw FormatError("sample_period must be > 0", 16 + 6 * 8);
  }

  const std::uint64_t n = r.u64("shot count");
  // Each record needs at least 72 bytes; reject absurd counts before allocating.
  if (n > r.remaining() / 72) {
    throw FormatError("shot count " + std::to_string(n) + " exceeds file size", r.pos() - 8);
  }
  b.shots.reserve(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    ShotTrace s;
    s.index = r.u64("shot index");
    s.seed = r.u64("shot seed");
    const std::size_t spin_at = r.pos();
    const std::uint8_t spin = r.u8("initial spin");
    const std::uint8_t loaded = r.u8("loaded spin");
    const std::uint8_t relaxed = r.u8("relaxed flag");
    const std::uint8_t present = r.u8("presence flags");
    if (spin > 1 || loaded > 1 || relaxed > 1 || present > 7) {
      throw FormatError("invalid truth flags in shot " + std::to_string(i), spin_at);
    }
    s.truth.initial_spin = static_cast<Spin>(spin);
    s.truth.loaded_spin = static_cast<Spin>(loaded);
    s.truth.relaxed = relaxed != 0;
    const double up = r.f64("t_up_out");
    const double blip = r.f64("t_blip_in");
    const double down = r.f64("t_down_out");
    if (present & kUp) {
      s.truth.t_up_out = up;
    }
    if (present & kBlip) {
      s.truth.t_blip_in = blip;
    }
    if (present & kDown) {
      s.truth.t_down_out = down;
    }
    s.detuning_offset = r.f64("detuning offset");
    const std::size_t count_at = r.pos();
    const std::uint64_t m = r.u64("sample count");
    if (m > r.remaining() / 8) {
      throw FormatError("sample count " + std::to_string(m) + " exceeds file size", count_at);
    }
    s.samples.resize(m);
    for (auto& v : s.samples) {
      v = r.f64("sample");
    }
    s.sample_period = h.sensor.sample_period;
    s.field_B = h.field_B;
    s.model = h.model;
    s.model.eps0_down += s.detuning_offset;
    b.shots.push_back(std::move(s));
  }
  const std::size_t body_end = r.pos();
  const std::uint64_t stored = r.u64("checksum");
  if (stored != fnv1a(std::string_view(data).substr(0, body_end))) {
    throw FormatError("checksum mismatch", body_end);
  }
  if (r.remaining() != 0) {
    throw FormatError("trailing bytes after checksum", r.pos());
  }
  return b;
}

TraceBatch read_trace_batch(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) {
    throw IoError("cannot open " + path.string());
  }
  try {
    return read_trace_batch(is);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.reason, e.offset);
  }
}

std::optional<std::string> Table::meta_value(std::string_view key) const {
  for (const auto& [k, v] : meta) {
    if (k == key) {
      return v;
    }
  }
  for (const auto& [k, v] : footer) {
    if (k == key) {
      return v;
    }
  }
  return std::nullopt;
}

double Table::meta_number(std::string_view key) const {
  const auto v = meta_value(key);
  if (!v) {
    throw SchemaError("missing metadata '" + std::string(key) + "'");
  }
  return parse_double(*v);
}

bool Table::has_column(std::string_view name) const {
  for (const auto& c : columns) {
    if (c == name) {
      return true;
    }
  }
  return false;
}

std::size_t Table::column_index(std::string_view name) const {
  for (std::size_t i = 0; i < columns.size(); ++i) {
    if (columns[i] == name) {
      return i;
    }
  }
  throw SchemaError("missing column '" + std::string(name) + "'");
}

std::vector<double> Table::numbers(std::string_view name) const {
  const std::size_t c = column_index(name);
  std::vector<double> out;
  out.reserve(rows.size());
  for (const auto& row : rows) {
    out.push_back(parse_double(row[c]));
  }
  return out;
}

const std::string& Table::cell(std::size_t row, std::string_view column) const {
  return rows.at(row)[column_index(column)];
}

void write_table(std::ostream& os, const Table& t) {
  for (const auto& [k, v] : t.meta) {
    os << "# " << k << '\t' << v << '\n';
  }
  for (std::size_t i = 0; i < t.columns.size(); ++i) {
    os << (i ? "\t" : "") << t.columns[i];
  }
  os << '\n';
  for (const auto& row : t.rows) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      os << (i ? "\t" : "") << row[i];
    }
    os << '\n';
  }
  for (const auto& [k, v] : t.footer) {
    os << "# " << k << '\t' << v << '\n';
  }
  if (!os) {
    throw IoError("write_table: stream write failed");
  }
}

void write_table(const std::filesystem::path& path, const Table& t) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) {
    throw IoError("cannot open " + path.string() + " for writing");
  }
  write_table(os, t);
}

Table read_table(std::istream& is, const std::string& source) {
  Table t;
  std::string line;
  std::size_t line_no = 0;
  bool have_header = false;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') {
      line.pop_back();
    }
    if (line.empty()) {
      continue;
    }
    if (line.rfind("# ", 0) == 0) {
      const auto parts = split_tabs(line.substr(2));
      auto entry = std::make_pair(parts[0], parts.size() > 1 ? parts[1] : std::string());
      (have_header ? t.footer : t.meta).push_back(std::move(entry));
      continue;
    }
    auto cells = split_tabs(line);
    if (!have_header) {
      t.columns = std::move(cells);
      have_header = true;
      continue;
    }
    if (cells.size() != t.columns.size()) {
      throw SchemaError(source + ":" + std::to_string(line_no) + ": expected " + std::to_string(t.columns.size()) +
                        " columns, found " + std::to_string(cells.size()));
    }
    t.rows.push_back(std::move(cells));
  }
  if (!have_header) {
    throw SchemaError(source + ": no column header");
  }
  return t;
}

Table read_table(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) {
    throw IoError("cannot open " + path.string());
  }
  return read_table(is, path.string());
}

void write_text(const std::filesystem::path& path, std::string_view text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) {
    throw IoError("cannot open " + path.string() + " for writing");
  }
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!os) {
    throw IoError("write failed: " + path.string());
  }
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) {
    throw IoError("cannot open " + path.string());
  }
  return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

} // namespace rsm
