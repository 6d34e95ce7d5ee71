#include <doctest.h>

#include <rsm/io.hpp>
#include <rsm/simulate.hpp>

#include <cmath>
#include <filesystem>
#include <limits>
#include <sstream>
#include <string>

using namespace rsm;

namespace {

TraceBatch small_batch(std::size_t n = 3) {
  BatchSetup b;
  b.seq.t_empty = 1e-3;
  b.seq.t_load = 1e-3;
  b.seq.t_read = 50e-6;
  b.seq.read_ramp = RampSpec{{-2.05e-3, 0.505e-3}, 50e-6};
  b.model = ReadModel{1e5, 0.84, 0.36809, -0.05e-3, zeeman_energy(2.09, 2.5)};
  b.T1 = 13.2e-3;
  b.options.init_amplitude = 1e-3;
  b.drift = DriftSpec{DriftShape::sine, 1e-5, 7, 0};
  TraceBatch batch;
  batch.header = BatchHeader::from(b, 2.09, 42, 5);
  batch.shots = simulate_batch(n, b, 42, 5);
  return batch;
}

std::string encode(const TraceBatch& b) {
  std::ostringstream os(std::ios::binary);
  write_trace_batch(os, b);
  return os.str();
}

TraceBatch decode(const std::string& bytes) {
  std::istringstream is(bytes, std::ios::binary);
  return read_trace_batch(is);
}

bool same_optional(const std::optional<double>& a, const std::optional<double>& b) {
  return a.has_value() == b.has_value() && (!a || *a == *b);
}

} // namespace

TEST_CASE("trace batch round trip") {
  const TraceBatch in = small_batch();
  const TraceBatch out = decode(encode(in));
  CHECK(out.header.base_seed == 42);
  CHECK(out.header.first_index == 5);
  CHECK(out.header.g == 2.09);
  CHECK(out.header.model.gamma == in.header.model.gamma);
  CHECK(out.header.model.E_Z == in.header.model.E_Z);
  CHECK(out.header.T1 == in.header.T1);
  CHECK(out.header.drift_shape == DriftShape::sine);
  CHECK(out.header.drift_period == 7);
  REQUIRE(out.shots.size() == in.shots.size());
  for (std::size_t i = 0; i < in.shots.size(); ++i) {
    const ShotTrace& a = in.shots[i];
    const ShotTrace& b = out.shots[i];
    CHECK(a.samples == b.samples);
    CHECK(a.index == b.index);
    CHECK(a.seed == b.seed);
    CHECK(a.sample_period == b.sample_period);
    CHECK(a.detuning_offset == b.detuning_offset);
    CHECK(a.truth.initial_spin == b.truth.initial_spin);
    CHECK(a.truth.loaded_spin == b.truth.loaded_spin);
    CHECK(a.truth.relaxed == b.truth.relaxed);
    CHECK(same_optional(a.truth.t_up_out, b.truth.t_up_out));
    CHECK(same_optional(a.truth.t_blip_in, b.truth.t_blip_in));
    CHECK(same_optional(a.truth.t_down_out, b.truth.t_down_out));
  }
  // Shots regenerate from the stored header alone.
  const auto again = simulate_batch(in.shots.size(), out.header.setup(), out.header.base_seed, out.header.first_index);
  for (std::size_t i = 0; i < again.size(); ++i) {
    CHECK(again[i].samples == in.shots[i].samples);
  }
  CHECK(encode(out) == encode(in));
}

TEST_CASE("empty batch round trip") {
  const TraceBatch in = small_batch(0);
  CHECK(decode(encode(in)).shots.empty());
}

TEST_CASE("every truncation is reported with an offset") {
  const std::string bytes = encode(small_batch(2));
  for (std::size_t len = 0; len < bytes.size(); ++len) {
    CAPTURE(len);
    try {
      decode(bytes.substr(0, len));
      FAIL("truncated input accepted");
    } catch (const FormatError& e) {
      CHECK(e.offset <= len);
      CHECK(std::string(e.what()).find("byte offset") != std::string::npos);
    }
  }
}

TEST_CASE("corruption is detected") {
  const std::string bytes = encode(small_batch(2));
  SUBCASE("bad magic") {
    std::string b = bytes;
    b[0] = 'X';
    try {
      decode(b);
      FAIL("bad magic accepted");
    } catch (const FormatError& e) {
      CHECK(e.offset == 0);
    }
  }
  SUBCASE("flipped sample byte") {
    std::string b = bytes;
    b[b.size() - 20] ^= 0x40;
    CHECK_THROWS_AS(decode(b), FormatError);
  }
  SUBCASE("trailing garbage") {
    CHECK_THROWS_AS(decode(bytes + "x"), FormatError);
  }
  SUBCASE("unsupported version") {
    std::string b = bytes;
    b[8] = 9;
    try {
      decode(b);
      FAIL("bad version accepted");
    } catch (const FormatError& e) {
      CHECK(e.offset == 8);
    }
  }
}

TEST_CASE("file round trip and hashing") {
  const auto dir = std::filesystem::temp_directory_path() / "rsm_test_io";
  std::filesystem::create_directories(dir);
  const auto path = dir / "batch.rsmt";
  const TraceBatch in = small_batch();
  write_trace_batch(path, in);
  CHECK(read_trace_batch(path).shots.size() == in.shots.size());
  const auto h = file_hash(path);
  write_trace_batch(path, in);
  CHECK(file_hash(path) == h);
  CHECK(h == fnv1a(encode(in)));
  CHECK(hex64(0x1f) == "000000000000001f");
  CHECK_THROWS_AS(read_trace_batch(dir / "missing.rsmt"), IoError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("fnv1a reference values") {
  CHECK(fnv1a("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a("a") == 0xaf63dc4c8601ec8cULL);
  CHECK(fnv1a("foobar") == 0x85944171f73967e8ULL);
}

TEST_CASE("doubles survive text") {
  for (double v : {0.0, -0.0, 1.0 / 3.0, 1e-300, 6.02214076e23, -2.05e-3, 5095.844, 4.9e-324,
                   std::numeric_limits<double>::max()}) {
    const double back = parse_double(format_double(v));
    CHECK(back == v);
    CHECK(std::signbit(back) == std::signbit(v));
  }
  CHECK(format_double(std::numeric_limits<double>::quiet_NaN()) == "nan");
  CHECK(format_double(std::numeric_limits<double>::infinity()) == "inf");
  CHECK(format_double(-std::numeric_limits<double>::infinity()) == "-inf");
  CHECK(std::isnan(parse_double("nan")));
  CHECK(parse_double("-inf") == -std::numeric_limits<double>::infinity());
  CHECK_THROWS_AS(parse_double("1.5x"), SchemaError);
  CHECK_THROWS_AS(parse_double(""), SchemaError);
}

TEST_CASE("table round trip") {
  Table t;
  t.meta = {{"method", "final-exit"}, {"B", "2.5"}};
  t.columns = {"index", "t_out", "label"};
  t.rows = {{"0", "0.00012", "up"}, {"1", "-", "down"}};
  t.footer = {{"shots", "2"}};
  std::stringstream ss;
  write_table(ss, t);
  const Table back = read_table(ss);
  CHECK(back.meta == t.meta);
  CHECK(back.columns == t.columns);
  CHECK(back.rows == t.rows);
  CHECK(back.footer == t.footer);
  CHECK(back.meta_number("B") == 2.5);
  CHECK(back.meta_value("method") == "final-exit");
  CHECK_FALSE(back.meta_value("absent").has_value());
  const auto col = back.numbers("t_out");
  CHECK(col[0] == 0.00012);
  CHECK(std::isnan(col[1]));
  CHECK(back.cell(1, "label") == "down");
}

TEST_CASE("table schema errors") {
  std::stringstream ss("# B\t2.5\nindex\tt_out\n0\t1e-4\n");
  const Table t = read_table(ss);
  CHECK_THROWS_AS(t.numbers("label"), SchemaError);
  CHECK_THROWS_AS(t.meta_number("T1"), SchemaError);
  std::stringstream ragged("a\tb\n1\t2\n3\n");
  CHECK_THROWS_AS(read_table(ragged), SchemaError);
  std::stringstream header_only("# only\tmeta\n");
  CHECK_THROWS_AS(read_table(header_only), SchemaError);
}
