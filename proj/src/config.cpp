#include <rsm/config.hpp>
#include <rsm/io.hpp>

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <set>
#include <sstream>
#include <utility>

namespace rsm {

using nlohmann::json;

namespace {

struct Unit {
  std::string_view name;
  double scale;
};

constexpr Unit kTime[] = {{"s", 1.0}, {"ms", 1e-3}, {"us", 1e-6}, {"\xc2\xb5s", 1e-6}, {"\xce\xbcs", 1e-6}, {"ns", 1e-9}};
constexpr Unit kEnergy[] = {{"eV", 1.0}, {"meV", 1e-3}, {"ueV", 1e-6}, {"\xc2\xb5" "eV", 1e-6}, {"\xce\xbc" "eV", 1e-6}};
constexpr Unit kTemperature[] = {{"K", 1.0}, {"mK", 1e-3}};
constexpr Unit kVoltage[] = {{"V", 1.0}, {"mV", 1e-3}, {"uV", 1e-6}, {"\xc2\xb5V", 1e-6}, {"\xce\xbcV", 1e-6}};
constexpr Unit kRate[] = {{"Hz", 1.0}, {"kHz", 1e3}, {"MHz", 1e6}};
constexpr Unit kField[] = {{"T", 1.0}, {"mT", 1e-3}};

std::span<const Unit> units_of(Dimension d) {
  switch (d) {
  case Dimension::time:
    return kTime;
  case Dimension::energy:
    return kEnergy;
  case Dimension::temperature:
    return kTemperature;
  case Dimension::voltage:
    return kVoltage;
  case Dimension::rate:
    return kRate;
  case Dimension::field:
    return kField;
  case Dimension::none:
    break;
  }
  return {};
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) {
    s.remove_prefix(1);
  }
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t')) {
    s.remove_suffix(1);
  }
  return s;
}

// Tracks which keys of an object were consumed so leftovers can be
// reported as unknown.
class Reader {
public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) {
      throw ConfigError(where() + ": expected an object");
    }
  }

  std::string at(std::string_view key) const { return path_.empty() ? std::string(key) : path_ + "." + std::string(key); }

  const json* get(const char* key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() || it->is_null() ? nullptr : &*it;
  }

  void quantity(const char* key, Dimension d, double& out) {
    if (const json* v = get(key)) {
      out = to_quantity(*v, d, at(key));
    }
  }

  void list(const char* key, Dimension d, std::vector<double>& out) {
    if (const json* v = get(key)) {
      if (!v->is_array()) {
        throw ConfigError(at(key) + ": expected an array");
      }
      out.clear();
      for (std::size_t i = 0; i < v->size(); ++i) {
        out.push_back(to_quantity((*v)[i], d, at(key) + "[" + std::to_string(i) + "]"));
      }
    }
  }

  template <class Int>
  void count(const char* key, Int& out) {
    if (const json* v = get(key)) {
      if (!v->is_number_integer() || v->get<long long>() < 0) {
        throw ConfigError(at(key) + ": expected a non-negative integer");
      }
      out = v->get<Int>();
    }
  }

  void flag(const char* key, bool& out) {
    if (const json* v = get(key)) {
      if (!v->is_boolean()) {
        throw ConfigError(at(key) + ": expected true or false");
      }
      out = v->get<bool>();
    }
  }

  void text(const char* key, std::string& out) {
    if (const json* v = get(key)) {
      if (!v->is_string()) {
        throw ConfigError(at(key) + ": expected a string");
      }
      out = v->get<std::string>();
    }
  }

  Reader child(const char* key) {
    static const json empty = json::object();
    const json* v = get(key);
    return Reader(v ? *v : empty, at(key));
  }

  void finish() const {
    for (const auto& item : j_.items()) {
      if (!seen_.count(item.key())) {
        throw ConfigError("unknown key '" + at(item.key()) + "'");
      }
    }
  }

  static double to_quantity(const json& v, Dimension d, const std::string& path) {
    if (v.is_number()) {
      return v.get<double>();
    }
    if (v.is_string()) {
      try {
        return parse_quantity(v.get<std::string>(), d);
      } catch (const ConfigError& e) {
        throw ConfigError(path + ": " + e.what());
      }
    }
    throw ConfigError(path + ": expected a number or a quantity string");
  }

private:
  std::string where() const { return path_.empty() ? "<root>" : path_; }

  const json& j_;
  std::string path_;
  std::set<std::string, std::less<>> seen_;
};

json ramp_json(const RampSpec& r) {
  return {{"dV_qubit", r.dV.qubit}, {"dV_sensor", r.dV.sensor}, {"t_ramp", r.t_ramp}};
}

std::string_view drift_name(DriftShape s) {
  switch (s) {
  case DriftShape::linear:
    return "linear";
  case DriftShape::sine:
    return "sine";
  case DriftShape::jump:
    return "jump";
  case DriftShape::none:
    break;
  }
  return "none";
}

DriftShape drift_from(const std::string& s, const std::string& path) {
  if (s == "none") {
    return DriftShape::none;
  }
  if (s == "linear") {
    return DriftShape::linear;
  }
  if (s == "sine") {
    return DriftShape::sine;
  }
  if (s == "jump") {
    return DriftShape::jump;
  }
  throw ConfigError(path + ": drift shape must be none, linear, sine or jump");
}

json number_or_text(double v) {
  if (std::isinf(v)) {
    return v > 0 ? "inf" : "-inf";
  }
  return v;
}

void read_device(Reader rd, DeviceConfig& d) {
  rd.text("preset", d.preset);
  rd.quantity("gamma", Dimension::rate, d.gamma);
  rd.quantity("T_e", Dimension::temperature, d.T_e);
  rd.quantity("eps0_down", Dimension::energy, d.eps0_down);
  rd.quantity("g", Dimension::none, d.g);
  {
    Reader la = rd.child("lever_arms");
    la.quantity("a_QQ", Dimension::none, d.lever_arms.a_QQ);
    la.quantity("a_QS", Dimension::none, d.lever_arms.a_QS);
    la.quantity("a_SQ", Dimension::none, d.lever_arms.a_SQ);
    la.quantity("a_SS", Dimension::none, d.lever_arms.a_SS);
    la.finish();
  }
  {
    Reader rr = rd.child("read_ramp");
    rr.quantity("dV_qubit", Dimension::voltage, d.read_ramp.dV.qubit);
    rr.quantity("dV_sensor", Dimension::voltage, d.read_ramp.dV.sensor);
    rr.quantity("t_ramp", Dimension::time, d.read_ramp.t_ramp);
    rr.finish();
  }
  {
    Reader th = rd.child("thermometry");
    th.quantity("T_eff", Dimension::temperature, d.thermometry.T_eff);
    th.quantity("alpha_QQ", Dimension::none, d.thermometry.alpha_QQ);
    th.finish();
  }
  {
    Reader rl = rd.child("relaxation");
    rl.quantity("K_J", Dimension::none, d.relaxation.K_J);
    rl.quantity("K_ph", Dimension::none, d.relaxation.K_ph);
    rl.finish();
  }
  {
    Reader se = rd.child("sensor");
    se.quantity("t_min", Dimension::time, d.sensor.t_min);
    se.quantity("sample_period", Dimension::time, d.sensor.sample_period);
    se.quantity("level_occupied", Dimension::none, d.sensor.level_occupied);
    se.quantity("level_empty", Dimension::none, d.sensor.level_empty);
    se.quantity("rise_time", Dimension::time, d.sensor.rise_time);
    se.finish();
  }
  rd.quantity("gamma_in", Dimension::rate, d.gamma_in);
  rd.quantity("residual_up", Dimension::none, d.residual_up);
  rd.quantity("load_p_up", Dimension::none, d.load_p_up);
  rd.quantity("t_empty", Dimension::time, d.t_empty);
  rd.quantity("t_load", Dimension::time, d.t_load);
  rd.quantity("init_amplitude", Dimension::energy, d.init_amplitude);
  rd.finish();
}

void rethrow_as_config(const std::function<void()>& check) {
  try {
    check();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

std::vector<std::string> split_path(std::string_view p) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto dot = p.find('.', start);
    out.emplace_back(p.substr(start, dot - start));
    if (out.back().empty()) {
      throw ConfigError("override: empty key in '" + std::string(p) + "'");
    }
    if (dot == std::string_view::npos) {
      return out;
    }
    start = dot + 1;
  }
}

} // namespace

double parse_quantity(std::string_view text, Dimension dim) {
  const std::string_view s = trim(text);
  double value = 0.0;
  std::string_view rest;
  if (s.starts_with("inf")) {
    value = std::numeric_limits<double>::infinity();
    rest = s.substr(3);
  } else if (s.starts_with("-inf")) {
    value = -std::numeric_limits<double>::infinity();
    rest = s.substr(4);
  } else {
    const char* first = s.data() + (s.starts_with('+') ? 1 : 0);
    const auto [end, ec] = std::from_chars(first, s.data() + s.size(), value);
    if (ec != std::errc() || end == first) {
      throw ConfigError("cannot read a number from '" + std::string(text) + "'");
    }
    rest = s.substr(static_cast<std::size_t>(end - s.data()));
  }
  const std::string_view unit = trim(rest);
  if (unit.empty()) {
    return value;
  }
  for (const Unit& u : units_of(dim)) {
    if (u.name == unit) {
      return value * u.scale;
    }
  }
  throw ConfigError("unit '" + std::string(unit) + "' does not fit this quantity");
}

double DeviceConfig::ramp_rate() const { return rsm::ramp_rate(lever_arms, read_ramp); }

ReadModel DeviceConfig::read_model(double B) const {
  return ReadModel{gamma, T_e, ramp_rate(), eps0_down, zeeman_energy(g, B)};
}

double ExperimentConfig::T1_at(double B) const {
  if (sweep.T1) {
    return *sweep.T1;
  }
  const double rate = relaxation_rate(device.relaxation, B);
  return rate > 0.0 ? 1.0 / rate : std::numeric_limits<double>::infinity();
}

BatchSetup ExperimentConfig::batch_setup(double B, double t_load, double t_initial) const {
  BatchSetup s;
  s.model = device.read_model(B);
  s.sensor = device.sensor;
  s.seq.t_empty = device.t_empty;
  s.seq.t_load = t_load;
  s.seq.t_read = device.read_ramp.t_ramp;
  s.seq.read_ramp = device.read_ramp;
  s.seq.load_p_up = device.load_p_up;
  if (t_initial > 0.0) {
    RampSpec init = device.read_ramp;
    init.t_ramp = t_initial;
    s.seq.init_ramp = init;
  }
  s.T1 = T1_at(B);
  s.options.gamma_in = device.gamma_in;
  s.options.residual_up = device.residual_up;
  s.options.init_amplitude = device.init_amplitude;
  s.options.field_B = B;
  s.drift = drift;
  if (s.drift.shape == DriftShape::linear && s.drift.scan_length == 0) {
    s.drift.scan_length = sweep.shots;
  }
  return s;
}

FinalExitConfig ExperimentConfig::final_exit_config(double ramp_rate, double v_threshold) const {
  FinalExitConfig c;
  c.penalty = classify.penalty;
  c.v_threshold = v_threshold;
  c.exclusion_energy = classify.exclusion_energy;
  c.T_eff = device.thermometry.T_eff;
  c.ramp_rate = ramp_rate;
  c.filter_window = classify.filter_window;
  c.min_blip_samples = classify.min_blip_samples;
  return c;
}

json device_preset(std::string_view name) {
  json d;
  if (name == "A") {
    d = {{"gamma", "5095.844 Hz"},
         {"T_e", "821 mK"},
         {"eps0_down", "-0.60 meV"},
         {"g", 2.00},
         {"lever_arms", {{"a_QQ", 0.56}, {"a_QS", 0.047}, {"a_SQ", 0.013}, {"a_SS", 0.46}}},
         {"thermometry", {{"T_eff", "821 mK"}, {"alpha_QQ", 0.56}}},
         {"relaxation", {{"K_J", 4.7}, {"K_ph", 0.05}}}};
  } else if (name == "B") {
    d = {{"gamma", "10036.723 Hz"},
         {"T_e", "840 mK"},
         {"eps0_down", "-0.447467977 meV"},
         {"g", 2.09},
         {"lever_arms", {{"a_QQ", 0.55}, {"a_QS", 0.046}, {"a_SQ", 0.05}, {"a_SS", 0.75}}},
         {"thermometry", {{"T_eff", "840 mK"}, {"alpha_QQ", 0.55}}},
         {"relaxation", {{"K_J", 5.6}, {"K_ph", 0.04}}}};
  } else {
    throw ConfigError("device.preset: unknown preset '" + std::string(name) + "' (expected A or B)");
  }
  d["preset"] = std::string(name);
  d["read_ramp"] = {{"dV_qubit", "-2.05 mV"}, {"dV_sensor", "0.505 mV"}, {"t_ramp", "3 ms"}};
  d["sensor"] = {{"t_min", "9 ns"}, {"sample_period", "1 us"}, {"level_occupied", 0.0}, {"level_empty", 1.0},
                 {"rise_time", "1 us"}};
  d["gamma_in"] = 0.0;
  d["residual_up"] = 0.0;
  d["load_p_up"] = 0.5;
  d["t_empty"] = "1 ms";
  d["t_load"] = "1 ms";
  d["init_amplitude"] = "1 meV";
  return d;
}

json config_to_json(const ExperimentConfig& c) {
  const DeviceConfig& d = c.device;
  json j;
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  j["device"] = {
      {"preset", d.preset},
      {"gamma", d.gamma},
      {"T_e", d.T_e},
      {"eps0_down", d.eps0_down},
      {"g", d.g},
      {"lever_arms",
       {{"a_QQ", d.lever_arms.a_QQ}, {"a_QS", d.lever_arms.a_QS}, {"a_SQ", d.lever_arms.a_SQ}, {"a_SS", d.lever_arms.a_SS}}},
      {"read_ramp", ramp_json(d.read_ramp)},
      {"thermometry", {{"T_eff", d.thermometry.T_eff}, {"alpha_QQ", d.thermometry.alpha_QQ}}},
      {"relaxation", {{"K_J", d.relaxation.K_J}, {"K_ph", d.relaxation.K_ph}}},
      {"sensor",
       {{"t_min", d.sensor.t_min},
        {"sample_period", d.sensor.sample_period},
        {"level_occupied", d.sensor.level_occupied},
        {"level_empty", d.sensor.level_empty},
        {"rise_time", d.sensor.rise_time}}},
      {"gamma_in", d.gamma_in},
      {"residual_up", d.residual_up},
      {"load_p_up", d.load_p_up},
      {"t_empty", d.t_empty},
      {"t_load", d.t_load},
      {"init_amplitude", d.init_amplitude},
  };
  j["sweep"] = {{"fields", c.sweep.fields},
                {"t_loads", c.sweep.t_loads},
                {"t_initials", c.sweep.t_initials},
                {"shots", c.sweep.shots},
                {"T1", c.sweep.T1 ? number_or_text(*c.sweep.T1) : json("law")},
                {"T_mxc", c.sweep.T_mxc},
                {"width_noise", c.sweep.width_noise},
                {"rate_fields", c.sweep.rate_fields},
                {"rate_noise", c.sweep.rate_noise}};
  j["classify"] = {{"v_threshold", c.classify.v_threshold ? json(*c.classify.v_threshold) : json("auto")},
                   {"t_threshold", c.classify.t_threshold ? json(*c.classify.t_threshold) : json("model")},
                   {"filter_window", c.classify.filter_window},
                   {"penalty", c.classify.penalty},
                   {"exclusion_energy", c.classify.exclusion_energy},
                   {"min_blip_samples", c.classify.min_blip_samples}};
  j["drift"] = {{"shape", drift_name(c.drift.shape)},
                {"amplitude", c.drift.amplitude},
                {"period", c.drift.period},
                {"scan_length", c.drift.scan_length}};
  j["fit"] = {{"freeze_T_e", c.fit.freeze_T_e},
              {"free_intercept", c.fit.free_intercept},
              {"n_jitter", c.fit.n_jitter},
              {"bootstrap", c.fit.bootstrap},
              {"bin_width", c.fit.bin_width},
              {"visibility_fields", c.fit.visibility_fields}};
  return j;
}

ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  Reader root(j, "");
  if (const json* s = root.get("seed")) {
    if (!s->is_number_unsigned()) {
      throw ConfigError("seed: expected a non-negative integer");
    }
    c.seed = s->get<std::uint64_t>();
  }
  root.text("output_dir", c.output_dir);

  json device = device_preset("A");
  if (const json* dj = root.get("device")) {
    if (!dj->is_object()) {
      throw ConfigError("device: expected an object");
    }
    if (const auto p = dj->find("preset"); p != dj->end()) {
      if (!p->is_string()) {
        throw ConfigError("device.preset: expected a string");
      }
      device = device_preset(p->get<std::string>());
    }
    device.merge_patch(*dj);
  }
  read_device(Reader(device, "device"), c.device);

  {
    Reader sw = root.child("sweep");
    sw.list("fields", Dimension::field, c.sweep.fields);
    sw.list("t_loads", Dimension::time, c.sweep.t_loads);
    sw.list("t_initials", Dimension::time, c.sweep.t_initials);
    sw.count("shots", c.sweep.shots);
    if (const json* t1 = sw.get("T1")) {
      if (t1->is_string() && t1->get<std::string>() == "law") {
        c.sweep.T1.reset();
      } else {
        c.sweep.T1 = Reader::to_quantity(*t1, Dimension::time, "sweep.T1");
      }
    }
    sw.list("T_mxc", Dimension::temperature, c.sweep.T_mxc);
    sw.quantity("width_noise", Dimension::none, c.sweep.width_noise);
    sw.list("rate_fields", Dimension::field, c.sweep.rate_fields);
    sw.quantity("rate_noise", Dimension::none, c.sweep.rate_noise);
    sw.finish();
  }
  {
    Reader cl = root.child("classify");
    if (const json* v = cl.get("v_threshold")) {
      if (v->is_string() && v->get<std::string>() == "auto") {
        c.classify.v_threshold.reset();
      } else {
        c.classify.v_threshold = Reader::to_quantity(*v, Dimension::none, "classify.v_threshold");
      }
    }
    if (const json* v = cl.get("t_threshold")) {
      if (v->is_string() && v->get<std::string>() == "model") {
        c.classify.t_threshold.reset();
      } else {
        c.classify.t_threshold = Reader::to_quantity(*v, Dimension::time, "classify.t_threshold");
      }
    }
    cl.count("filter_window", c.classify.filter_window);
    cl.quantity("penalty", Dimension::none, c.classify.penalty);
    cl.quantity("exclusion_energy", Dimension::none, c.classify.exclusion_energy);
    cl.count("min_blip_samples", c.classify.min_blip_samples);
    cl.finish();
  }
  {
    Reader dr = root.child("drift");
    std::string shape = "none";
    dr.text("shape", shape);
    c.drift.shape = drift_from(shape, "drift.shape");
    dr.quantity("amplitude", Dimension::energy, c.drift.amplitude);
    dr.count("period", c.drift.period);
    dr.count("scan_length", c.drift.scan_length);
    dr.finish();
  }
  {
    Reader ft = root.child("fit");
    ft.flag("freeze_T_e", c.fit.freeze_T_e);
    ft.flag("free_intercept", c.fit.free_intercept);
    ft.count("n_jitter", c.fit.n_jitter);
    ft.count("bootstrap", c.fit.bootstrap);
    ft.quantity("bin_width", Dimension::time, c.fit.bin_width);
    ft.list("visibility_fields", Dimension::field, c.fit.visibility_fields);
    ft.finish();
  }
  root.finish();

  rethrow_as_config([&] {
    const DeviceConfig& d = c.device;
    d.lever_arms.validate();
    d.read_ramp.validate();
    d.sensor.validate();
    d.thermometry.validate();
    d.relaxation.validate();
    for (double B : c.sweep.fields) {
      d.read_model(B).validate();
    }
  });
  const auto fail = [](const std::string& m) { throw ConfigError(m); };
  if (c.sweep.fields.empty()) {
    fail("sweep.fields: must be non-empty");
  }
  for (double B : c.sweep.fields) {
    if (!(B >= 0.0)) {
      fail("sweep.fields: fields must be >= 0");
    }
  }
  for (double t : c.sweep.t_loads) {
    if (!(t >= 0.0)) {
      fail("sweep.t_loads: load times must be >= 0");
    }
  }
  for (double t : c.sweep.t_initials) {
    if (!(t >= 0.0)) {
      fail("sweep.t_initials: initialization times must be >= 0");
    }
  }
  if (c.sweep.T1 && !(*c.sweep.T1 > 0.0)) {
    fail("sweep.T1: must be > 0");
  }
  if (!(c.device.load_p_up >= 0.0 && c.device.load_p_up <= 1.0)) {
    fail("device.load_p_up: must lie in [0, 1]");
  }
  if (!(c.device.residual_up >= 0.0 && c.device.residual_up <= 1.0)) {
    fail("device.residual_up: must lie in [0, 1]");
  }
  if (c.classify.filter_window == 0) {
    fail("classify.filter_window: must be >= 1");
  }
  if (!(c.classify.penalty > 0.0)) {
    fail("classify.penalty: must be > 0");
  }
  if (c.drift.shape == DriftShape::sine && c.drift.period == 0) {
    fail("drift.period: sine drift needs a period");
  }
  if (c.drift.shape == DriftShape::jump && c.drift.period == 0) {
    fail("drift.period: jump drift needs a period");
  }
  return c;
}

void apply_override(json& j, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) {
    throw ConfigError("override '" + std::string(assignment) + "': expected key=value");
  }
  const auto keys = split_path(trim(assignment.substr(0, eq)));
  const std::string text(trim(assignment.substr(eq + 1)));
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) {
    value = text;
  }
  json* node = &j;
  for (std::size_t i = 0; i + 1 < keys.size(); ++i) {
    json& next = (*node)[keys[i]];
    if (next.is_null()) {
      next = json::object();
    }
    if (!next.is_object()) {
      throw ConfigError("override '" + std::string(assignment) + "': '" + keys[i] + "' is not an object");
    }
    node = &next;
  }
  (*node)[keys.back()] = std::move(value);
}

ExperimentConfig load_config(const std::optional<std::filesystem::path>& file, std::span<const std::string> overrides) {
  json j = json::object();
  if (file) {
    std::ifstream in(*file);
    if (!in) {
      throw IoError("cannot open config " + file->string());
    }
    j = json::parse(in, nullptr, false);
    if (j.is_discarded()) {
      throw ConfigError(file->string() + ": not valid JSON");
    }
    if (!j.is_object()) {
      throw ConfigError(file->string() + ": top level must be an object");
    }
  }
  for (const auto& o : overrides) {
    apply_override(j, o);
  }
  return config_from_json(j);
}

std::uint64_t config_hash(const ExperimentConfig& cfg) { return fnv1a(config_to_json(cfg).dump()); }

} // namespace rsm
