#include <rsm/changepoint.hpp>
#include <rsm/cli.hpp>
#include <rsm/estimate.hpp>
#include <rsm/io.hpp>
#include <rsm/scans.hpp>

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

namespace rsm {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// Small helpers

std::string two_digits(std::size_t i) {
  std::ostringstream os;
  os << std::setw(2) << std::setfill('0') << i;
  return os.str();
}

std::string fmt(double v) { return format_double(v); }

std::string opt_fmt(const std::optional<double>& v) { return v ? format_double(*v) : "-"; }

json num(double v) {
  if (std::isnan(v)) {
    return nullptr;
  }
  if (std::isinf(v)) {
    return v > 0 ? "inf" : "-inf";
  }
  return v;
}

double json_number(const json& j) {
  if (j.is_number()) {
    return j.get<double>();
  }
  if (j.is_string()) {
    return parse_double(j.get<std::string>());
  }
  return std::numeric_limits<double>::quiet_NaN();
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

json read_json(const fs::path& path) {
  json j = json::parse(read_text(path), nullptr, false);
  if (j.is_discarded()) {
    throw SchemaError(path.string() + ": not valid JSON");
  }
  return j;
}

std::vector<fs::path> list_files(const fs::path& dir, std::string_view suffix, std::string_view prefix = "") {
  std::vector<fs::path> out;
  if (!fs::is_directory(dir)) {
    return out;
  }
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string name = e.path().filename().string();
    if (e.is_regular_file() && name.ends_with(suffix) && name.starts_with(prefix)) {
      out.push_back(e.path());
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::string stem_of(const fs::path& p) {
  std::string s = p.filename().string();
  const auto dot = s.find('.');
  return dot == std::string::npos ? s : s.substr(0, dot);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void record_stage(const fs::path& out, const ExperimentConfig& cfg, const std::string& stage,
                  const std::vector<fs::path>& files, double seconds) {
  const fs::path path = out / "manifest.json";
  json m = fs::exists(path) ? read_json(path) : json::object();
  m["tool_version"] = std::string(kToolVersion);
  m["config_hash"] = hex64(config_hash(cfg));
  m["config"] = config_to_json(cfg);
  json entry;
  entry["seconds"] = seconds;
  entry["config_hash"] = hex64(config_hash(cfg));
  entry["files"] = json::array();
  for (const auto& f : files) {
    entry["files"].push_back({{"path", fs::relative(f, out).generic_string()}, {"hash", hex64(file_hash(f))}});
  }
  m["stages"][stage] = entry;
  write_json(path, m);
}

std::string spin_text(Spin s) { return std::string(to_string(s)); }

// ---------------------------------------------------------------------------
// Classification tables

struct LoadedTable {
  fs::path path;
  Table table;
};

std::vector<LoadedTable> load_tables(std::span<const fs::path> inputs, const fs::path& fallback_dir,
                                     std::string_view suffix) {
  std::vector<fs::path> paths(inputs.begin(), inputs.end());
  if (paths.empty()) {
    paths = list_files(fallback_dir, suffix);
  }
  if (paths.empty()) {
    throw SchemaError("no input tables matching *" + std::string(suffix) + " in " + fallback_dir.string());
  }
  std::vector<LoadedTable> out;
  for (const auto& p : paths) {
    out.push_back({p, read_table(p)});
  }
  return out;
}

std::vector<std::optional<double>> t_out_column(const Table& t) {
  std::vector<std::optional<double>> out;
  const std::size_t c = t.column_index("t_out");
  for (const auto& row : t.rows) {
    if (row[c] == "-") {
      out.emplace_back();
    } else {
      out.emplace_back(parse_double(row[c]));
    }
  }
  return out;
}

ReadModel table_model(const Table& t) {
  return ReadModel{t.meta_number("model_gamma"), t.meta_number("model_T_e"), t.meta_number("model_r"),
                   t.meta_number("model_eps0_down"), t.meta_number("model_E_Z")};
}

struct LabelCounts {
  std::size_t shots = 0;
  std::size_t up = 0;
  std::size_t undetermined = 0;
  std::size_t truth_up = 0;
};

LabelCounts count_labels(const Table& t) {
  LabelCounts c;
  const std::size_t label = t.column_index("label");
  const std::size_t truth = t.column_index("truth_spin");
  for (const auto& row : t.rows) {
    ++c.shots;
    c.up += row[label] == "up";
    c.undetermined += row[label] == "undetermined";
    c.truth_up += row[truth] == "up";
  }
  return c;
}

ScanRow scan_row(double x, const LabelCounts& c) {
  ScanRow r;
  r.x = x;
  r.shots = c.shots;
  r.classified_up = c.up;
  r.undetermined = c.undetermined;
  r.truth_up = c.truth_up;
  return r;
}

// ---------------------------------------------------------------------------
// Mixture fits

struct MixtureOutcome {
  std::string stem;
  double B = 0.0;
  std::optional<MixtureFit> fit;
  std::optional<DeltaT> delta;
  std::string error;
  json report;
};

MixtureOutcome fit_one_mixture(const ExperimentConfig& cfg, const LoadedTable& lt, const fs::path& fit_dir) {
  const Table& t = lt.table;
  MixtureOutcome out;
  out.stem = stem_of(lt.path);
  out.B = t.meta_number("B");
  const double t_read = t.meta_number("t_read");
  const ReadModel truth = table_model(t);
  const auto t_outs = t_out_column(t);
  const MixtureData data = MixtureData::from(t_outs, t_read);
  const LabelCounts counts = count_labels(t);

  json rep;
  rep["source"] = lt.path.filename().string();
  rep["B"] = out.B;
  rep["n_shots"] = data.n_shots();
  rep["n_censored"] = data.n_censored;
  try {
    if (data.t_outs.size() < 100) {
      throw FitDiagnostic("fewer than 100 uncensored t_out values");
    }
    const MixtureParams init = guess_mixture_init(data, truth.r, cfg.device.gamma, cfg.device.T_e);
    MixtureFitOptions opts;
    opts.freeze_T_e = cfg.fit.freeze_T_e;
    opts.n_jitter = cfg.fit.n_jitter;
    opts.seed = derive_seed(cfg.seed, 0x6d6978, fnv1a(out.stem));
    const MixtureFit fit = fit_mixture(data, truth.r, init, MixtureBounds::around(init), opts);
    out.fit = fit;
    rep["status"] = std::string(to_string(fit.status));
    rep["flags"] = fit.flags;
    rep["log_likelihood"] = fit.log_likelihood;
    rep["init_log_likelihood"] = fit.init_log_likelihood;
    rep["best_start"] = fit.best_start;
    rep["chi2_dof"] = num(fit.chi2_dof);
    rep["dof"] = fit.dof;
    rep["r"] = fit.r;
    const auto values = fit.params.values();
    const std::array<double, 5> truths{truth.gamma, truth.T_e, truth.eps0_down, truth.E_Z,
                                       static_cast<double>(counts.truth_up) / static_cast<double>(counts.shots)};
    for (std::size_t i = 0; i < MixtureParams::size; ++i) {
      rep["params"][MixtureParams::names[i]] = {{"value", values[i]}, {"error", fit.error(i)}, {"truth", truths[i]}};
    }
    json cov = json::array();
    for (int i = 0; i < 5; ++i) {
      json row = json::array();
      for (int j = 0; j < 5; ++j) {
        row.push_back(fit.covariance(i, j));
      }
      cov.push_back(row);
    }
    rep["covariance"] = cov;
    try {
      const DeltaT d = extract_delta_t(fit, truth.r);
      out.delta = d;
      rep["delta_t"] = {{"value", d.delta_t}, {"error", d.delta_t_error}, {"delta_E", d.delta_E},
                        {"delta_E_error", d.delta_E_error}};
    } catch (const FitDiagnostic& e) {
      rep["delta_t"] = {{"diagnostic", e.what()}};
    }
    if (cfg.fit.bootstrap > 0) {
      MixtureFitOptions bopts = opts;
      bopts.n_jitter = 0;
      const auto boot = bootstrap_errors<std::optional<double>>(
          t_outs,
          [&](std::span<const std::optional<double>> s) {
            const MixtureData d = MixtureData::from(s, t_read);
            const MixtureFit f = fit_mixture(d, truth.r, fit.params, MixtureBounds::around(init), bopts);
            const auto v = f.params.values();
            return Eigen::VectorXd(Eigen::Map<const Eigen::VectorXd>(v.data(), 5));
          },
          cfg.fit.bootstrap, derive_seed(opts.seed, 0xb0075));
      for (std::size_t i = 0; i < MixtureParams::size; ++i) {
        rep["params"][MixtureParams::names[i]]["bootstrap_error"] = boot.std_error[static_cast<Eigen::Index>(i)];
      }
      rep["bootstrap_failed"] = boot.n_failed;
    }

    // Histogram with the fitted curve for plotting.
    const double bw = cfg.fit.bin_width > 0.0 ? cfg.fit.bin_width : t_read / 60.0;
    const Histogram h = build_histogram(t_outs, bw, t_read);
    const ReadModel m = fit.model();
    Table plot;
    plot.meta = {{"source", lt.path.filename().string()}, {"B", fmt(out.B)}, {"status", rep["status"]}};
    plot.columns = {"t_lo", "t_hi", "count", "expected", "expected_down", "expected_up"};
    const auto n = static_cast<double>(h.n_total);
    for (std::size_t i = 0; i < h.bins(); ++i) {
      const double a = h.edge(i);
      const double b = h.edge(i + 1);
      const double dn = (1.0 - fit.params.p_up) * (tunnel_out_cdf(m, Spin::down, b) - tunnel_out_cdf(m, Spin::down, a));
      const double up = fit.params.p_up * (tunnel_out_cdf(m, Spin::up, b) - tunnel_out_cdf(m, Spin::up, a));
      plot.rows.push_back({fmt(a), fmt(b), std::to_string(h.counts[i]), fmt(n * (dn + up)), fmt(n * dn), fmt(n * up)});
    }
    plot.footer = {{"censored", std::to_string(h.censored)}};
    write_table(fit_dir / ("mixture_" + out.stem + ".tsv"), plot);
  } catch (const FitDiagnostic& e) {
    out.error = e.what();
    rep["status"] = "failed";
    rep["diagnostic"] = e.what();
  } catch (const std::invalid_argument& e) {
    out.error = e.what();
    rep["status"] = "failed";
    rep["diagnostic"] = e.what();
  }
  out.report = rep;
  write_json(fit_dir / ("mixture_" + out.stem + ".json"), rep);
  return out;
}

std::vector<MixtureOutcome> fit_mixtures(const ExperimentConfig& cfg, const fs::path& out,
                                         std::span<const fs::path> inputs, std::vector<fs::path>& files,
                                         std::string& summary, bool& diagnostics) {
  const auto tables = load_tables(inputs, out / "classified", ".static.tsv");
  const fs::path fit_dir = out / "fits";
  fs::create_directories(fit_dir);
  std::vector<MixtureOutcome> results;
  for (const auto& lt : tables) {
    MixtureOutcome r = fit_one_mixture(cfg, lt, fit_dir);
    files.push_back(fit_dir / ("mixture_" + r.stem + ".json"));
    if (r.fit) {
      files.push_back(fit_dir / ("mixture_" + r.stem + ".tsv"));
    }
    std::ostringstream line;
    line << "mixture " << r.stem << " B=" << r.B << " T: ";
    if (r.fit) {
      line << "status=" << to_string(r.fit->status) << " E_Z=" << r.fit->params.E_Z * 1e6 << " ueV ("
           << r.fit->error(3) * 1e6 << ") p_up=" << r.fit->params.p_up;
      if (r.fit->status != FitStatus::ok) {
        diagnostics = true;
        line << " flags=";
        for (const auto& f : r.fit->flags) {
          line << f << ";";
        }
      }
    } else {
      diagnostics = true;
      line << "failed: " << r.error;
    }
    summary += line.str() + "\n";
    results.push_back(std::move(r));
  }
  return results;
}

// ---------------------------------------------------------------------------
// Fit families

CommandOutput fit_g(const ExperimentConfig& cfg, const fs::path& out, std::span<const fs::path> inputs) {
  CommandOutput res;
  bool diag = false;
  const auto mixtures = fit_mixtures(cfg, out, inputs, res.files, res.summary, diag);
  std::vector<FieldScanPoint> points;
  Table plot;
  plot.columns = {"B", "delta_t", "delta_t_error", "delta_E", "delta_E_error"};
  for (const auto& m : mixtures) {
    if (m.delta && m.delta->delta_E_error > 0.0) {
      points.push_back({m.B, m.delta->delta_E, m.delta->delta_E_error});
      plot.rows.push_back({fmt(m.B), fmt(m.delta->delta_t), fmt(m.delta->delta_t_error), fmt(m.delta->delta_E),
                           fmt(m.delta->delta_E_error)});
    }
  }
  if (points.size() < 2) {
    throw FitDiagnostic("g fit: fewer than two fields produced a usable peak separation");
  }
  const GFactorFit g = fit_g_factor(points, cfg.fit.free_intercept);
  plot.meta = {{"g", fmt(g.g)}, {"g_error", fmt(g.g_error)}, {"intercept", fmt(g.intercept)}};
  plot.columns.push_back("fit_delta_E");
  for (std::size_t i = 0; i < points.size(); ++i) {
    plot.rows[i].push_back(fmt(g.intercept + g.g * constants::mu_B * points[i].B));
  }
  const fs::path fit_dir = out / "fits";
  json rep = {{"g", g.g},
              {"g_error", g.g_error},
              {"intercept", g.intercept},
              {"intercept_error", g.intercept_error},
              {"free_intercept", g.free_intercept},
              {"intercept_significant", g.intercept_significant},
              {"chi2", g.chi2},
              {"dof", g.dof},
              {"truth_g", cfg.device.g},
              {"n_fields", points.size()}};
  write_json(fit_dir / "g_factor.json", rep);
  write_table(fit_dir / "g_factor.tsv", plot);
  res.files.push_back(fit_dir / "g_factor.json");
  res.files.push_back(fit_dir / "g_factor.tsv");
  std::ostringstream line;
  line << "g = " << g.g << " +/- " << g.g_error << " (" << points.size() << " fields)";
  if (g.intercept_significant) {
    line << "; intercept " << g.intercept * 1e6 << " ueV is significant";
  }
  res.summary += line.str() + "\n";
  res.exit_code = diag ? exit_code::fit_diagnostic : exit_code::ok;
  return res;
}

CommandOutput fit_t1(const ExperimentConfig&, const fs::path& out, std::span<const fs::path> inputs) {
  CommandOutput res;
  const auto tables = load_tables(inputs, out / "classified", ".final-exit.tsv");
  std::map<double, std::vector<std::pair<double, const LoadedTable*>>> by_field;
  for (const auto& lt : tables) {
    by_field[lt.table.meta_number("B")].push_back({lt.table.meta_number("t_load"), &lt});
  }
  const fs::path fit_dir = out / "fits";
  fs::create_directories(fit_dir);
  Table plot;
  plot.columns = {"B", "t_load", "fraction", "error", "truth_fraction", "fit"};
  Table rates;
  rates.columns = {"B", "rate", "error"};
  json rep = json::array();
  bool diag = false;
  for (auto& [B, group] : by_field) {
    std::sort(group.begin(), group.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    std::vector<DecayPoint> scan;
    std::vector<ScanRow> rows;
    for (const auto& [t_load, lt] : group) {
      const ScanRow r = scan_row(t_load, count_labels(lt->table));
      rows.push_back(r);
      scan.push_back({t_load, r.classified_fraction(), r.classified_error()});
    }
    json entry = {{"B", B}, {"truth_T1", num(group.front().second->table.meta_number("T1"))}};
    try {
      const DecayFit d = fit_exponential_decay(scan);
      entry.update({{"T1", d.T1},
                    {"T1_error", d.T1_error},
                    {"amplitude", d.amplitude},
                    {"amplitude_error", d.amplitude_error},
                    {"offset", d.offset},
                    {"offset_error", d.offset_error},
                    {"chi2", d.chi2},
                    {"dof", d.dof},
                    {"status", std::string(to_string(d.status))},
                    {"flags", d.flags}});
      for (std::size_t i = 0; i < scan.size(); ++i) {
        plot.rows.push_back({fmt(B), fmt(scan[i].t_load), fmt(scan[i].fraction), fmt(scan[i].error),
                             fmt(rows[i].truth_fraction()), fmt(d.predict(scan[i].t_load))});
      }
      if (d.status == FitStatus::ok) {
        rates.rows.push_back({fmt(B), fmt(1.0 / d.T1), fmt(d.T1_error / (d.T1 * d.T1))});
      } else {
        diag = true;
      }
      std::ostringstream line;
      line << "T1(B=" << B << " T) = " << d.T1 * 1e3 << " ms +/- " << d.T1_error * 1e3 << " ms, status "
           << to_string(d.status);
      res.summary += line.str() + "\n";
    } catch (const std::exception& e) {
      diag = true;
      entry["status"] = "failed";
      entry["diagnostic"] = e.what();
      res.summary += "T1(B=" + fmt(B) + " T) failed: " + e.what() + "\n";
    }
    rep.push_back(entry);
  }
  write_json(fit_dir / "t1.json", json{{"fields", rep}});
  write_table(fit_dir / "t1_decay.tsv", plot);
  write_table(fit_dir / "t1_rates.tsv", rates);
  res.files = {fit_dir / "t1.json", fit_dir / "t1_decay.tsv", fit_dir / "t1_rates.tsv"};
  res.exit_code = diag ? exit_code::fit_diagnostic : exit_code::ok;
  return res;
}

CommandOutput fit_t1_field(const ExperimentConfig& cfg, const fs::path& out, std::span<const fs::path> inputs) {
  CommandOutput res;
  fs::path src;
  if (!inputs.empty()) {
    src = inputs.front();
  } else if (fs::exists(out / "rate_scan.tsv")) {
    src = out / "rate_scan.tsv";
  } else {
    src = out / "fits" / "t1_rates.tsv";
  }
  const Table t = read_table(src);
  const auto B = t.numbers("B");
  const auto rate = t.numbers("rate");
  const auto err = t.numbers("error");
  std::vector<FieldScanPoint> pts;
  for (std::size_t i = 0; i < B.size(); ++i) {
    pts.push_back({B[i], rate[i], err[i]});
  }
  const RelaxationLawFit f = fit_rate_field_law(pts);
  const fs::path fit_dir = out / "fits";
  fs::create_directories(fit_dir);
  Table plot;
  plot.meta = {{"source", src.filename().string()}};
  plot.columns = {"B", "rate", "error", "fit"};
  for (const auto& p : pts) {
    plot.rows.push_back({fmt(p.B), fmt(p.value), fmt(p.error), fmt(relaxation_rate(f.law, p.B))});
  }
  json rep = {{"source", src.filename().string()},
              {"K_J", f.law.K_J},
              {"K_J_error", f.K_J_error},
              {"K_ph", f.law.K_ph},
              {"K_ph_error", f.K_ph_error},
              {"chi2", f.chi2},
              {"dof", f.dof},
              {"flags", f.flags},
              {"truth_K_J", cfg.device.relaxation.K_J},
              {"truth_K_ph", cfg.device.relaxation.K_ph}};
  if (f.law.K_J > 0.0 && f.law.K_ph > 0.0) {
    rep["crossover_field"] = crossover_field(f.law);
  }
  write_json(fit_dir / "t1_field.json", rep);
  write_table(fit_dir / "t1_field.tsv", plot);
  res.files = {fit_dir / "t1_field.json", fit_dir / "t1_field.tsv"};
  std::ostringstream line;
  line << "K_J = " << f.law.K_J << " +/- " << f.K_J_error << " Hz/T^3, K_ph = " << f.law.K_ph << " +/- "
       << f.K_ph_error << " Hz/T^7";
  res.summary = line.str() + "\n";
  if (!f.flags.empty()) {
    res.exit_code = exit_code::fit_diagnostic;
    for (const auto& fl : f.flags) {
      res.summary += "flag: " + fl + "\n";
    }
  }
  return res;
}

CommandOutput fit_thermo(const ExperimentConfig& cfg, const fs::path& out, std::span<const fs::path> inputs) {
  CommandOutput res;
  const fs::path src = inputs.empty() ? out / "thermometry_scan.tsv" : inputs.front();
  const Table t = read_table(src);
  const auto T = t.numbers("T_MXC");
  const auto w = t.numbers("width");
  const auto e = t.numbers("error");
  std::vector<ThermometryPoint> pts;
  for (std::size_t i = 0; i < T.size(); ++i) {
    pts.push_back({T[i], w[i], e[i]});
  }
  const ThermometryFit f = fit_thermometry(pts);
  const fs::path fit_dir = out / "fits";
  fs::create_directories(fit_dir);
  Table plot;
  plot.meta = {{"source", src.filename().string()}};
  plot.columns = {"T_MXC", "width", "error", "fit"};
  for (const auto& p : pts) {
    plot.rows.push_back({fmt(p.T_MXC), fmt(p.width), fmt(p.error), fmt(thermometry_width(f.law, p.T_MXC))});
  }
  json rep = {{"source", src.filename().string()},
              {"T_eff", f.law.T_eff},
              {"T_eff_error", f.T_eff_error},
              {"alpha_QQ", f.law.alpha_QQ},
              {"alpha_error", f.alpha_error},
              {"chi2", f.chi2},
              {"dof", f.dof},
              {"flags", f.flags},
              {"truth_T_eff", cfg.device.thermometry.T_eff},
              {"truth_alpha_QQ", cfg.device.thermometry.alpha_QQ}};
  write_json(fit_dir / "thermometry.json", rep);
  write_table(fit_dir / "thermometry.tsv", plot);
  res.files = {fit_dir / "thermometry.json", fit_dir / "thermometry.tsv"};
  std::ostringstream line;
  line << "T_eff = " << f.law.T_eff * 1e3 << " +/- " << f.T_eff_error * 1e3 << " mK, alpha_QQ = " << f.law.alpha_QQ
       << " +/- " << f.alpha_error;
  res.summary = line.str() + "\n";
  if (!f.flags.empty()) {
    res.exit_code = exit_code::fit_diagnostic;
    for (const auto& fl : f.flags) {
      res.summary += "flag: " + fl + "\n";
    }
  }
  return res;
}

CommandOutput fit_visibility(const ExperimentConfig& cfg, const fs::path& out, std::span<const fs::path> inputs) {
  CommandOutput res;
  std::vector<fs::path> reports(inputs.begin(), inputs.end());
  if (reports.empty()) {
    for (const auto& p : list_files(out / "fits", ".json", "mixture_")) {
      reports.push_back(p);
    }
  }
  std::vector<MixtureFit> fits;
  for (const auto& p : reports) {
    const json j = read_json(p);
    if (!j.contains("params") || j.value("status", "") == "failed") {
      continue;
    }
    MixtureFit f;
    f.r = j.at("r").get<double>();
    std::array<double, 5> v{};
    for (std::size_t i = 0; i < MixtureParams::size; ++i) {
      v[i] = j.at("params").at(MixtureParams::names[i]).at("value").get<double>();
    }
    f.params = MixtureParams::from(v);
    fits.push_back(f);
  }
  ReadModel base = fits.empty() ? cfg.device.read_model(0.0) : average_model(fits);
  double g = cfg.device.g;
  std::string g_source = "config";
  if (fs::exists(out / "fits" / "g_factor.json")) {
    g = read_json(out / "fits" / "g_factor.json").at("g").get<double>();
    g_source = "g_factor.json";
  }
  std::vector<double> fields = cfg.fit.visibility_fields;
  if (fields.empty()) {
    for (int i = 0; i <= 24; ++i) {
      fields.push_back(0.25 * i);
    }
  }
  const auto pts = predict_visibility_vs_field(base, g, fields);
  const fs::path fit_dir = out / "fits";
  fs::create_directories(fit_dir);
  Table plot;
  plot.meta = {{"g", fmt(g)}, {"g_source", g_source}, {"n_mixture_fits", std::to_string(fits.size())}};
  plot.columns = {"B", "E_Z", "t_star", "V_star"};
  json rows = json::array();
  for (const auto& p : pts) {
    plot.rows.push_back({fmt(p.B), fmt(p.E_Z), fmt(p.t_star), fmt(p.V_star)});
    rows.push_back({{"B", p.B}, {"E_Z", p.E_Z}, {"t_star", num(p.t_star)}, {"V_star", p.V_star}});
  }
  json rep = {{"g", g},
              {"g_source", g_source},
              {"n_mixture_fits", fits.size()},
              {"base", {{"gamma", base.gamma}, {"T_e", base.T_e}, {"r", base.r}, {"eps0_down", base.eps0_down}}},
              {"points", rows}};
  write_json(fit_dir / "visibility.json", rep);
  write_table(fit_dir / "visibility.tsv", plot);
  res.files = {fit_dir / "visibility.json", fit_dir / "visibility.tsv"};
  std::ostringstream line;
  line << "visibility predicted at " << pts.size() << " fields (g = " << g << " from " << g_source << ", "
       << fits.size() << " mixture fits)";
  res.summary = line.str() + "\n";
  return res;
}

CommandOutput fit_init(const ExperimentConfig&, const fs::path& out, std::span<const fs::path> inputs) {
  CommandOutput res;
  auto tables = load_tables(inputs, out / "classified", ".tsv");
  std::map<std::pair<std::string, double>, std::vector<std::pair<double, LabelCounts>>> groups;
  for (const auto& lt : tables) {
    const std::string method = lt.table.meta_value("method").value_or("static");
    groups[{method, lt.table.meta_number("B")}].push_back(
        {lt.table.meta_number("t_initial"), count_labels(lt.table)});
  }
  const fs::path fit_dir = out / "fits";
  fs::create_directories(fit_dir);
  Table plot;
  plot.columns = {"method", "B", "t_initial", "fraction", "error", "truth_fraction", "truth_error"};
  json rep = json::array();
  for (auto& [key, rows] : groups) {
    std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    json pts = json::array();
    for (const auto& [t_init, c] : rows) {
      const ScanRow r = scan_row(t_init, c);
      plot.rows.push_back({key.first, fmt(key.second), fmt(t_init), fmt(r.classified_fraction()),
                           fmt(r.classified_error()), fmt(r.truth_fraction()), fmt(r.truth_error())});
      pts.push_back({{"t_initial", t_init},
                     {"fraction", r.classified_fraction()},
                     {"error", r.classified_error()},
                     {"truth_fraction", r.truth_fraction()}});
    }
    const ScanRow first = scan_row(rows.front().first, rows.front().second);
    const ScanRow last = scan_row(rows.back().first, rows.back().second);
    rep.push_back({{"method", key.first},
                   {"B", key.second},
                   {"points", pts},
                   {"truth_drop", first.truth_fraction() - last.truth_fraction()},
                   {"classified_drop", first.classified_fraction() - last.classified_fraction()}});
    std::ostringstream line;
    line << "init " << key.first << " B=" << key.second << " T: up fraction " << first.classified_fraction() << " -> "
         << last.classified_fraction() << " (truth " << first.truth_fraction() << " -> " << last.truth_fraction()
         << ")";
    res.summary += line.str() + "\n";
  }
  write_json(fit_dir / "init.json", json{{"groups", rep}});
  write_table(fit_dir / "init.tsv", plot);
  res.files = {fit_dir / "init.json", fit_dir / "init.tsv"};
  return res;
}

// ---------------------------------------------------------------------------
// Selfcheck

struct Check {
  std::string name;
  bool ok;
};

std::vector<Check> run_selfchecks() {
  std::vector<Check> checks;
  const ReadModel m{10036.723, 0.84, 0.36809, -0.447467977e-3, zeeman_energy(2.09, 2.5)};
  {
    bool ok = true;
    double prev = 0.0;
    for (int i = 0; i <= 300; ++i) {
      const double c = tunnel_out_cdf(m, Spin::down, 1e-5 * i);
      ok = ok && c >= prev && c <= 1.0;
      prev = c;
    }
    checks.push_back({"cdf monotone and bounded", ok});
  }
  {
    bool ok = true;
    for (double u : {1e-6, 0.1, 0.5, 0.9, 0.999999}) {
      const double t = sample_tunnel_time(m, Spin::up, u);
      ok = ok && std::abs(tunnel_out_cdf(m, Spin::up, t) - u) < 1e-9;
    }
    checks.push_back({"sampler inverts cdf", ok});
  }
  {
    const Threshold th = optimal_threshold(m);
    checks.push_back({"visibility maximum in (0, 1]", th.V_star > 0.0 && th.V_star <= 1.0 && th.t_star > 0.0});
  }
  {
    const double sep = peak_time(m, Spin::down).stationary - peak_time(m, Spin::up).stationary;
    checks.push_back({"peak separation equals E_Z / r", std::abs(sep - m.E_Z / m.r) < 1e-12});
  }
  {
    std::vector<double> y(200, 0.0);
    std::fill(y.begin() + 80, y.begin() + 120, 1.0);
    for (std::size_t i = 0; i < y.size(); ++i) {
      y[i] += 0.01 * std::sin(0.7 * static_cast<double>(i));
    }
    const Segmentation s = segment_signal(y, 2.0);
    checks.push_back({"changepoints on a clean pulse",
                      s.segments.size() == 3 && s.segments[1].begin == 80 && s.segments[1].end == 120});
  }
  {
    BatchSetup setup;
    setup.model = m;
    setup.seq.t_empty = 1e-3;
    setup.seq.t_load = 1e-3;
    setup.seq.t_read = 3e-3;
    setup.seq.read_ramp = RampSpec{{-2.05e-3, 0.505e-3}, 3e-3};
    setup.options.field_B = 2.5;
    TraceBatch batch;
    batch.header = BatchHeader::from(setup, 2.09, 7, 0);
    batch.shots = simulate_batch(3, setup, 7);
    std::stringstream ss;
    write_trace_batch(ss, batch);
    const TraceBatch back = read_trace_batch(ss);
    bool ok = back.shots.size() == 3;
    for (std::size_t i = 0; ok && i < 3; ++i) {
      ok = back.shots[i].samples == batch.shots[i].samples && back.shots[i].seed == batch.shots[i].seed;
    }
    const auto again = simulate_batch(3, setup, 7);
    ok = ok && again[2].samples == batch.shots[2].samples;
    checks.push_back({"trace round trip and reproducibility", ok});
  }
  return checks;
}

CommandOutput report(const fs::path& out) {
  CommandOutput res;
  const fs::path mpath = out / "manifest.json";
  const json m = fs::exists(mpath) ? read_json(mpath) : json::object();
  std::ostringstream os;
  if (!m.contains("stages") || m["stages"].empty()) {
    os << "no stages completed\n";
    res.summary = os.str();
    return res;
  }
  os << "rsm " << m.value("tool_version", "?") << ", config " << m.value("config_hash", "?") << "\n";
  for (const auto& [name, st] : m["stages"].items()) {
    os << "stage " << name << ": " << st["files"].size() << " files\n";
  }
  // Values are copied from the fit reports verbatim so the two agree exactly.
  const auto quantity = [&](const std::string& label, const json& value, const json& error, const json& truth,
                            std::string_view unit) {
    os << label << ": " << value.dump();
    if (!error.is_null()) {
      os << " +/- " << error.dump();
    }
    os << " " << unit;
    if (!truth.is_null()) {
      os << " (truth " << truth.dump() << ", delta " << format_double(json_number(value) - json_number(truth)) << ")";
    }
    os << "\n";
  };
  const auto field = [](const json& j, const char* key) { return j.contains(key) ? j[key] : json(nullptr); };
  const fs::path fit_dir = out / "fits";
  std::vector<std::string> gaps;
  for (const auto& p : list_files(fit_dir, ".json", "mixture_")) {
    const json j = read_json(p);
    if (j.contains("params")) {
      const auto& ez = j["params"]["E_Z"];
      quantity("E_Z at " + j["B"].dump() + " T [" + j.value("status", "?") + "]", ez["value"], ez["error"],
               field(ez, "truth"), "eV");
    } else {
      os << "E_Z at " << j["B"].dump() << " T: failed (" << j.value("diagnostic", "") << ")\n";
    }
  }
  if (fs::exists(fit_dir / "g_factor.json")) {
    const json j = read_json(fit_dir / "g_factor.json");
    quantity("g", j["g"], j["g_error"], field(j, "truth_g"), "");
    quantity("g intercept", j["intercept"], j["intercept_error"], json(nullptr),
             j.value("intercept_significant", false) ? "eV (significant)" : "eV");
  } else {
    gaps.emplace_back("g");
  }
  if (fs::exists(fit_dir / "t1.json")) {
    for (const auto& f : read_json(fit_dir / "t1.json")["fields"]) {
      if (f.contains("T1")) {
        quantity("T1 at " + f["B"].dump() + " T", f["T1"], f["T1_error"], field(f, "truth_T1"), "s");
      } else {
        os << "T1 at " << f["B"].dump() << " T: failed (" << f.value("diagnostic", "") << ")\n";
      }
    }
  } else {
    gaps.emplace_back("T1");
  }
  if (fs::exists(fit_dir / "t1_field.json")) {
    const json j = read_json(fit_dir / "t1_field.json");
    quantity("K_J", j["K_J"], j["K_J_error"], field(j, "truth_K_J"), "Hz/T^3");
    quantity("K_ph", j["K_ph"], j["K_ph_error"], field(j, "truth_K_ph"), "Hz/T^7");
  } else {
    gaps.emplace_back("relaxation law");
  }
  if (fs::exists(fit_dir / "thermometry.json")) {
    const json j = read_json(fit_dir / "thermometry.json");
    quantity("T_eff", j["T_eff"], j["T_eff_error"], field(j, "truth_T_eff"), "K");
    quantity("alpha_QQ", j["alpha_QQ"], j["alpha_error"], field(j, "truth_alpha_QQ"), "");
  } else {
    gaps.emplace_back("thermometry");
  }
  if (fs::exists(fit_dir / "visibility.json")) {
    const json j = read_json(fit_dir / "visibility.json");
    os << "visibility (g = " << j["g"].dump() << " from " << j.value("g_source", "?") << ")\n";
    os << "  B\tt_star\tV_star\n";
    for (const auto& p : j["points"]) {
      os << "  " << p["B"].dump() << "\t" << p["t_star"].dump() << "\t" << p["V_star"].dump() << "\n";
    }
  } else {
    gaps.emplace_back("visibility");
  }
  if (fs::exists(fit_dir / "init.json")) {
    for (const auto& g : read_json(fit_dir / "init.json")["groups"]) {
      os << "initialization (" << g["method"].get<std::string>() << ", " << g["B"].dump()
         << " T): up fraction drop " << g["classified_drop"].dump() << " (truth " << g["truth_drop"].dump() << ")\n";
    }
  }
  if (!gaps.empty()) {
    os << "not available:";
    for (const auto& g : gaps) {
      os << " " << g << ";";
    }
    os << "\n";
  }
  res.summary = os.str();
  write_text(out / "report.txt", res.summary);
  res.files.push_back(out / "report.txt");
  return res;
}

} // namespace

ExperimentConfig resolve_config(const CommonOptions& opts) {
  std::vector<std::string> overrides = opts.overrides;
  if (opts.seed) {
    overrides.push_back("seed=" + std::to_string(*opts.seed));
  }
  return load_config(opts.config, overrides);
}

fs::path resolve_output_dir(const CommonOptions& opts, const ExperimentConfig& cfg) {
  return opts.out ? *opts.out : fs::path(cfg.output_dir);
}

CommandOutput cmd_simulate(const ExperimentConfig& cfg, const fs::path& out) {
  const auto t0 = std::chrono::steady_clock::now();
  CommandOutput res;
  const fs::path trace_dir = out / "traces";
  fs::create_directories(trace_dir);
  const std::vector<double> loads = cfg.sweep.t_loads.empty() ? std::vector<double>{cfg.device.t_load} : cfg.sweep.t_loads;
  const std::vector<double> inits = cfg.sweep.t_initials.empty() ? std::vector<double>{0.0} : cfg.sweep.t_initials;
  std::uint64_t batch_no = 0;
  for (std::size_t f = 0; f < cfg.sweep.fields.size(); ++f) {
    for (std::size_t l = 0; l < loads.size(); ++l) {
      for (std::size_t i = 0; i < inits.size(); ++i, ++batch_no) {
        const double B = cfg.sweep.fields[f];
        const BatchSetup setup = cfg.batch_setup(B, loads[l], inits[i]);
        const std::uint64_t base = derive_seed(cfg.seed, 1 + batch_no, 0);
        TraceBatch batch;
        batch.header = BatchHeader::from(setup, cfg.device.g, base, 0);
        batch.shots = simulate_batch(cfg.sweep.shots, setup, base);
        const fs::path p = trace_dir / ("batch_f" + two_digits(f) + "_l" + two_digits(l) + "_i" + two_digits(i) + ".rsmt");
        write_trace_batch(p, batch);
        res.files.push_back(p);
      }
    }
  }
  res.summary = std::to_string(batch_no) + " batches of " + std::to_string(cfg.sweep.shots) + " shots\n";

  if (!cfg.sweep.T_mxc.empty()) {
    Rng rng(derive_seed(cfg.seed, 0x7e, 0));
    Table t;
    t.meta = {{"T_eff", fmt(cfg.device.thermometry.T_eff)}, {"alpha_QQ", fmt(cfg.device.thermometry.alpha_QQ)}};
    t.columns = {"T_MXC", "width", "error"};
    for (double T : cfg.sweep.T_mxc) {
      const double w = thermometry_width(cfg.device.thermometry, T);
      const double sigma = cfg.sweep.width_noise * w;
      t.rows.push_back({fmt(T), fmt(w + sigma * rng.normal()), fmt(sigma)});
    }
    write_table(out / "thermometry_scan.tsv", t);
    res.files.push_back(out / "thermometry_scan.tsv");
    res.summary += "thermometry scan with " + std::to_string(cfg.sweep.T_mxc.size()) + " points\n";
  }
  if (!cfg.sweep.rate_fields.empty()) {
    Rng rng(derive_seed(cfg.seed, 0x7a, 0));
    Table t;
    t.meta = {{"K_J", fmt(cfg.device.relaxation.K_J)}, {"K_ph", fmt(cfg.device.relaxation.K_ph)}};
    t.columns = {"B", "rate", "error"};
    for (double B : cfg.sweep.rate_fields) {
      const double rate = relaxation_rate(cfg.device.relaxation, B);
      const double sigma = cfg.sweep.rate_noise * rate;
      t.rows.push_back({fmt(B), fmt(rate + sigma * rng.normal()), fmt(sigma)});
    }
    write_table(out / "rate_scan.tsv", t);
    res.files.push_back(out / "rate_scan.tsv");
    res.summary += "relaxation-rate scan with " + std::to_string(cfg.sweep.rate_fields.size()) + " points\n";
  }
  record_stage(out, cfg, "simulate", res.files, seconds_since(t0));
  return res;
}

CommandOutput cmd_classify(const ExperimentConfig& cfg, const fs::path& out, Method method,
                           std::span<const fs::path> inputs) {
  const auto t0 = std::chrono::steady_clock::now();
  CommandOutput res;
  std::vector<fs::path> paths(inputs.begin(), inputs.end());
  if (paths.empty()) {
    paths = list_files(out / "traces", ".rsmt");
  }
  if (paths.empty()) {
    throw SchemaError("classify: no trace batches found in " + (out / "traces").string());
  }
  const fs::path dir = out / "classified";
  fs::create_directories(dir);
  const std::string mname(to_string(method));
  for (const auto& p : paths) {
    const TraceBatch batch = read_trace_batch(p);
    const BatchHeader& h = batch.header;
    double v = 0.5 * (h.sensor.level_occupied + h.sensor.level_empty);
    if (cfg.classify.v_threshold) {
      v = *cfg.classify.v_threshold;
    } else if (!batch.shots.empty()) {
      v = estimate_levels(batch.shots).midpoint();
    }
    Table t;
    t.meta = {{"method", mname},
              {"source", p.filename().string()},
              {"B", fmt(h.field_B)},
              {"g", fmt(h.g)},
              {"t_load", fmt(h.t_load)},
              {"t_initial", fmt(h.t_initial)},
              {"t_read", fmt(h.t_read)},
              {"T1", fmt(h.T1)},
              {"model_gamma", fmt(h.model.gamma)},
              {"model_T_e", fmt(h.model.T_e)},
              {"model_r", fmt(h.model.r)},
              {"model_eps0_down", fmt(h.model.eps0_down)},
              {"model_E_Z", fmt(h.model.E_Z)},
              {"v_threshold", fmt(v)}};
    ShotClassifier classify;
    if (method == Method::static_threshold) {
      ThresholdConfig tc;
      tc.v_threshold = v;
      tc.filter_window = cfg.classify.filter_window;
      if (cfg.classify.t_threshold) {
        tc.t_threshold = *cfg.classify.t_threshold;
      } else if (h.model.E_Z > 0.0) {
        tc.t_threshold = optimal_threshold(h.model).t_star;
      } else {
        throw SchemaError(p.string() + ": no spin discrimination at B = 0; set classify.t_threshold");
      }
      t.meta.emplace_back("t_threshold", fmt(tc.t_threshold));
      classify = [tc](const ShotTrace& s) { return classify_static(s, tc); };
    } else {
      const FinalExitConfig fc = cfg.final_exit_config(h.model.r, v);
      fc.validate();
      t.meta.emplace_back("penalty", fmt(fc.penalty));
      t.meta.emplace_back("exclusion_time", fmt(fc.exclusion_time()));
      classify = [fc](const ShotTrace& s) { return classify_final_exit_referenced(s, fc); };
    }
    t.columns = {"index", "seed", "t_out", "t_final_exit", "label", "truth_spin", "truth_t_out"};
    std::size_t censored = 0;
    std::size_t undetermined = 0;
    std::size_t up = 0;
    std::size_t agree = 0;
    for (const ShotTrace& s : batch.shots) {
      const ClassifiedShot c = classify(s);
      const ShotTruth& tr = s.truth;
      std::optional<double> truth_out = tr.t_up_out ? tr.t_up_out : tr.t_down_out;
      censored += c.censored;
      undetermined += c.label == Label::undetermined;
      up += c.label == Label::up;
      agree += c.label != Label::undetermined && (c.label == Label::up) == (tr.initial_spin == Spin::up);
      t.rows.push_back({std::to_string(s.index), hex64(s.seed), opt_fmt(c.t_out), opt_fmt(c.t_final_exit),
                        std::string(to_string(c.label)), spin_text(tr.initial_spin), opt_fmt(truth_out)});
    }
    const std::size_t determined = batch.shots.size() - undetermined;
    t.footer = {{"shots", std::to_string(batch.shots.size())},
                {"censored", std::to_string(censored)},
                {"undetermined", std::to_string(undetermined)},
                {"up", std::to_string(up)},
                {"agreement", fmt(determined ? static_cast<double>(agree) / static_cast<double>(determined) : 0.0)}};
    const fs::path outp = dir / (stem_of(p) + "." + mname + ".tsv");
    write_table(outp, t);
    res.files.push_back(outp);
    std::ostringstream line;
    line << stem_of(p) << ": " << up << " up, " << undetermined << " undetermined of " << batch.shots.size()
         << " (agreement with truth " << (determined ? static_cast<double>(agree) / static_cast<double>(determined) : 0.0)
         << ")";
    res.summary += line.str() + "\n";
  }
  record_stage(out, cfg, "classify_" + mname, res.files, seconds_since(t0));
  return res;
}

CommandOutput cmd_fit(const ExperimentConfig& cfg, const fs::path& out, std::string_view family,
                      std::span<const fs::path> inputs) {
  const auto t0 = std::chrono::steady_clock::now();
  CommandOutput res;
  if (family == "mixture") {
    bool diag = false;
    fit_mixtures(cfg, out, inputs, res.files, res.summary, diag);
    res.exit_code = diag ? exit_code::fit_diagnostic : exit_code::ok;
  } else if (family == "g") {
    res = fit_g(cfg, out, inputs);
  } else if (family == "t1") {
    res = fit_t1(cfg, out, inputs);
  } else if (family == "t1-field") {
    res = fit_t1_field(cfg, out, inputs);
  } else if (family == "thermometry") {
    res = fit_thermo(cfg, out, inputs);
  } else if (family == "visibility") {
    res = fit_visibility(cfg, out, inputs);
  } else if (family == "init") {
    res = fit_init(cfg, out, inputs);
  } else {
    throw ConfigError("fit: unknown family '" + std::string(family) +
                      "' (expected mixture, g, t1, t1-field, thermometry, visibility or init)");
  }
  record_stage(out, cfg, "fit_" + std::string(family), res.files, seconds_since(t0));
  return res;
}

CommandOutput cmd_report(const fs::path& out) { return report(out); }

CommandOutput cmd_selfcheck() {
  CommandOutput res;
  for (const Check& c : run_selfchecks()) {
    res.summary += (c.ok ? "ok    " : "FAIL  ") + c.name + "\n";
    if (!c.ok) {
      res.exit_code = exit_code::validation;
    }
  }
  return res;
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Ramped spin-readout simulation and analysis"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kToolVersion));

  CommonOptions common;
  std::string config_path;
  std::string out_path;
  std::uint64_t seed = 0;
  const auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", config_path, "JSON configuration file")->check(CLI::ExistingFile);
    sub->add_option("-o,--override", common.overrides, "dotted key=value, e.g. sweep.shots=500");
    sub->add_option("-s,--seed", seed, "base seed (overrides the config)");
    sub->add_option("--out", out_path, "output directory (overrides the config)");
  };

  auto* simulate = app.add_subcommand("simulate", "generate single-shot trace batches");
  add_common(simulate);

  std::string method_name = "static";
  std::vector<std::string> inputs;
  auto* classify = app.add_subcommand("classify", "classify traces as spin up or down");
  add_common(classify);
  classify->add_option("-m,--method", method_name, "static or final-exit")
      ->check(CLI::IsMember({"static", "final-exit"}));
  classify->add_option("inputs", inputs, "trace batch files (default: all under <out>/traces)");

  std::string family;
  auto* fit = app.add_subcommand("fit", "run a fitting pipeline");
  add_common(fit);
  fit->add_option("family,--fit", family, "mixture, g, t1, t1-field, thermometry, visibility or init")->required();
  fit->add_option("inputs", inputs, "input tables or reports");

  auto* rep = app.add_subcommand("report", "summarize completed stages");
  add_common(rep);

  app.add_subcommand("selfcheck", "run fast invariant checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? exit_code::ok : exit_code::validation;
  }

  try {
    if (app.got_subcommand("selfcheck")) {
      const CommandOutput r = cmd_selfcheck();
      out << r.summary;
      return r.exit_code;
    }
    if (!config_path.empty()) {
      common.config = config_path;
    }
    if (!out_path.empty()) {
      common.out = out_path;
    }
    for (auto* sub : {simulate, classify, fit, rep}) {
      if (sub->parsed() && sub->count("--seed") > 0) {
        common.seed = seed;
      }
    }
    const ExperimentConfig cfg = resolve_config(common);
    const fs::path out_dir = resolve_output_dir(common, cfg);
    std::vector<fs::path> in_paths(inputs.begin(), inputs.end());
    CommandOutput r;
    if (simulate->parsed()) {
      r = cmd_simulate(cfg, out_dir);
    } else if (classify->parsed()) {
      r = cmd_classify(cfg, out_dir, method_name == "final-exit" ? Method::final_exit : Method::static_threshold,
                       in_paths);
    } else if (fit->parsed()) {
      r = cmd_fit(cfg, out_dir, family, in_paths);
    } else {
      r = cmd_report(out_dir);
    }
    out << r.summary;
    return r.exit_code;
  } catch (const FitDiagnostic& e) {
    err << "fit diagnostic: " << e.what() << "\n";
    return exit_code::fit_diagnostic;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << "\n";
    return exit_code::io;
  } catch (const fs::filesystem_error& e) {
    err << "i/o error: " << e.what() << "\n";
    return exit_code::io;
  } catch (const std::invalid_argument& e) {
    err << "invalid input: " << e.what() << "\n";
    return exit_code::validation;
  } catch (const std::domain_error& e) {
    err << "invalid input: " << e.what() << "\n";
    return exit_code::validation;
  } catch (const nlohmann::json::exception& e) {
    err << "invalid input: " << e.what() << "\n";
    return exit_code::validation;
  }
}

} // namespace rsm
