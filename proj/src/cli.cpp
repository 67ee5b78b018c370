#include "cbpsdid/cli.hpp"

#include "cbpsdid/estimators.hpp"
#include "cbpsdid/panel.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <charconv>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <thread>

namespace cbpsdid::cli {

namespace {

using json = nlohmann::ordered_json;

#ifndef CBPSDID_VERSION
#define CBPSDID_VERSION "0.0.0"
#endif
#ifndef CBPSDID_DATA_DIR
#define CBPSDID_DATA_DIR "data"
#endif

std::string num(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string fixed(double v, int digits) {
  if (std::isnan(v)) return "nan";
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::IoError, "cannot open '" + path + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::IoError, "cannot write '" + path + "'");
  out << content;
  if (!out) throw Error(ErrorKind::IoError, "write failed for '" + path + "'");
}

json manifest_base(const std::string& command) {
  json m;
  m["tool"] = "cbpsdid";
  m["version"] = CBPSDID_VERSION;
  m["command"] = command;
  m["started_utc"] = utc_now();
  return m;
}

json constants_json(const std::string& path, const StandardizationConstants& c) {
  return json{{"path", path},
              {"checksum", checksum(format_constants(c))},
              {"seed", c.seed},
              {"draws", c.draws}};
}

unsigned default_threads() { return std::max(1u, std::thread::hardware_concurrency()); }

// ---------------------------------------------------------------------------
// estimate

struct EstimateOptions {
  std::string data;
  std::string spec;
  std::string method = "all";
  ColumnMap columns;
  std::string out;
};

json fit_json(const AttResult& r) {
  json j;
  j["method"] = std::string(to_string(r.method));
  j["tau"] = r.tau;
  j["se"] = r.se;
  j["asy_var"] = r.asy_var;
  j["ci_low"] = r.ci_low;
  j["ci_high"] = r.ci_high;
  if (r.sandwich_var) j["sandwich_asy_var"] = *r.sandwich_var;
  if (r.propensity) {
    const auto& p = *r.propensity;
    j["propensity"] = {{"method", std::string(to_string(p.method))},
                       {"beta", std::vector<double>(p.beta.data(), p.beta.data() + p.beta.size())},
                       {"converged", p.converged},
                       {"iterations", p.iterations},
                       {"residual_norm", p.residual_norm},
                       {"scale", p.scale},
                       {"clamp_active", p.clamp_active}};
  }
  if (r.outcome) {
    const auto& o = *r.outcome;
    j["outcome"] = {{"kind", std::string(to_string(o.kind))},
                    {"gamma", std::vector<double>(o.gamma.data(), o.gamma.data() + o.gamma.size())},
                    {"residual_norm", o.residual_norm}};
  }
  return j;
}

int cmd_estimate(const EstimateOptions& opt, std::ostream& out, std::ostream& err) {
  json manifest = manifest_base("estimate");
  manifest["parameters"] = {{"data", opt.data},
                            {"spec", opt.spec},
                            {"method", opt.method},
                            {"y0", opt.columns.y0},
                            {"y1", opt.columns.y1},
                            {"d", opt.columns.d},
                            {"out", opt.out}};

  std::vector<Method> methods;
  if (opt.method == "all") {
    methods.assign(std::begin(kAllMethods), std::end(kAllMethods));
  } else if (auto m = parse_method(opt.method)) {
    methods.push_back(*m);
  } else {
    throw Error(ErrorKind::InvalidArgument, "unknown method '" + opt.method + "'");
  }

  const PanelDataset ds = load_csv(opt.data, opt.columns);
  const CovariateSpec spec = opt.spec.empty() ? CovariateSpec() : CovariateSpec::load(opt.spec);
  const DesignMatrix x = build_design(ds, spec);
  const Eigen::VectorXd dy = ds.delta_y();
  require_two_groups(ds.d(), ds.n());

  out << "data: " << opt.data << " (n = " << ds.n() << ", treated = " << ds.n_treated()
      << ", controls = " << ds.n_control() << ")\n";
  out << "outcome change: " << opt.columns.y1 << " - " << opt.columns.y0 << "\n";
  out << "design (" << x.k() << " columns):";
  for (const auto& name : x.column_names()) out << ' ' << name;
  out << "\n\n";
  out << std::left << std::setw(6) << "method" << std::right << std::setw(14) << "tau"
      << std::setw(14) << "se" << std::setw(14) << "ci_low" << std::setw(14) << "ci_high" << "\n";

  std::ostringstream csv;
  csv << "method,status,tau,se,asy_var,ci_low,ci_high,n,n_treated\n";
  json results = json::array();
  std::ostringstream diag;
  int code = kExitOk;

  for (Method m : methods) {
    const std::string label(to_string(m));
    try {
      const AttResult r = estimate(m, x, dy, ds.d());
      out << std::left << std::setw(6) << label << std::right << std::setw(14) << fixed(r.tau, 4)
          << std::setw(14) << fixed(r.se, 4) << std::setw(14) << fixed(r.ci_low, 4) << std::setw(14)
          << fixed(r.ci_high, 4) << "\n";
      csv << label << ",ok," << num(r.tau) << ',' << num(r.se) << ',' << num(r.asy_var) << ','
          << num(r.ci_low) << ',' << num(r.ci_high) << ',' << ds.n() << ',' << ds.n_treated() << "\n";
      json j = fit_json(r);
      if (r.propensity) {
        const auto& p = *r.propensity;
        const OverlapReport ov = overlap_report(fitted_propensity(x, p.beta), ds.d());
        j["overlap"] = {{"min_propensity", ov.min_propensity},
                        {"max_propensity", ov.max_propensity},
                        {"extreme_controls", ov.extreme_controls},
                        {"max_odds_weight", ov.max_odds_weight}};
        diag << label << ": propensity " << to_string(p.method) << ", converged after "
             << p.iterations << " iterations, max |estimating eq| = " << p.residual_norm
             << (p.clamp_active ? " (link clamp active)" : "") << "\n";
        diag << "      overlap: propensity in [" << ov.min_propensity << ", " << ov.max_propensity
             << "], controls above " << kExtremePropensity << ": " << ov.extreme_controls
             << ", max odds weight " << ov.max_odds_weight << "\n";
      }
      if (r.outcome) {
        diag << label << ": outcome " << to_string(r.outcome->kind)
             << ", normal-equation residual " << r.outcome->residual_norm << "\n";
      }
      if (r.sandwich_var) {
        diag << label << ": sandwich asy. variance " << *r.sandwich_var << " (reported: plug-in "
             << r.asy_var << ")\n";
      }
      results.push_back(std::move(j));
    } catch (const Error& e) {
      out << std::left << std::setw(6) << label << "  failed: " << e.what() << "\n";
      csv << label << ',' << to_string(e.kind()) << ",,,,,," << ds.n() << ',' << ds.n_treated()
          << "\n";
      results.push_back(json{{"method", label}, {"error", std::string(to_string(e.kind()))},
                             {"message", e.what()}});
      err << "error: " << label << ": " << e.what() << "\n";
      if (code == kExitOk) code = exit_code(e.kind());
    }
  }
  out << "\n" << diag.str();

  if (!opt.out.empty()) {
    manifest["finished_utc"] = utc_now();
    manifest["outputs"] = {opt.out + ".csv", opt.out + ".json"};
    write_file(opt.out + ".csv", csv.str());
    json doc;
    doc["n"] = ds.n();
    doc["n_treated"] = ds.n_treated();
    doc["design"] = x.column_names();
    doc["results"] = results;
    doc["manifest"] = manifest;
    write_file(opt.out + ".json", doc.dump(2) + "\n");
    write_file(opt.out + ".manifest.json", manifest.dump(2) + "\n");
  }
  return code;
}

// ---------------------------------------------------------------------------
// simulate / replay

struct SimulateOptions {
  int dgp = 1;
  Eigen::Index n = 1000;
  std::size_t reps = 1000;
  std::uint64_t seed = 1;
  std::string out;
  unsigned threads = 0;
  std::string constants;
  std::uint64_t bound_draws = 1'000'000;
  std::string z4 = "x1";
};

Z4Source z4_source(const std::string& text) {
  if (auto s = parse_z4_source(text)) return *s;
  throw Error(ErrorKind::InvalidArgument, "--z4 must be x1 or x2, got '" + text + "'");
}

DgpConfig make_config(int dgp, Eigen::Index n, const std::string& z4) {
  DgpConfig cfg = DgpConfig::make(dgp, n);
  cfg.z4 = z4_source(z4);
  return cfg;
}

json simulate_parameters(const SimulateOptions& o) {
  return json{{"dgp", o.dgp},
              {"n", o.n},
              {"reps", o.reps},
              {"seed", o.seed},
              {"bound_draws", o.bound_draws},
              {"z4", o.z4},
              {"out", o.out}};
}

int cmd_simulate(SimulateOptions opt, std::ostream& out, const std::string& command,
                 const std::optional<std::string>& expected_checksum = std::nullopt) {
  json manifest = manifest_base(command);
  if (opt.constants.empty()) opt.constants = default_constants_path();
  const StandardizationConstants consts = load_or_create_constants(opt.constants);
  if (expected_checksum && checksum(format_constants(consts)) != *expected_checksum) {
    throw Error(ErrorKind::InvalidArgument,
                "constants file '" + opt.constants + "' differs from the one in the manifest");
  }
  const DgpConfig cfg = make_config(opt.dgp, opt.n, opt.z4);
  const unsigned threads = opt.threads == 0 ? default_threads() : opt.threads;

  const std::vector<Method> methods(std::begin(kAllMethods), std::end(kAllMethods));
  const StudyReport report = run_study(cfg, consts, opt.reps, opt.seed, methods, threads);
  std::optional<BoundEstimate> bound;
  if (opt.bound_draws > 0) bound = efficiency_bound(cfg, consts, opt.bound_draws, opt.seed);

  out << study_table(report, bound);

  if (!opt.out.empty()) {
    write_file(opt.out, study_csv(report, bound));
    manifest["parameters"] = simulate_parameters(opt);
    manifest["parameters"]["threads"] = threads;
    manifest["seeds"] = {{"study", opt.seed}, {"bound", opt.seed}};
    manifest["constants"] = constants_json(opt.constants, consts);
    manifest["outputs"] = {opt.out};
    manifest["finished_utc"] = utc_now();
    write_file(opt.out + ".manifest.json", manifest.dump(2) + "\n");
  }
  return kExitOk;
}

int cmd_replay(const std::string& manifest_path, const std::string& out_override,
               const std::string& constants_override, std::ostream& out) {
  json m;
  try {
    m = json::parse(read_file(manifest_path));
  } catch (const json::exception& e) {
    throw Error(ErrorKind::ParseError, manifest_path + ": " + e.what());
  }
  if (m.value("command", "") != "simulate" && m.value("command", "") != "replay") {
    throw Error(ErrorKind::InvalidArgument, "only simulate manifests can be replayed");
  }
  try {
    const auto& p = m.at("parameters");
    SimulateOptions o;
    o.dgp = p.at("dgp").get<int>();
    o.n = p.at("n").get<Eigen::Index>();
    o.reps = p.at("reps").get<std::size_t>();
    o.seed = p.at("seed").get<std::uint64_t>();
    o.bound_draws = p.at("bound_draws").get<std::uint64_t>();
    o.z4 = p.value("z4", std::string("x1"));
    o.out = out_override.empty() ? p.value("out", std::string()) : out_override;
    o.constants = constants_override.empty() ? m.at("constants").at("path").get<std::string>()
                                             : constants_override;
    const std::string expected = m.at("constants").at("checksum").get<std::string>();
    return cmd_simulate(o, out, "replay", expected);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::ParseError, manifest_path + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------

int cmd_bound(int dgp, Eigen::Index n, std::uint64_t draws, std::uint64_t seed,
              std::string constants, const std::string& z4, std::ostream& out) {
  if (constants.empty()) constants = default_constants_path();
  const StandardizationConstants consts = load_or_create_constants(constants);
  const DgpConfig cfg = make_config(dgp, n, z4);
  const BoundEstimate b = efficiency_bound(cfg, consts, draws, seed);
  out << "DGP" << dgp << " semiparametric efficiency bound: " << fixed(b.value, 4)
      << "  (MC s.e. " << fixed(b.std_error, 4) << ", draws = " << b.draws << ", seed = " << seed
      << ")\n";
  return kExitOk;
}

int cmd_constants(std::uint64_t draws, std::uint64_t seed, const std::string& path, std::ostream& out) {
  const StandardizationConstants c = compute_standardization(draws, seed);
  const std::string text = format_constants(c);
  if (path.empty()) {
    out << text;
  } else {
    write_file(path, text);
    out << "wrote " << path << " (checksum " << checksum(text) << ")\n";
  }
  return kExitOk;
}

int cmd_draw(int dgp, Eigen::Index n, std::uint64_t seed, std::uint64_t rep, std::string constants,
             const std::string& z4, const std::string& path, std::ostream& out) {
  if (constants.empty()) constants = default_constants_path();
  const StandardizationConstants consts = load_or_create_constants(constants);
  auto rng = replication_stream(seed, rep);
  const Replication r = draw_replication(make_config(dgp, n, z4), consts, rng);
  if (path.empty()) {
    write_csv(out, r.dataset);
  } else {
    write_csv(std::filesystem::path(path), r.dataset);
    out << "wrote " << path << " (n = " << r.dataset.n() << ", treated = " << r.dataset.n_treated()
        << ")\n";
  }
  return kExitOk;
}

int cmd_echo(const std::string& data, const ColumnMap& columns, const std::string& path,
             std::ostream& out) {
  const PanelDataset ds = load_csv(data, columns);
  if (path.empty()) {
    write_csv(out, ds, columns);
  } else {
    write_csv(std::filesystem::path(path), ds, columns);
  }
  return kExitOk;
}

}  // namespace

int exit_code(ErrorKind kind) {
  if (kind == ErrorKind::IoError) return kExitIo;
  return is_numerical(kind) ? kExitNumerical : kExitInput;
}

std::string checksum(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

std::string default_constants_path() {
  return std::string(CBPSDID_DATA_DIR) + "/standardization.txt";
}

StandardizationConstants load_or_create_constants(const std::string& path) {
  if (std::filesystem::exists(path)) return read_constants(path);
  const StandardizationConstants c =
      compute_standardization(kDefaultStandardizationDraws, kDefaultStandardizationSeed);
  write_constants(path, c);
  return c;
}

std::string study_csv(const StudyReport& report, const std::optional<BoundEstimate>& bound) {
  std::ostringstream os;
  os << "dgp,n,reps,seed,method,av_bias,med_bias,rmse,asy_v,cover,cil,successes,failures,"
        "efficiency_bound,bound_se\n";
  for (const auto& row : report.rows) {
    os << report.cfg.dgp << ',' << report.cfg.n << ',' << report.reps << ',' << report.seed << ','
       << to_string(row.method) << ',' << num(row.av_bias) << ',' << num(row.med_bias) << ','
       << num(row.rmse) << ',' << num(row.asy_v) << ',' << num(row.cover) << ',' << num(row.cil)
       << ',' << row.successes << ',' << row.failures << ','
       << (bound ? num(bound->value) : std::string()) << ','
       << (bound ? num(bound->std_error) : std::string()) << "\n";
  }
  return os.str();
}

std::string study_table(const StudyReport& report, const std::optional<BoundEstimate>& bound) {
  std::ostringstream os;
  os << "DGP" << report.cfg.dgp << "  n = " << report.cfg.n << ", reps = " << report.reps
     << ", seed = " << report.seed;
  if (report.cfg.dgp == 5) os << ", xi = " << report.cfg.xi << ", delta = " << report.cfg.delta;
  os << "\n";
  if (bound) os << "Semiparametric efficiency bound: " << fixed(bound->value, 3) << "\n";
  os << std::left << std::setw(8) << "" << std::right;
  for (const char* h : {"Av.Bias", "Med.Bias", "RMSE", "Asy.V", "Cover", "CIL"}) {
    os << std::setw(12) << h;
  }
  os << std::setw(8) << "Fail" << "\n";
  for (const auto& row : report.rows) {
    os << std::left << std::setw(8) << to_string(row.method) << std::right;
    for (double v : {row.av_bias, row.med_bias, row.rmse, row.asy_v, row.cover, row.cil}) {
      os << std::setw(12) << fixed(v, 3);
    }
    os << std::setw(8) << row.failures << "\n";
  }
  if (report.clamped_units > 0) {
    os << "(" << report.clamped_units << " unit propensities clamped to [1e-6, 1-1e-6])\n";
  }
  return os.str();
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Difference-in-differences ATT estimation (OR, IPW, AIPW, CBPS) and Monte Carlo studies"};
  app.require_subcommand(1);

  EstimateOptions est;
  auto* estimate = app.add_subcommand("estimate", "Estimate the ATT on a panel CSV file");
  estimate->add_option("--data", est.data, "CSV file with a header row")->required();
  estimate->add_option("--spec", est.spec, "Covariate spec file (default: intercept only)");
  estimate->add_option("--method", est.method, "or | ipw | aipw | cbps | all")->capture_default_str();
  estimate->add_option("--y0", est.columns.y0, "Pre-period outcome column")->capture_default_str();
  estimate->add_option("--y1", est.columns.y1, "Post-period outcome column")->capture_default_str();
  estimate->add_option("--d", est.columns.d, "Treatment column (0/1)")->capture_default_str();
  estimate->add_option("--out", est.out, "Write PREFIX.csv, PREFIX.json and PREFIX.manifest.json");

  SimulateOptions sim;
  auto* simulate = app.add_subcommand("simulate", "Run a Monte Carlo study for one design");
  simulate->add_option("--dgp", sim.dgp, "Design 1..5")->required()->check(CLI::Range(1, 5));
  simulate->add_option("--n", sim.n, "Units per replication")->capture_default_str()->check(CLI::Range(2, 100000000));
  simulate->add_option("--reps", sim.reps, "Replications")->capture_default_str()->check(CLI::PositiveNumber);
  simulate->add_option("--seed", sim.seed, "Study seed")->capture_default_str();
  simulate->add_option("--out", sim.out, "CSV output (manifest goes to OUT.manifest.json)");
  simulate->add_option("--threads", sim.threads, "Worker threads (default: all cores)");
  simulate->add_option("--constants", sim.constants, "Standardization constants file");
  simulate->add_option("--z4", sim.z4, "x1 | x2: normal paired with X4 in the fourth covariate")
      ->capture_default_str();
  simulate->add_option("--bound-draws", sim.bound_draws, "Oracle draws for the bound (0 = skip)")
      ->capture_default_str();

  int bound_dgp = 1;
  Eigen::Index bound_n = 1000;
  std::uint64_t bound_draws = 1'000'000, bound_seed = 1;
  std::string bound_constants, bound_z4 = "x1";
  auto* bound = app.add_subcommand("bound", "Monte Carlo semiparametric efficiency bound");
  bound->add_option("--dgp", bound_dgp, "Design 1..5")->required()->check(CLI::Range(1, 5));
  bound->add_option("--draws", bound_draws, "Oracle draws")->capture_default_str()->check(CLI::Range(2ull, 1'000'000'000ull));
  bound->add_option("--seed", bound_seed, "Seed")->capture_default_str();
  bound->add_option("--n", bound_n, "Sample size that sets xi = delta = n^-1/2 (DGP 5)")
      ->capture_default_str()->check(CLI::Range(2, 100000000));
  bound->add_option("--constants", bound_constants, "Standardization constants file");
  bound->add_option("--z4", bound_z4, "x1 | x2")->capture_default_str();

  std::uint64_t const_draws = kDefaultStandardizationDraws, const_seed = kDefaultStandardizationSeed;
  std::string const_out;
  auto* constants = app.add_subcommand("constants", "Estimate the covariate standardization constants");
  constants->add_option("--draws", const_draws, "Monte Carlo draws (>= 10^6)")->capture_default_str();
  constants->add_option("--seed", const_seed, "Seed")->capture_default_str();
  constants->add_option("--out", const_out, "Output file (default: stdout)");

  int draw_dgp = 1;
  Eigen::Index draw_n = 1000;
  std::uint64_t draw_seed = 1, draw_rep = 0;
  std::string draw_out, draw_constants, draw_z4 = "x1";
  auto* draw = app.add_subcommand("draw", "Write one simulated replication as CSV");
  draw->add_option("--dgp", draw_dgp, "Design 1..5")->required()->check(CLI::Range(1, 5));
  draw->add_option("--n", draw_n, "Units")->capture_default_str()->check(CLI::Range(2, 100000000));
  draw->add_option("--seed", draw_seed, "Study seed")->capture_default_str();
  draw->add_option("--rep", draw_rep, "Replication index")->capture_default_str();
  draw->add_option("--out", draw_out, "Output CSV (default: stdout)");
  draw->add_option("--constants", draw_constants, "Standardization constants file");
  draw->add_option("--z4", draw_z4, "x1 | x2")->capture_default_str();

  std::string echo_data, echo_out;
  ColumnMap echo_columns;
  auto* echo = app.add_subcommand("echo", "Validate a panel CSV and write it back out");
  echo->add_option("--data", echo_data, "CSV file")->required();
  echo->add_option("--y0", echo_columns.y0)->capture_default_str();
  echo->add_option("--y1", echo_columns.y1)->capture_default_str();
  echo->add_option("--d", echo_columns.d)->capture_default_str();
  echo->add_option("--out", echo_out, "Output CSV (default: stdout)");

  std::string replay_manifest, replay_out, replay_constants;
  auto* replay = app.add_subcommand("replay", "Re-run a simulation from its manifest");
  replay->add_option("--manifest", replay_manifest, "Manifest JSON written by simulate")->required();
  replay->add_option("--out", replay_out, "Override the CSV output path");
  replay->add_option("--constants", replay_constants, "Override the constants path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e, out, err);
    return rc == 0 ? kExitOk : kExitInput;
  }

  try {
    if (*estimate) return cmd_estimate(est, out, err);
    if (*simulate) return cmd_simulate(sim, out, "simulate");
    if (*bound) return cmd_bound(bound_dgp, bound_n, bound_draws, bound_seed, bound_constants, bound_z4, out);
    if (*constants) return cmd_constants(const_draws, const_seed, const_out, out);
    if (*draw) return cmd_draw(draw_dgp, draw_n, draw_seed, draw_rep, draw_constants, draw_z4, draw_out, out);
    if (*echo) return cmd_echo(echo_data, echo_columns, echo_out, out);
    if (*replay) return cmd_replay(replay_manifest, replay_out, replay_constants, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  }
  return kExitInput;
}

}  // namespace cbpsdid::cli
