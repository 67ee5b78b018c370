#include "cbpsdid/simulation.hpp"

#include "cbpsdid/error.hpp"
#include "cbpsdid/numopt.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <thread>

namespace cbpsdid {

namespace {

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& s, const std::string& what) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size() || !std::isfinite(v)) {
    throw Error(ErrorKind::ParseError, "constants file: bad value for " + what + ": '" + s + "'");
  }
  return v;
}

std::uint64_t parse_u64(const std::string& s, const std::string& what) {
  std::uint64_t v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw Error(ErrorKind::ParseError, "constants file: bad value for " + what + ": '" + s + "'");
  }
  return v;
}

std::uint32_t lo32(std::uint64_t v) { return static_cast<std::uint32_t>(v & 0xffffffffu); }
std::uint32_t hi32(std::uint64_t v) { return static_cast<std::uint32_t>(v >> 32); }

constexpr std::uint32_t kReplicationTag = 0x7265706cu;  // "repl"
constexpr std::uint32_t kBoundTag = 0x626e6421u;
constexpr std::uint32_t kConstantsTag = 0x7a636f6eu;

}  // namespace

std::string_view to_string(Z4Source s) { return s == Z4Source::X1 ? "x1" : "x2"; }

std::optional<Z4Source> parse_z4_source(std::string_view text) {
  if (text == "x1") return Z4Source::X1;
  if (text == "x2") return Z4Source::X2;
  return std::nullopt;
}

std::array<double, 4> raw_covariates(const std::array<double, 4>& x, Z4Source z4) {
  const double t3 = 0.6 + x[0] * x[2] / 25.0;
  const double t4 = 20.0 + (z4 == Z4Source::X1 ? x[0] : x[1]) + x[3];
  return {std::exp(0.5 * x[0]), 10.0 + x[1] / (1.0 + std::exp(x[0])), t3 * t3 * t3, t4 * t4};
}

std::array<double, 4> standardize(const std::array<double, 4>& raw, const StandardizationConstants& c) {
  std::array<double, 4> z{};
  for (std::size_t j = 0; j < 4; ++j) z[j] = (raw[j] - c.mean[j]) / c.sd[j];
  return z;
}

double outcome_index(const std::array<double, 4>& w) {
  return 210.0 + 27.4 * w[0] + 13.7 * (w[1] + w[2] + w[3]);
}

double propensity_index(const std::array<double, 4>& w) {
  return 0.75 * (-w[0] + 0.5 * w[1] - 0.25 * w[2] - 0.1 * w[3]);
}

double misspec_direction_ps(const std::array<double, 4>& z) { return -z[0] * z[0] + z[1] * z[1]; }

double misspec_direction_or(const std::array<double, 4>& z) {
  return 2.0 * z[0] * z[0] + 4.0 * z[1] * z[1] + 3.0 * z[2] * z[2] + z[3] * z[3];
}

StandardizationConstants compute_standardization(std::uint64_t oracle_draws, std::uint64_t seed) {
  if (oracle_draws < kMinStandardizationDraws) {
    throw Error(ErrorKind::InvalidArgument, "standardization needs at least 10^6 oracle draws");
  }
  std::seed_seq seq{lo32(seed), hi32(seed), kConstantsTag};
  std::mt19937_64 rng(seq);
  std::normal_distribution<double> normal;
  // Welford accumulation per component.
  std::array<double, 4> mean{}, m2{};
  for (std::uint64_t i = 0; i < oracle_draws; ++i) {
    std::array<double, 4> x{};
    for (auto& v : x) v = normal(rng);
    const auto raw = raw_covariates(x);
    const double count = static_cast<double>(i + 1);
    for (std::size_t j = 0; j < 4; ++j) {
      const double delta = raw[j] - mean[j];
      mean[j] += delta / count;
      m2[j] += delta * (raw[j] - mean[j]);
    }
  }
  StandardizationConstants c;
  c.seed = seed;
  c.draws = oracle_draws;
  c.mean = mean;
  for (std::size_t j = 0; j < 4; ++j) c.sd[j] = std::sqrt(m2[j] / static_cast<double>(oracle_draws));
  return c;
}

std::string format_constants(const StandardizationConstants& c) {
  std::ostringstream os;
  os << "cbpsdid-standardization 1\n";
  os << "seed " << c.seed << "\n";
  os << "draws " << c.draws << "\n";
  for (std::size_t j = 0; j < 4; ++j) {
    os << "z" << (j + 1) << ' ' << format_double(c.mean[j]) << ' ' << format_double(c.sd[j]) << "\n";
  }
  return os.str();
}

StandardizationConstants parse_constants(std::istream& in) {
  StandardizationConstants c;
  std::string line;
  bool header = false, have_seed = false, have_draws = false;
  std::array<bool, 4> have{};
  while (std::getline(in, line)) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::vector<std::string> tok;
    for (std::string t; ls >> t;) tok.push_back(t);
    if (tok.empty()) continue;
    if (tok[0] == "cbpsdid-standardization") {
      if (tok.size() != 2 || tok[1] != "1") {
        throw Error(ErrorKind::ParseError, "constants file: unsupported version");
      }
      header = true;
    } else if (tok[0] == "seed" && tok.size() == 2) {
      c.seed = parse_u64(tok[1], "seed");
      have_seed = true;
    } else if (tok[0] == "draws" && tok.size() == 2) {
      c.draws = parse_u64(tok[1], "draws");
      have_draws = true;
    } else if (tok.size() == 3 && tok[0].size() == 2 && tok[0][0] == 'z' && tok[0][1] >= '1' &&
               tok[0][1] <= '4') {
      const auto j = static_cast<std::size_t>(tok[0][1] - '1');
      c.mean[j] = parse_double(tok[1], tok[0] + " mean");
      c.sd[j] = parse_double(tok[2], tok[0] + " sd");
      if (!(c.sd[j] > 0.0)) throw Error(ErrorKind::ParseError, "constants file: sd must be positive");
      have[j] = true;
    } else {
      throw Error(ErrorKind::ParseError, "constants file: unexpected line '" + line + "'");
    }
  }
  if (!header || !have_seed || !have_draws || !std::all_of(have.begin(), have.end(), [](bool b) { return b; })) {
    throw Error(ErrorKind::ParseError, "constants file is incomplete");
  }
  return c;
}

void write_constants(const std::filesystem::path& path, const StandardizationConstants& c) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::IoError, "cannot write '" + path.string() + "'");
  out << format_constants(c);
}

StandardizationConstants read_constants(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::IoError, "cannot open constants file '" + path.string() + "'");
  return parse_constants(in);
}

DgpConfig DgpConfig::make(int dgp, Eigen::Index n) {
  DgpConfig cfg;
  cfg.dgp = dgp;
  cfg.n = n;
  if (dgp == 5) cfg.xi = cfg.delta = 1.0 / std::sqrt(static_cast<double>(n));
  cfg.validate();
  return cfg;
}

void DgpConfig::validate() const {
  if (dgp < 1 || dgp > 5) throw Error(ErrorKind::InvalidArgument, "dgp must be 1..5");
  if (n < 2) throw Error(ErrorKind::InvalidArgument, "n must be at least 2");
  if (!std::isfinite(xi) || !std::isfinite(delta)) {
    throw Error(ErrorKind::InvalidArgument, "xi and delta must be finite");
  }
}

UnitDraw draw_unit(const DgpConfig& cfg, const StandardizationConstants& c, std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  UnitDraw u;
  for (auto& v : u.x) v = normal(rng);
  u.z = standardize(raw_covariates(u.x, cfg.z4), c);

  // DGP 2 and 4 generate treatment from X, DGP 3 and 4 generate outcomes
  // from X; the analyst only ever sees Z.
  const auto& w_ps = (cfg.dgp == 2 || cfg.dgp == 4) ? u.x : u.z;
  const auto& w_or = (cfg.dgp == 3 || cfg.dgp == 4) ? u.x : u.z;

  u.pscore = logistic::prob(propensity_index(w_ps));
  double shift = 0.0;
  if (cfg.dgp == 5) {
    if (cfg.xi != 0.0) {
      u.pscore *= std::exp(cfg.xi * misspec_direction_ps(u.z));
      const double clamped =
          std::clamp(u.pscore, kDgp5PropensityFloor, 1.0 - kDgp5PropensityFloor);
      u.clamped = clamped != u.pscore;
      u.pscore = clamped;
    }
    shift = cfg.delta * misspec_direction_or(u.z);
  }

  const double uu = uniform(rng);
  u.d = u.pscore >= uu ? 1.0 : 0.0;
  const double f = outcome_index(w_or);
  const double v = u.d * f + normal(rng);  // shared by both periods
  const double eps0 = normal(rng);
  const double eps1_untreated = normal(rng);
  const double eps1_treated = normal(rng);

  u.y0 = f + v + eps0 + shift;
  u.y1 = 2.0 * f + v + (u.d == 1.0 ? eps1_treated : eps1_untreated) + 2.0 * shift;
  u.m_delta = f + shift;
  return u;
}

Replication draw_replication(const DgpConfig& cfg, const StandardizationConstants& c,
                             std::mt19937_64& rng) {
  cfg.validate();
  const Eigen::Index n = cfg.n;
  Eigen::VectorXd y0(n), y1(n), d(n);
  std::vector<Eigen::VectorXd> z(4, Eigen::VectorXd(n));
  Eigen::Index clamped = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const UnitDraw u = draw_unit(cfg, c, rng);
    y0[i] = u.y0;
    y1[i] = u.y1;
    d[i] = u.d;
    for (std::size_t j = 0; j < 4; ++j) z[j][i] = u.z[j];
    if (u.clamped) ++clamped;
  }
  return Replication{PanelDataset::make(std::move(y0), std::move(y1), std::move(d),
                                        {"z1", "z2", "z3", "z4"}, std::move(z)),
                     0.0, clamped};
}

std::mt19937_64 replication_stream(std::uint64_t seed, std::uint64_t replication) {
  std::seed_seq seq{lo32(seed), hi32(seed), lo32(replication), hi32(replication), kReplicationTag};
  return std::mt19937_64(seq);
}

DesignMatrix replication_design(const PanelDataset& ds) {
  Eigen::MatrixXd x(ds.n(), 5);
  x.col(0).setOnes();
  for (Eigen::Index j = 0; j < 4; ++j) x.col(j + 1) = ds.covariate("z" + std::to_string(j + 1));
  return DesignMatrix::from_matrix(std::move(x), {"(intercept)", "z1", "z2", "z3", "z4"});
}

MetricsRow aggregate(Method method, const std::vector<ReplicationEstimate>& estimates, double true_att) {
  MetricsRow row;
  row.method = method;
  std::vector<double> bias;
  double sum_sq = 0.0, sum_var = 0.0, sum_len = 0.0;
  std::size_t covered = 0;
  for (const auto& e : estimates) {
    if (!e.ok) {
      ++row.failures;
      continue;
    }
    const double b = e.tau - true_att;
    bias.push_back(b);
    sum_sq += b * b;
    sum_var += e.asy_var;
    sum_len += e.ci_high - e.ci_low;
    if (e.ci_low <= true_att && true_att <= e.ci_high) ++covered;
  }
  row.successes = bias.size();
  if (bias.empty()) {
    const double nan = std::numeric_limits<double>::quiet_NaN();
    row.av_bias = row.med_bias = row.rmse = row.asy_v = row.cover = row.cil = nan;
    return row;
  }
  const auto m = static_cast<double>(bias.size());
  double sum = 0.0;
  for (double b : bias) sum += b;
  row.av_bias = sum / m;
  std::vector<double> sorted = bias;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t mid = sorted.size() / 2;
  row.med_bias = sorted.size() % 2 ? sorted[mid] : 0.5 * (sorted[mid - 1] + sorted[mid]);
  row.rmse = std::sqrt(sum_sq / m);
  row.asy_v = sum_var / m;
  row.cover = static_cast<double>(covered) / m;
  row.cil = sum_len / m;
  return row;
}

StudyReport run_study(const DgpConfig& cfg, const StandardizationConstants& c, std::size_t reps,
                      std::uint64_t seed, const std::vector<Method>& methods, unsigned threads) {
  cfg.validate();
  if (reps < 1) throw Error(ErrorKind::InvalidArgument, "reps must be at least 1");
  if (methods.empty()) throw Error(ErrorKind::InvalidArgument, "no methods requested");

  std::vector<std::vector<ReplicationEstimate>> results(methods.size(),
                                                        std::vector<ReplicationEstimate>(reps));
  std::vector<Eigen::Index> clamped(reps, 0);
  std::atomic<std::size_t> next{0};

  auto worker = [&]() {
    for (std::size_t r = next++; r < reps; r = next++) {
      auto rng = replication_stream(seed, r);
      const Replication rep = draw_replication(cfg, c, rng);
      clamped[r] = rep.clamped_units;
      const Eigen::VectorXd dy = rep.dataset.delta_y();
      const Eigen::VectorXd& d = rep.dataset.d();
      std::optional<DesignMatrix> x;
      try {
        x = replication_design(rep.dataset);
      } catch (const Error&) {
        continue;  // every method records a failure
      }
      for (std::size_t m = 0; m < methods.size(); ++m) {
        ReplicationEstimate& out = results[m][r];
        try {
          const AttResult res = estimate(methods[m], *x, dy, d);
          out = {true, res.tau, res.asy_var, res.ci_low, res.ci_high};
        } catch (const Error&) {
          out.ok = false;
        }
      }
    }
  };

  const unsigned n_threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(reps)));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(n_threads);
    for (unsigned t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  StudyReport report;
  report.cfg = cfg;
  report.reps = reps;
  report.seed = seed;
  for (std::size_t m = 0; m < methods.size(); ++m) {
    report.rows.push_back(aggregate(methods[m], results[m], 0.0));
  }
  for (auto k : clamped) report.clamped_units += k;
  return report;
}

BoundEstimate efficiency_bound(const DgpConfig& cfg, const StandardizationConstants& c,
                               std::uint64_t oracle_draws, std::uint64_t seed) {
  cfg.validate();
  if (oracle_draws < 2) throw Error(ErrorKind::InvalidArgument, "need at least 2 oracle draws");
  DgpConfig limit = cfg;
  limit.xi = limit.delta = 0.0;
  std::seed_seq seq{lo32(seed), hi32(seed), kBoundTag};
  std::mt19937_64 rng(seq);
  const auto n = static_cast<Eigen::Index>(oracle_draws);
  Eigen::VectorXd pi(n), m(n), dy(n), d(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const UnitDraw u = draw_unit(limit, c, rng);
    pi[i] = u.pscore;
    m[i] = u.m_delta;
    dy[i] = u.y1 - u.y0;
    d[i] = u.d;
  }
  const double p = d.mean();
  const Eigen::ArrayXd sq = efficient_influence(pi, m, dy, d, 0.0, p).array().square();
  BoundEstimate b;
  b.draws = oracle_draws;
  b.value = sq.mean();
  const double var = (sq - b.value).square().sum() / static_cast<double>(n - 1);
  b.std_error = std::sqrt(var / static_cast<double>(n));
  return b;
}

}  // namespace cbpsdid
