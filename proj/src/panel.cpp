#include "cbpsdid/panel.hpp"

#include "cbpsdid/error.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

namespace cbpsdid {

namespace {

std::string_view trim(std::string_view s) {
  constexpr std::string_view ws = " \t\r\n";
  const auto first = s.find_first_not_of(ws);
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(ws);
  return s.substr(first, last - first + 1);
}

std::vector<std::string> split_fields(std::string_view line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    auto field = trim(line.substr(start, comma == std::string_view::npos ? line.npos : comma - start));
    if (field.size() >= 2 && field.front() == '"' && field.back() == '"') {
      field = field.substr(1, field.size() - 2);
    }
    fields.emplace_back(field);
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return fields;
}

std::string where(const std::string& source, std::size_t row, const std::string& column) {
  std::ostringstream os;
  os << source << ": row " << row << ", column '" << column << "'";
  return os.str();
}

void check_finite(const Eigen::VectorXd& v, const std::string& name) {
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      throw Error(ErrorKind::NonFiniteValue,
                  "non-finite value in column '" + name + "' at row " + std::to_string(i + 1));
    }
  }
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

Eigen::Index numeric_rank(const Eigen::MatrixXd& x) {
  // Unit-norm columns make the relative pivot test independent of units.
  Eigen::MatrixXd scaled = x;
  for (Eigen::Index j = 0; j < scaled.cols(); ++j) {
    const double norm = scaled.col(j).norm();
    if (norm > 0.0) scaled.col(j) /= norm;
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(scaled);
  qr.setThreshold(kRankTolerance);
  return qr.rank();
}

// Throws RankDeficient naming the first column (in order) that lies in the
// span of the columns before it.
void require_full_rank(const Eigen::MatrixXd& x, const std::vector<std::string>& names) {
  if (numeric_rank(x) == x.cols()) return;
  for (Eigen::Index j = 1; j <= x.cols(); ++j) {
    if (numeric_rank(x.leftCols(j)) < j) {
      throw Error(ErrorKind::RankDeficient,
                  "design column '" + names[static_cast<std::size_t>(j - 1)] +
                      "' is linearly dependent on the preceding columns");
    }
  }
  throw Error(ErrorKind::RankDeficient, "design matrix is rank deficient");
}

}  // namespace

PanelDataset PanelDataset::make(Eigen::VectorXd y0, Eigen::VectorXd y1, Eigen::VectorXd d,
                                std::vector<std::string> covariate_names,
                                std::vector<Eigen::VectorXd> covariates) {
  const Eigen::Index n = y0.size();
  if (n < 2) throw Error(ErrorKind::InvalidArgument, "panel needs at least 2 units");
  if (y1.size() != n || d.size() != n) {
    throw Error(ErrorKind::InvalidArgument, "y0, y1 and d must have equal length");
  }
  if (covariate_names.size() != covariates.size()) {
    throw Error(ErrorKind::InvalidArgument, "covariate names and columns differ in count");
  }
  check_finite(y0, "y0");
  check_finite(y1, "y1");
  for (Eigen::Index i = 0; i < n; ++i) {
    if (d[i] != 0.0 && d[i] != 1.0) {
      throw Error(ErrorKind::NonBinaryTreatment,
                  "treatment must be 0 or 1, got " + format_double(d[i]) + " at row " +
                      std::to_string(i + 1));
    }
  }
  for (std::size_t j = 0; j < covariates.size(); ++j) {
    if (covariates[j].size() != n) {
      throw Error(ErrorKind::InvalidArgument,
                  "covariate '" + covariate_names[j] + "' has the wrong length");
    }
    check_finite(covariates[j], covariate_names[j]);
    for (std::size_t k = 0; k < j; ++k) {
      if (covariate_names[k] == covariate_names[j]) {
        throw Error(ErrorKind::InvalidArgument, "duplicate covariate '" + covariate_names[j] + "'");
      }
    }
  }
  PanelDataset ds;
  ds.y0_ = std::move(y0);
  ds.y1_ = std::move(y1);
  ds.d_ = std::move(d);
  ds.names_ = std::move(covariate_names);
  ds.covariates_ = std::move(covariates);
  return ds;
}

bool PanelDataset::has_covariate(const std::string& name) const {
  return std::find(names_.begin(), names_.end(), name) != names_.end();
}

const Eigen::VectorXd& PanelDataset::covariate(const std::string& name) const {
  const auto it = std::find(names_.begin(), names_.end(), name);
  if (it == names_.end()) throw Error(ErrorKind::UnknownTerm, "no covariate named '" + name + "'");
  return covariates_[static_cast<std::size_t>(it - names_.begin())];
}

Eigen::Index PanelDataset::n_treated() const {
  return static_cast<Eigen::Index>(d_.sum());
}

PanelDataset PanelDataset::permuted(const std::vector<Eigen::Index>& perm) const {
  if (static_cast<Eigen::Index>(perm.size()) != n()) {
    throw Error(ErrorKind::InvalidArgument, "permutation length mismatch");
  }
  auto take = [&](const Eigen::VectorXd& v) {
    Eigen::VectorXd out(v.size());
    for (Eigen::Index i = 0; i < v.size(); ++i) out[i] = v[perm[static_cast<std::size_t>(i)]];
    return out;
  };
  std::vector<Eigen::VectorXd> cov;
  cov.reserve(covariates_.size());
  for (const auto& c : covariates_) cov.push_back(take(c));
  return make(take(y0_), take(y1_), take(d_), names_, std::move(cov));
}

PanelDataset parse_csv(std::istream& in, const ColumnMap& columns, const std::string& source) {
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorKind::ParseError, source + ": empty file");
  if (line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);
  const auto header = split_fields(line);

  auto find_column = [&](const std::string& name) -> std::size_t {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) {
      throw Error(ErrorKind::MissingColumn, source + ": column '" + name + "' not found in header");
    }
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t iy0 = find_column(columns.y0);
  const std::size_t iy1 = find_column(columns.y1);
  const std::size_t id = find_column(columns.d);

  std::vector<std::vector<double>> cols(header.size());
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    ++row;
    const auto fields = split_fields(line);
    if (fields.size() != header.size()) {
      throw Error(ErrorKind::ParseError, source + ": row " + std::to_string(row) + " has " +
                                             std::to_string(fields.size()) + " fields, expected " +
                                             std::to_string(header.size()));
    }
    for (std::size_t j = 0; j < fields.size(); ++j) {
      const std::string& f = fields[j];
      double value = 0.0;
      const auto res = std::from_chars(f.data(), f.data() + f.size(), value);
      if (f.empty()) {
        throw Error(ErrorKind::NonFiniteValue, where(source, row, header[j]) + ": missing value");
      }
      if (res.ec != std::errc() || res.ptr != f.data() + f.size()) {
        throw Error(ErrorKind::ParseError,
                    where(source, row, header[j]) + ": cannot parse '" + f + "' as a number");
      }
      if (!std::isfinite(value)) {
        throw Error(ErrorKind::NonFiniteValue, where(source, row, header[j]) + ": value '" + f +
                                                   "' is not finite");
      }
      if (j == id && value != 0.0 && value != 1.0) {
        throw Error(ErrorKind::NonBinaryTreatment,
                    where(source, row, header[j]) + ": treatment must be 0 or 1, got '" + f + "'");
      }
      cols[j].push_back(value);
    }
  }
  if (row < 2) throw Error(ErrorKind::InvalidArgument, source + ": need at least 2 data rows");

  auto to_vec = [](const std::vector<double>& v) {
    return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())).eval();
  };
  std::vector<std::string> names;
  std::vector<Eigen::VectorXd> covariates;
  for (std::size_t j = 0; j < header.size(); ++j) {
    if (j == iy0 || j == iy1 || j == id) continue;
    names.push_back(header[j]);
    covariates.push_back(to_vec(cols[j]));
  }
  return PanelDataset::make(to_vec(cols[iy0]), to_vec(cols[iy1]), to_vec(cols[id]),
                            std::move(names), std::move(covariates));
}

PanelDataset load_csv(const std::filesystem::path& path, const ColumnMap& columns) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::IoError, "cannot open '" + path.string() + "'");
  return parse_csv(in, columns, path.string());
}

void write_csv(std::ostream& out, const PanelDataset& ds, const ColumnMap& columns) {
  out << columns.y0 << ',' << columns.y1 << ',' << columns.d;
  for (const auto& name : ds.covariate_names()) out << ',' << name;
  out << '\n';
  for (Eigen::Index i = 0; i < ds.n(); ++i) {
    out << format_double(ds.y0()[i]) << ',' << format_double(ds.y1()[i]) << ','
        << (ds.d()[i] == 1.0 ? '1' : '0');
    for (const auto& name : ds.covariate_names()) out << ',' << format_double(ds.covariate(name)[i]);
    out << '\n';
  }
}

void write_csv(const std::filesystem::path& path, const PanelDataset& ds, const ColumnMap& columns) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::IoError, "cannot write '" + path.string() + "'");
  write_csv(out, ds, columns);
  if (!out) throw Error(ErrorKind::IoError, "write failed for '" + path.string() + "'");
}

std::string CovariateTerm::label() const {
  switch (kind) {
    case Kind::Raw: return a;
    case Kind::Square: return a + "^2";
    case Kind::Interaction: return a + "*" + b;
  }
  return a;
}

bool CovariateTerm::same_as(const CovariateTerm& other) const {
  if (kind != other.kind) return false;
  if (kind == Kind::Interaction) {
    return (a == other.a && b == other.b) || (a == other.b && b == other.a);
  }
  return a == other.a;
}

CovariateSpec::CovariateSpec(std::vector<CovariateTerm> terms) : terms_(std::move(terms)) {
  for (std::size_t i = 0; i < terms_.size(); ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      if (terms_[i].same_as(terms_[j])) {
        throw Error(ErrorKind::InvalidSpec, "duplicate term '" + terms_[i].label() + "'");
      }
    }
  }
}

CovariateSpec CovariateSpec::parse(std::istream& in) {
  std::vector<CovariateTerm> terms;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::vector<std::string> tok;
    for (std::string t; ls >> t;) tok.push_back(t);
    if (tok.empty()) continue;
    auto bad = [&](const std::string& why) {
      return Error(ErrorKind::InvalidSpec, "spec line " + std::to_string(lineno) + ": " + why);
    };
    if (tok[0] == "raw" || tok[0] == "square") {
      if (tok.size() != 2) throw bad("'" + tok[0] + "' takes exactly one column name");
      terms.push_back(tok[0] == "raw" ? CovariateTerm::raw(tok[1]) : CovariateTerm::square(tok[1]));
    } else if (tok[0] == "interact") {
      if (tok.size() != 3) throw bad("'interact' takes exactly two column names");
      terms.push_back(CovariateTerm::interaction(tok[1], tok[2]));
    } else {
      throw bad("unknown term kind '" + tok[0] + "' (expected raw, square or interact)");
    }
  }
  return CovariateSpec(std::move(terms));
}

CovariateSpec CovariateSpec::parse(const std::string& text) {
  std::istringstream in(text);
  return parse(in);
}

CovariateSpec CovariateSpec::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::IoError, "cannot open spec '" + path.string() + "'");
  return parse(in);
}

CovariateSpec CovariateSpec::linear(const PanelDataset& ds) {
  std::vector<CovariateTerm> terms;
  for (const auto& name : ds.covariate_names()) terms.push_back(CovariateTerm::raw(name));
  return CovariateSpec(std::move(terms));
}

DesignMatrix DesignMatrix::from_matrix(Eigen::MatrixXd x, std::vector<std::string> column_names) {
  if (x.cols() < 1) throw Error(ErrorKind::InvalidArgument, "design needs at least one column");
  if (static_cast<Eigen::Index>(column_names.size()) != x.cols()) {
    throw Error(ErrorKind::InvalidArgument, "design column names do not match column count");
  }
  if (x.rows() < x.cols()) {
    throw Error(ErrorKind::InvalidArgument,
                "design has " + std::to_string(x.rows()) + " rows but " + std::to_string(x.cols()) +
                    " columns (need n >= k)");
  }
  if (!(x.col(0).array() == 1.0).all()) {
    throw Error(ErrorKind::InvalidArgument, "first design column must be the intercept");
  }
  if (!x.allFinite()) throw Error(ErrorKind::NonFiniteValue, "design contains non-finite values");
  require_full_rank(x, column_names);
  DesignMatrix dm;
  dm.x_ = std::move(x);
  dm.names_ = std::move(column_names);
  return dm;
}

DesignMatrix DesignMatrix::intercept_only(Eigen::Index n) {
  return from_matrix(Eigen::MatrixXd::Ones(n, 1), {"(intercept)"});
}

DesignMatrix build_design(const PanelDataset& ds, const CovariateSpec& spec) {
  for (const auto& t : spec.terms()) {
    if (!ds.has_covariate(t.a)) throw Error(ErrorKind::UnknownTerm, "unknown column '" + t.a + "'");
    if (t.kind == CovariateTerm::Kind::Interaction && !ds.has_covariate(t.b)) {
      throw Error(ErrorKind::UnknownTerm, "unknown column '" + t.b + "'");
    }
  }
  const Eigen::Index n = ds.n();
  const auto k = static_cast<Eigen::Index>(spec.size()) + 1;
  Eigen::MatrixXd x(n, k);
  std::vector<std::string> names{"(intercept)"};
  x.col(0).setOnes();
  for (Eigen::Index j = 1; j < k; ++j) {
    const auto& t = spec.terms()[static_cast<std::size_t>(j - 1)];
    const auto& a = ds.covariate(t.a);
    switch (t.kind) {
      case CovariateTerm::Kind::Raw: x.col(j) = a; break;
      case CovariateTerm::Kind::Square: x.col(j) = a.array().square(); break;
      case CovariateTerm::Kind::Interaction:
        x.col(j) = a.array() * ds.covariate(t.b).array();
        break;
    }
    names.push_back(t.label());
  }
  return DesignMatrix::from_matrix(std::move(x), std::move(names));
}

OverlapReport overlap_report(const Eigen::VectorXd& pscore, const Eigen::VectorXd& d) {
  if (pscore.size() != d.size() || pscore.size() == 0) {
    throw Error(ErrorKind::InvalidArgument, "propensity and treatment lengths differ");
  }
  if (!((pscore.array() > 0.0) && (pscore.array() < 1.0)).all()) {
    throw Error(ErrorKind::InvalidArgument, "fitted propensities must lie strictly inside (0, 1)");
  }
  OverlapReport r;
  r.min_propensity = pscore.minCoeff();
  r.max_propensity = pscore.maxCoeff();
  r.max_odds_weight = (pscore.array() / (1.0 - pscore.array())).maxCoeff();
  for (Eigen::Index i = 0; i < d.size(); ++i) {
    if (d[i] == 0.0 && pscore[i] > kExtremePropensity) ++r.extreme_controls;
  }
  return r;
}

}  // namespace cbpsdid
