#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace cbpsdid {

/// Two-period panel: pre/post outcomes, a binary treatment indicator and any
/// number of named real covariates. Immutable once built; every column has
/// length n() and holds finite values only.
///
/// Having both treatment groups present is *not* enforced here. That is an
/// estimator precondition, so a dataset with all d = 1 still loads.
class PanelDataset {
 public:
  /// Validates lengths, finiteness and d ∈ {0, 1}; throws Error otherwise.
  static PanelDataset make(Eigen::VectorXd y0, Eigen::VectorXd y1, Eigen::VectorXd d,
                           std::vector<std::string> covariate_names,
                           std::vector<Eigen::VectorXd> covariates);

  Eigen::Index n() const { return y0_.size(); }
  const Eigen::VectorXd& y0() const { return y0_; }
  const Eigen::VectorXd& y1() const { return y1_; }
  const Eigen::VectorXd& d() const { return d_; }
  Eigen::VectorXd delta_y() const { return y1_ - y0_; }

  const std::vector<std::string>& covariate_names() const { return names_; }
  bool has_covariate(const std::string& name) const;
  const Eigen::VectorXd& covariate(const std::string& name) const;

  Eigen::Index n_treated() const;
  Eigen::Index n_control() const { return n() - n_treated(); }

  /// Rows reordered so that row i of the result is row perm[i] of this.
  PanelDataset permuted(const std::vector<Eigen::Index>& perm) const;

 private:
  PanelDataset() = default;

  Eigen::VectorXd y0_, y1_, d_;
  std::vector<std::string> names_;
  std::vector<Eigen::VectorXd> covariates_;
};

/// Header names of the outcome and treatment columns in a CSV file.
struct ColumnMap {
  std::string y0 = "y0";
  std::string y1 = "y1";
  std::string d = "d";
};

/// Comma-separated file with a header row. Mapped columns become y0/y1/d,
/// every other column becomes a covariate in file order. Errors name the
/// offending row (1-based data row) and column.
PanelDataset load_csv(const std::filesystem::path& path, const ColumnMap& columns = {});
PanelDataset parse_csv(std::istream& in, const ColumnMap& columns = {},
                       const std::string& source = "<stream>");

/// Writes y0,y1,d then the covariates with round-trip precision, so
/// load_csv(write_csv(ds)) reproduces ds bit for bit.
void write_csv(std::ostream& out, const PanelDataset& ds, const ColumnMap& columns = {});
void write_csv(const std::filesystem::path& path, const PanelDataset& ds,
               const ColumnMap& columns = {});

struct CovariateTerm {
  enum class Kind { Raw, Square, Interaction };

  Kind kind = Kind::Raw;
  std::string a;
  std::string b;  // only for Interaction

  static CovariateTerm raw(std::string name) { return {Kind::Raw, std::move(name), {}}; }
  static CovariateTerm square(std::string name) { return {Kind::Square, std::move(name), {}}; }
  static CovariateTerm interaction(std::string a, std::string b) {
    return {Kind::Interaction, std::move(a), std::move(b)};
  }

  std::string label() const;
  /// interaction(a,b) and interaction(b,a) are the same term.
  bool same_as(const CovariateTerm& other) const;
};

/// Ordered covariate terms; the intercept is implicit and always first.
class CovariateSpec {
 public:
  CovariateSpec() = default;
  explicit CovariateSpec(std::vector<CovariateTerm> terms);

  const std::vector<CovariateTerm>& terms() const { return terms_; }
  std::size_t size() const { return terms_.size(); }

  /// One term per line: `raw age`, `square age`, `interact age educ`.
  /// Blank lines and `#` comments are ignored.
  static CovariateSpec parse(std::istream& in);
  static CovariateSpec parse(const std::string& text);
  static CovariateSpec load(const std::filesystem::path& path);

  /// Linear spec over all covariates of ds (the "Lin" specification).
  static CovariateSpec linear(const PanelDataset& ds);

 private:
  std::vector<CovariateTerm> terms_;
};

/// n-by-k design with an all-ones first column and full column rank.
class DesignMatrix {
 public:
  /// Wraps an existing matrix after checking the intercept column, n ≥ k
  /// and the rank (same tolerance as build_design).
  static DesignMatrix from_matrix(Eigen::MatrixXd x, std::vector<std::string> column_names);
  static DesignMatrix intercept_only(Eigen::Index n);

  const Eigen::MatrixXd& x() const { return x_; }
  const std::vector<std::string>& column_names() const { return names_; }
  Eigen::Index n() const { return x_.rows(); }
  Eigen::Index k() const { return x_.cols(); }

 private:
  DesignMatrix() = default;

  Eigen::MatrixXd x_;
  std::vector<std::string> names_;
};

/// Relative pivot tolerance for all rank decisions.
inline constexpr double kRankTolerance = 1e-10;

DesignMatrix build_design(const PanelDataset& ds, const CovariateSpec& spec);

struct OverlapReport {
  double min_propensity = 0.0;
  double max_propensity = 0.0;
  Eigen::Index extreme_controls = 0;  // controls with fitted propensity > 0.99
  double max_odds_weight = 0.0;       // max over units of pi / (1 - pi)
};

inline constexpr double kExtremePropensity = 0.99;

/// Advisory summary of fitted propensities. Requires every value to lie in
/// the open interval (0, 1) and matching lengths.
OverlapReport overlap_report(const Eigen::VectorXd& pscore, const Eigen::VectorXd& d);

}  // namespace cbpsdid
