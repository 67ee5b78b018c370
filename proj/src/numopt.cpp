#include "cbpsdid/numopt.hpp"

#include "cbpsdid/error.hpp"

#include <limits>
#include <optional>
#include <sstream>
#include <vector>

namespace cbpsdid {

namespace {

constexpr int kMleMaxIterations = 100;
constexpr double kMleScoreTolerance = 1e-8;
constexpr double kMleRelativeStep = 1e-12;
constexpr int kCbpsMaxIterations = 200;
constexpr double kCbpsTolerance = 1e-9;
constexpr int kPolishSteps = 3;
constexpr int kMaxHalvings = 30;

std::vector<Eigen::Index> control_rows(const Eigen::VectorXd& d) {
  std::vector<Eigen::Index> rows;
  for (Eigen::Index i = 0; i < d.size(); ++i) {
    if (d[i] == 0.0) rows.push_back(i);
  }
  return rows;
}

// Weighted least squares restricted to controls, through QR of the
// sqrt-weighted rows.
OutcomeFit weighted_control_fit(const DesignMatrix& design, const Eigen::VectorXd& dy,
                                const Eigen::VectorXd& d, const Eigen::VectorXd& weight,
                                OutcomeKind kind) {
  const auto& x = design.x();
  if (dy.size() != x.rows()) throw Error(ErrorKind::InvalidArgument, "dy length mismatch");
  if (d.size() != x.rows()) throw Error(ErrorKind::InvalidArgument, "d length mismatch");
  const auto rows = control_rows(d);
  const auto nc = static_cast<Eigen::Index>(rows.size());
  if (nc < x.cols()) {
    throw Error(ErrorKind::TooFewControls, std::to_string(nc) + " control units for " +
                                               std::to_string(x.cols()) + " regressors");
  }
  Eigen::MatrixXd xc(nc, x.cols());
  Eigen::VectorXd yc(nc);
  Eigen::VectorXd sw(nc);
  for (Eigen::Index r = 0; r < nc; ++r) {
    const Eigen::Index i = rows[static_cast<std::size_t>(r)];
    sw[r] = std::sqrt(weight[i]);
    xc.row(r) = sw[r] * x.row(i);
    yc[r] = sw[r] * dy[i];
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(xc);
  qr.setThreshold(kRankTolerance);
  if (qr.rank() < x.cols()) {
    throw Error(ErrorKind::RankDeficient,
                std::string(to_string(kind)) + ": control design is rank deficient (rank " +
                    std::to_string(qr.rank()) + " < " + std::to_string(x.cols()) + ")");
  }
  OutcomeFit fit;
  fit.kind = kind;
  fit.gamma = qr.solve(yc);
  const Eigen::VectorXd normal_residual = xc.transpose() * (yc - xc * fit.gamma);
  fit.residual_norm = normal_residual.cwiseAbs().maxCoeff();
  fit.scale = std::max((xc.transpose() * xc).cwiseAbs().maxCoeff(),
                       (xc.transpose() * yc).cwiseAbs().maxCoeff());
  return fit;
}

double max_abs(const Eigen::VectorXd& v) { return v.size() ? v.cwiseAbs().maxCoeff() : 0.0; }

bool clamp_hit(const Eigen::VectorXd& eta) {
  return max_abs(eta) > logistic::kMaxLinearPredictor;
}

struct CbpsAttempt {
  Eigen::VectorXd beta;
  double residual = 0.0;
  int iterations = 0;
  bool converged = false;
};

CbpsAttempt cbps_newton(const DesignMatrix& x, const Eigen::VectorXd& d, Eigen::VectorXd beta,
                        double tol) {
  CbpsAttempt out;
  Eigen::VectorXd g = cbps_moment(x, d, beta);
  double merit = g.norm();
  for (int it = 0; it < kCbpsMaxIterations; ++it) {
    out.iterations = it;
    if (max_abs(g) <= tol) {
      out.converged = true;
      break;
    }
    // -J is positive definite whenever the odds-weighted controls span the
    // columns of X.
    Eigen::LDLT<Eigen::MatrixXd> ldlt(-cbps_jacobian(x, d, beta));
    if (ldlt.info() != Eigen::Success || !(ldlt.vectorD().array() > 0.0).all()) {
      throw Error(ErrorKind::RankDeficient, "CBPS Jacobian is singular");
    }
    const Eigen::VectorXd step = ldlt.solve(g);
    double t = 1.0;
    bool accepted = false;
    for (int h = 0; h <= kMaxHalvings; ++h, t *= 0.5) {
      Eigen::VectorXd candidate = beta + t * step;
      Eigen::VectorXd gc = cbps_moment(x, d, candidate);
      const double mc = gc.norm();
      if (std::isfinite(mc) && mc < merit) {
        beta = std::move(candidate);
        g = std::move(gc);
        merit = mc;
        accepted = true;
        break;
      }
    }
    if (!accepted) break;
    out.iterations = it + 1;
  }
  if (!out.converged && max_abs(g) <= tol) out.converged = true;
  if (out.converged) {
    // Quadratic convergence makes a couple of extra full steps nearly free and
    // pushes the balance residual down to rounding level.
    for (int k = 0; k < kPolishSteps; ++k) {
      Eigen::LDLT<Eigen::MatrixXd> ldlt(-cbps_jacobian(x, d, beta));
      if (ldlt.info() != Eigen::Success) break;
      Eigen::VectorXd candidate = beta + ldlt.solve(g);
      Eigen::VectorXd gc = cbps_moment(x, d, candidate);
      if (!(gc.norm() < merit)) break;
      beta = std::move(candidate);
      g = std::move(gc);
      merit = g.norm();
    }
  }
  out.beta = std::move(beta);
  out.residual = max_abs(g);
  return out;
}

}  // namespace

std::string_view to_string(PropensityMethod m) {
  return m == PropensityMethod::ML ? "ML" : "CBPS";
}

std::string_view to_string(OutcomeKind k) {
  return k == OutcomeKind::OLS_control ? "OLS_control" : "WLS_cbps";
}

void require_two_groups(const Eigen::VectorXd& d, Eigen::Index n) {
  if (d.size() != n) throw Error(ErrorKind::InvalidArgument, "treatment length mismatch");
  Eigen::Index treated = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (d[i] == 1.0) {
      ++treated;
    } else if (d[i] != 0.0) {
      throw Error(ErrorKind::NonBinaryTreatment, "treatment must be 0 or 1");
    }
  }
  if (treated == 0 || treated == n) {
    throw Error(ErrorKind::InvalidArgument,
                "both treated and control units are required (treated = " +
                    std::to_string(treated) + " of " + std::to_string(n) + ")");
  }
}

double balance_scale(const Eigen::MatrixXd& x) {
  return 1.0 + x.colwise().mean().cwiseAbs().maxCoeff();
}

Eigen::VectorXd linear_predictor(const DesignMatrix& x, const Eigen::VectorXd& beta) {
  if (beta.size() != x.k()) throw Error(ErrorKind::InvalidArgument, "beta length mismatch");
  return x.x() * beta;
}

Eigen::VectorXd fitted_propensity(const DesignMatrix& x, const Eigen::VectorXd& beta) {
  return linear_predictor(x, beta).unaryExpr([](double v) { return logistic::prob(v); });
}

OutcomeFit ols_control(const DesignMatrix& x, const Eigen::VectorXd& dy, const Eigen::VectorXd& d) {
  return weighted_control_fit(x, dy, d, Eigen::VectorXd::Ones(x.n()), OutcomeKind::OLS_control);
}

OutcomeFit wls_cbps_gamma(const DesignMatrix& x, const Eigen::VectorXd& dy,
                          const Eigen::VectorXd& d, const Eigen::VectorXd& beta) {
  const Eigen::VectorXd w =
      linear_predictor(x, beta).unaryExpr([](double v) { return logistic::odds(v); });
  return weighted_control_fit(x, dy, d, w, OutcomeKind::WLS_cbps);
}

double logistic_loglik(const DesignMatrix& x, const Eigen::VectorXd& d, const Eigen::VectorXd& beta) {
  const Eigen::VectorXd eta = linear_predictor(x, beta);
  double ll = 0.0;
  for (Eigen::Index i = 0; i < eta.size(); ++i) ll += d[i] * eta[i] - logistic::log1pexp(eta[i]);
  return ll / static_cast<double>(eta.size());
}

Eigen::VectorXd logistic_score(const DesignMatrix& x, const Eigen::VectorXd& d,
                               const Eigen::VectorXd& beta) {
  const Eigen::VectorXd resid = d - fitted_propensity(x, beta);
  return x.x().transpose() * resid / static_cast<double>(x.n());
}

Eigen::MatrixXd logistic_hessian(const DesignMatrix& x, const Eigen::VectorXd& beta) {
  const Eigen::VectorXd w =
      linear_predictor(x, beta).unaryExpr([](double v) { return logistic::deriv(v); });
  return -(x.x().transpose() * w.asDiagonal() * x.x()) / static_cast<double>(x.n());
}

PropensityFit logistic_mle(const DesignMatrix& x, const Eigen::VectorXd& d) {
  require_two_groups(d, x.n());
  PropensityFit fit;
  fit.method = PropensityMethod::ML;
  fit.scale = balance_scale(x.x());
  const double tol = kMleScoreTolerance * fit.scale;

  Eigen::VectorXd beta = Eigen::VectorXd::Zero(x.k());
  double ll = logistic_loglik(x, d, beta);
  Eigen::VectorXd score = logistic_score(x, d, beta);
  double score_norm = max_abs(score);
  int it = 0;
  for (; it < kMleMaxIterations && !fit.converged; ++it) {
    if (score_norm <= tol) {
      fit.converged = true;
      break;
    }
    Eigen::LDLT<Eigen::MatrixXd> ldlt(-logistic_hessian(x, beta));
    if (ldlt.info() != Eigen::Success || !(ldlt.vectorD().array() > 0.0).all()) {
      if (clamp_hit(linear_predictor(x, beta))) {
        throw Error(ErrorKind::Separation, "logistic likelihood is unbounded (separated data)");
      }
      throw Error(ErrorKind::RankDeficient, "logistic information matrix is singular");
    }
    const Eigen::VectorXd step = ldlt.solve(score);

    double t = 1.0;
    bool accepted = false;
    for (int h = 0; h <= kMaxHalvings; ++h, t *= 0.5) {
      const Eigen::VectorXd candidate = beta + t * step;
      const double llc = logistic_loglik(x, d, candidate);
      if (std::isfinite(llc) && llc >= ll) {
        beta = candidate;
        ll = llc;
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      // Stalled at rounding level: only acceptable if the score is small.
      fit.converged = score_norm <= tol;
      if (!fit.converged) {
        throw Error(ErrorKind::NoConvergence,
                    "logistic line search failed with max |score| = " + std::to_string(score_norm));
      }
      break;
    }
    const double prev_norm = score_norm;
    score = logistic_score(x, d, beta);
    score_norm = max_abs(score);
    if (clamp_hit(linear_predictor(x, beta)) && score_norm >= prev_norm) {
      throw Error(ErrorKind::Separation, "logistic likelihood is unbounded (separated data)");
    }
    if ((t * step).norm() <= kMleRelativeStep * (1.0 + beta.norm())) fit.converged = true;
  }
  if (!fit.converged && score_norm <= tol) fit.converged = true;
  if (fit.converged) {
    // same polishing as the balance solver; judged on the score, since the
    // log-likelihood is flat to rounding this close to the optimum
    for (int k = 0; k < kPolishSteps; ++k) {
      Eigen::LDLT<Eigen::MatrixXd> ldlt(-logistic_hessian(x, beta));
      if (ldlt.info() != Eigen::Success) break;
      const Eigen::VectorXd candidate = beta + ldlt.solve(score);
      const Eigen::VectorXd sc = logistic_score(x, d, candidate);
      if (!(max_abs(sc) < score_norm)) break;
      beta = candidate;
      score = sc;
      score_norm = max_abs(sc);
    }
  }

  const bool clamped = clamp_hit(linear_predictor(x, beta));
  if (clamped) {
    // Any |x'beta| beyond the clamp means some fitted probability is within
    // exp(-30) of 0 or 1, i.e. the data are (quasi-)separated.
    throw Error(ErrorKind::Separation, "logistic likelihood is unbounded (separated data)");
  }
  if (!fit.converged) {
    throw Error(ErrorKind::NoConvergence, "logistic MLE did not converge in " +
                                              std::to_string(kMleMaxIterations) + " iterations");
  }
  fit.beta = std::move(beta);
  fit.iterations = it;
  fit.residual_norm = score_norm;
  fit.clamp_active = clamped;
  return fit;
}

Eigen::VectorXd cbps_moment(const DesignMatrix& x, const Eigen::VectorXd& d,
                            const Eigen::VectorXd& beta) {
  const Eigen::VectorXd eta = linear_predictor(x, beta);
  Eigen::VectorXd w(eta.size());
  // (d - pi) / (1 - pi) == d - (1 - d) * odds for binary d
  for (Eigen::Index i = 0; i < eta.size(); ++i) {
    w[i] = d[i] == 1.0 ? 1.0 : -logistic::odds(eta[i]);
  }
  return x.x().transpose() * w / static_cast<double>(x.n());
}

Eigen::MatrixXd cbps_jacobian(const DesignMatrix& x, const Eigen::VectorXd& d,
                              const Eigen::VectorXd& beta) {
  const Eigen::VectorXd eta = linear_predictor(x, beta);
  Eigen::VectorXd w(eta.size());
  for (Eigen::Index i = 0; i < eta.size(); ++i) {
    w[i] = d[i] == 1.0 ? 0.0 : logistic::odds(eta[i]);
  }
  return -(x.x().transpose() * w.asDiagonal() * x.x()) / static_cast<double>(x.n());
}

PropensityFit cbps_solve(const DesignMatrix& x, const Eigen::VectorXd& d) {
  require_two_groups(d, x.n());
  PropensityFit fit;
  fit.method = PropensityMethod::CBPS;
  fit.scale = balance_scale(x.x());
  const double tol = kCbpsTolerance * fit.scale;

  std::optional<Eigen::VectorXd> ml_start;
  try {
    ml_start = logistic_mle(x, d).beta;
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::InvalidArgument) throw;
  }

  CbpsAttempt best;
  best.residual = std::numeric_limits<double>::infinity();
  std::vector<Eigen::VectorXd> starts;
  if (ml_start) starts.push_back(*ml_start);
  starts.push_back(Eigen::VectorXd::Zero(x.k()));
  int total_iterations = 0;
  for (const auto& start : starts) {
    CbpsAttempt a = cbps_newton(x, d, start, tol);
    total_iterations += a.iterations;
    if (a.converged || a.residual < best.residual) best = std::move(a);
    if (best.converged) break;
  }
  if (!best.converged) {
    std::ostringstream os;
    os << "balance equations unsolved, final max |g| = " << best.residual << " (tolerance " << tol
       << "); treated covariate means may lie outside what odds-weighted controls can reach";
    throw Error(ErrorKind::NoConvergence, os.str());
  }
  fit.beta = std::move(best.beta);
  fit.converged = true;
  fit.iterations = total_iterations;
  fit.residual_norm = best.residual;
  fit.clamp_active = clamp_hit(linear_predictor(x, fit.beta));
  return fit;
}

}  // namespace cbpsdid
