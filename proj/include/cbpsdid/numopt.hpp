#pragma once

#include "cbpsdid/panel.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <string_view>

namespace cbpsdid {

/// Logistic link pi(v) = exp(v) / (1 + exp(v)). Linear predictors are clamped
/// to [-kMaxLinearPredictor, kMaxLinearPredictor] before evaluation, so the
/// results stay strictly inside (0, 1) and the odds stay finite.
namespace logistic {

inline constexpr double kMaxLinearPredictor = 30.0;

inline double clamp_predictor(double v) {
  return v > kMaxLinearPredictor ? kMaxLinearPredictor
                                 : (v < -kMaxLinearPredictor ? -kMaxLinearPredictor : v);
}

inline double prob(double v) {
  v = clamp_predictor(v);
  return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
}

/// d pi / d v = pi (1 - pi)
inline double deriv(double v) {
  const double p = prob(v);
  return p * (1.0 - p);
}

/// pi / (1 - pi); equals pi_dot / (1 - pi)^2 for this link.
inline double odds(double v) { return std::exp(clamp_predictor(v)); }

/// log(1 + exp(v)) without overflow; no clamp.
inline double log1pexp(double v) {
  return v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
}

}  // namespace logistic

enum class PropensityMethod { ML, CBPS };
std::string_view to_string(PropensityMethod m);

struct PropensityFit {
  Eigen::VectorXd beta;
  PropensityMethod method = PropensityMethod::ML;
  bool converged = false;
  int iterations = 0;
  /// max-abs of the (mean) estimating equation at beta
  double residual_norm = 0.0;
  /// 1 + max-abs column mean of X; tolerances are relative to this
  double scale = 1.0;
  /// some |x'beta| exceeded the link clamp at the solution
  bool clamp_active = false;
};

enum class OutcomeKind { OLS_control, WLS_cbps };
std::string_view to_string(OutcomeKind k);

struct OutcomeFit {
  Eigen::VectorXd gamma;
  OutcomeKind kind = OutcomeKind::OLS_control;
  /// max-abs of X'W(dy - X gamma) and the max-abs entry of X'W X
  double residual_norm = 0.0;
  double scale = 1.0;
};

/// 1 + max_j |mean_i x_ij|
double balance_scale(const Eigen::MatrixXd& x);

Eigen::VectorXd linear_predictor(const DesignMatrix& x, const Eigen::VectorXd& beta);
Eigen::VectorXd fitted_propensity(const DesignMatrix& x, const Eigen::VectorXd& beta);

/// OLS of dy on X among controls (d = 0), via column-pivoted QR.
OutcomeFit ols_control(const DesignMatrix& x, const Eigen::VectorXd& dy, const Eigen::VectorXd& d);

/// Weighted least squares on controls with weights (1-d) pi_dot/(1-pi)^2,
/// i.e. the control odds under beta.
OutcomeFit wls_cbps_gamma(const DesignMatrix& x, const Eigen::VectorXd& dy,
                          const Eigen::VectorXd& d, const Eigen::VectorXd& beta);

// Logistic likelihood pieces, all averaged over units.
double logistic_loglik(const DesignMatrix& x, const Eigen::VectorXd& d, const Eigen::VectorXd& beta);
Eigen::VectorXd logistic_score(const DesignMatrix& x, const Eigen::VectorXd& d,
                               const Eigen::VectorXd& beta);
Eigen::MatrixXd logistic_hessian(const DesignMatrix& x, const Eigen::VectorXd& beta);

/// Newton-Raphson maximum likelihood with step halving. Throws Separation,
/// NoConvergence or RankDeficient.
PropensityFit logistic_mle(const DesignMatrix& x, const Eigen::VectorXd& d);

/// Balance equations g(beta) = mean_i ((d_i - pi_i) / (1 - pi_i)) x_i.
Eigen::VectorXd cbps_moment(const DesignMatrix& x, const Eigen::VectorXd& d,
                            const Eigen::VectorXd& beta);
/// dg/dbeta = -mean_i (1 - d_i) odds_i x_i x_i'.
Eigen::MatrixXd cbps_jacobian(const DesignMatrix& x, const Eigen::VectorXd& d,
                              const Eigen::VectorXd& beta);

/// Exact-balance propensity fit: damped Newton on g(beta) = 0 started from
/// the ML fit (or zero when that fails). Throws NoConvergence when the
/// treated covariate means cannot be matched by odds-weighted controls.
PropensityFit cbps_solve(const DesignMatrix& x, const Eigen::VectorXd& d);

/// Throws InvalidArgument unless d is 0/1 of matching length with both
/// groups present.
void require_two_groups(const Eigen::VectorXd& d, Eigen::Index n);

}  // namespace cbpsdid
