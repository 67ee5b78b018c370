#pragma once

#include "cbpsdid/numopt.hpp"
#include "cbpsdid/panel.hpp"

#include <Eigen/Dense>

#include <functional>
#include <optional>
#include <string_view>

namespace cbpsdid {

enum class Method { OR, IPW, AIPW, CBPS };
std::string_view to_string(Method m);
/// Accepts "or", "ipw", "aipw", "cbps" in any case.
std::optional<Method> parse_method(std::string_view s);
inline constexpr Method kAllMethods[] = {Method::IPW, Method::OR, Method::AIPW, Method::CBPS};

/// Normal critical value for the 95% interval.
inline constexpr double kCriticalValue = 1.96;

struct AttResult {
  Method method = Method::OR;
  double tau = 0.0;
  /// estimate of the variance of sqrt(n) (tau_hat - tau)
  double asy_var = 0.0;
  double se = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  /// per-unit estimated influence values; asy_var is their mean square
  Eigen::VectorXd influence;
  std::optional<PropensityFit> propensity;
  std::optional<OutcomeFit> outcome;
  /// AIPW only: stacked-moment sandwich variance, reported for comparison
  std::optional<double> sandwich_var;
};

/// Just-identified stack of estimating equations psi(theta), one row per
/// unit. `jacobian` returns the analytic sample mean of d psi / d theta.
struct MomentStack {
  std::function<Eigen::MatrixXd(const Eigen::VectorXd&)> moments;   // n x m
  std::function<Eigen::MatrixXd(const Eigen::VectorXd&)> jacobian;  // m x m
  Eigen::Index target = 0;  // position of tau in theta
};

struct SandwichResult {
  double variance = 0.0;     // (target, target) entry of G^-1 Omega G^-T
  Eigen::MatrixXd covariance;
  Eigen::VectorXd influence;  // target row of -G^-1 psi_i
};

/// V = G^-1 Omega G^-T with G the mean Jacobian and Omega the mean outer
/// product of the moments, both at theta_hat. Throws SingularJacobian.
SandwichResult sandwich_variance(const MomentStack& stack, const Eigen::VectorXd& theta_hat);

// Moment stacks behind the OR, IPW and AIPW variances. They hold references
// to x, dy and d and must not outlive them. Parameter layouts:
//   OR:   (gamma[k], p, tau)  controls' normal equations, d - p, (d/p)(dy - x'gamma - tau)
//   IPW:  (beta[k],  p, tau)  logistic score, d - p, (d-pi)/(p(1-pi)) dy - (d/p) tau
//   AIPW: (beta[k], gamma[k], p, tau)  score, normal equations, d - p,
//         (d-pi)/(p(1-pi)) (dy - x'gamma) - (d/p) tau
MomentStack or_moment_stack(const DesignMatrix& x, const Eigen::VectorXd& dy, const Eigen::VectorXd& d);
MomentStack ipw_moment_stack(const DesignMatrix& x, const Eigen::VectorXd& dy, const Eigen::VectorXd& d);
MomentStack aipw_moment_stack(const DesignMatrix& x, const Eigen::VectorXd& dy,
                              const Eigen::VectorXd& d);

/// mean_i (d_i - pi_i) / (dbar (1 - pi_i)) (dy_i - x_i' gamma)
///
/// With gamma = 0 this is the IPW / CBPS point estimate; with an arbitrary
/// gamma and CBPS propensities it equals the CBPS estimate because balance
/// annihilates the x'gamma term.
double weighted_att(const DesignMatrix& x, const Eigen::VectorXd& dy, const Eigen::VectorXd& d,
                    const Eigen::VectorXd& pscore, const Eigen::VectorXd& gamma);

/// Plug-in influence values (d-pi)/(dbar(1-pi)) (dy - x'gamma) - (d/dbar) tau.
Eigen::VectorXd plugin_influence(const DesignMatrix& x, const Eigen::VectorXd& dy,
                                 const Eigen::VectorXd& d, const Eigen::VectorXd& pscore,
                                 const Eigen::VectorXd& gamma, double tau);

AttResult att_or(const DesignMatrix& x, const Eigen::VectorXd& dy, const Eigen::VectorXd& d);
AttResult att_ipw(const DesignMatrix& x, const Eigen::VectorXd& dy, const Eigen::VectorXd& d);
AttResult att_aipw(const DesignMatrix& x, const Eigen::VectorXd& dy, const Eigen::VectorXd& d);
AttResult att_cbps(const DesignMatrix& x, const Eigen::VectorXd& dy, const Eigen::VectorXd& d);

AttResult estimate(Method method, const DesignMatrix& x, const Eigen::VectorXd& dy,
                   const Eigen::VectorXd& d);

/// Efficient influence values under known nuisances:
///   (d - pi)/(p (1 - pi)) (dy - m) - (d / p) tau
Eigen::VectorXd efficient_influence(const Eigen::VectorXd& oracle_pi, const Eigen::VectorXd& oracle_m,
                                    const Eigen::VectorXd& dy, const Eigen::VectorXd& d, double tau,
                                    double p);

}  // namespace cbpsdid
