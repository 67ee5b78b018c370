#include "cbpsdid/estimators.hpp"

#include "cbpsdid/error.hpp"

#include <algorithm>
#include <cctype>
#include <string>

namespace cbpsdid {

namespace {

void check_inputs(const DesignMatrix& x, const Eigen::VectorXd& dy, const Eigen::VectorXd& d) {
  if (dy.size() != x.n()) throw Error(ErrorKind::InvalidArgument, "dy length mismatch");
  if (!dy.allFinite()) throw Error(ErrorKind::NonFiniteValue, "dy contains non-finite values");
  require_two_groups(d, x.n());
}

Eigen::VectorXd control_odds(const DesignMatrix& x, const Eigen::VectorXd& d,
                             const Eigen::VectorXd& beta) {
  const Eigen::VectorXd eta = linear_predictor(x, beta);
  Eigen::VectorXd w(eta.size());
  for (Eigen::Index i = 0; i < eta.size(); ++i) w[i] = d[i] == 1.0 ? 0.0 : logistic::odds(eta[i]);
  return w;
}

// (d - pi) / (1 - pi) written as d - (1 - d) odds
Eigen::VectorXd balancing_weight(const DesignMatrix& x, const Eigen::VectorXd& d,
                                 const Eigen::VectorXd& beta) {
  return d - control_odds(x, d, beta);
}

void finish(AttResult& r, Eigen::Index n) {
  r.asy_var = std::max(0.0, r.asy_var);
  r.se = std::sqrt(r.asy_var / static_cast<double>(n));
  r.ci_low = r.tau - kCriticalValue * r.se;
  r.ci_high = r.tau + kCriticalValue * r.se;
}

double mean_square(const Eigen::VectorXd& v) { return v.squaredNorm() / static_cast<double>(v.size()); }

}  // namespace

std::string_view to_string(Method m) {
  switch (m) {
    case Method::OR: return "OR";
    case Method::IPW: return "IPW";
    case Method::AIPW: return "AIPW";
    case Method::CBPS: return "CBPS";
  }
  return "?";
}

std::optional<Method> parse_method(std::string_view s) {
  std::string lower(s);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (lower == "or") return Method::OR;
  if (lower == "ipw") return Method::IPW;
  if (lower == "aipw") return Method::AIPW;
  if (lower == "cbps") return Method::CBPS;
  return std::nullopt;
}

SandwichResult sandwich_variance(const MomentStack& stack, const Eigen::VectorXd& theta_hat) {
  const Eigen::MatrixXd psi = stack.moments(theta_hat);
  const Eigen::MatrixXd g = stack.jacobian(theta_hat);
  if (g.rows() != g.cols() || g.cols() != theta_hat.size() || psi.cols() != g.rows()) {
    throw Error(ErrorKind::InvalidArgument, "moment stack must be just-identified");
  }
  if (stack.target < 0 || stack.target >= theta_hat.size()) {
    throw Error(ErrorKind::InvalidArgument, "target index out of range");
  }
  Eigen::FullPivLU<Eigen::MatrixXd> lu(g);
  if (!lu.isInvertible()) throw Error(ErrorKind::SingularJacobian, "moment Jacobian is singular");
  const Eigen::MatrixXd g_inv = lu.inverse();
  const auto n = static_cast<double>(psi.rows());
  const Eigen::MatrixXd omega = psi.transpose() * psi / n;

  SandwichResult out;
  out.covariance = g_inv * omega * g_inv.transpose();
  out.variance = out.covariance(stack.target, stack.target);
  out.influence = -psi * g_inv.row(stack.target).transpose();
  return out;
}

MomentStack or_moment_stack(const DesignMatrix& design, const Eigen::VectorXd& dy,
                            const Eigen::VectorXd& d) {
  const Eigen::MatrixXd& x = design.x();
  const Eigen::Index k = x.cols();
  MomentStack s;
  s.target = k + 1;
  s.moments = [&x, &dy, &d, k](const Eigen::VectorXd& theta) {
    const auto gamma = theta.head(k);
    const double p = theta[k], tau = theta[k + 1];
    const Eigen::VectorXd resid = dy - x * gamma;
    Eigen::MatrixXd psi(x.rows(), k + 2);
    psi.leftCols(k) = ((1.0 - d.array()) * resid.array()).matrix().asDiagonal() * x;
    psi.col(k) = d.array() - p;
    psi.col(k + 1) = d.array() / p * (resid.array() - tau);
    return psi;
  };
  s.jacobian = [&x, &dy, &d, k](const Eigen::VectorXd& theta) {
    const auto gamma = theta.head(k);
    const double p = theta[k], tau = theta[k + 1];
    const auto n = static_cast<double>(x.rows());
    const Eigen::VectorXd ctrl = 1.0 - d.array();
    const Eigen::VectorXd resid = dy - x * gamma;
    Eigen::MatrixXd g = Eigen::MatrixXd::Zero(k + 2, k + 2);
    g.topLeftCorner(k, k) = -(x.transpose() * ctrl.asDiagonal() * x) / n;
    g(k, k) = -1.0;
    g.block(k + 1, 0, 1, k) = -(d.transpose() * x) / (p * n);
    g(k + 1, k) = -(d.array() * (resid.array() - tau)).sum() / (p * p * n);
    g(k + 1, k + 1) = -d.sum() / (p * n);
    return g;
  };
  return s;
}

MomentStack ipw_moment_stack(const DesignMatrix& design, const Eigen::VectorXd& dy,
                             const Eigen::VectorXd& d) {
  const Eigen::MatrixXd& x = design.x();
  const Eigen::Index k = x.cols();
  MomentStack s;
  s.target = k + 1;
  s.moments = [&design, &dy, &d, k](const Eigen::VectorXd& theta) {
    const Eigen::MatrixXd& x = design.x();
    const Eigen::VectorXd beta = theta.head(k);
    const double p = theta[k], tau = theta[k + 1];
    const Eigen::VectorXd pi = fitted_propensity(design, beta);
    const Eigen::VectorXd w = balancing_weight(design, d, beta);
    Eigen::MatrixXd psi(x.rows(), k + 2);
    psi.leftCols(k) = (d - pi).asDiagonal() * x;
    psi.col(k) = d.array() - p;
    psi.col(k + 1) = (w.array() * dy.array() - d.array() * tau) / p;
    return psi;
  };
  s.jacobian = [&design, &dy, &d, k](const Eigen::VectorXd& theta) {
    const Eigen::MatrixXd& x = design.x();
    const Eigen::VectorXd beta = theta.head(k);
    const double p = theta[k], tau = theta[k + 1];
    const auto n = static_cast<double>(x.rows());
    const Eigen::VectorXd w = balancing_weight(design, d, beta);
    const Eigen::VectorXd odds = control_odds(design, d, beta);
    Eigen::MatrixXd g = Eigen::MatrixXd::Zero(k + 2, k + 2);
    g.topLeftCorner(k, k) = logistic_hessian(design, beta);
    g(k, k) = -1.0;
    g.block(k + 1, 0, 1, k) = -((odds.array() * dy.array()).matrix().transpose() * x) / (p * n);
    g(k + 1, k) = -(w.array() * dy.array() - d.array() * tau).sum() / (p * p * n);
    g(k + 1, k + 1) = -d.sum() / (p * n);
    return g;
  };
  return s;
}

MomentStack aipw_moment_stack(const DesignMatrix& design, const Eigen::VectorXd& dy,
                              const Eigen::VectorXd& d) {
  const Eigen::MatrixXd& x = design.x();
  const Eigen::Index k = x.cols();
  MomentStack s;
  s.target = 2 * k + 1;
  s.moments = [&design, &dy, &d, k](const Eigen::VectorXd& theta) {
    const Eigen::MatrixXd& x = design.x();
    const Eigen::VectorXd beta = theta.head(k);
    const auto gamma = theta.segment(k, k);
    const double p = theta[2 * k], tau = theta[2 * k + 1];
    const Eigen::VectorXd pi = fitted_propensity(design, beta);
    const Eigen::VectorXd w = balancing_weight(design, d, beta);
    const Eigen::VectorXd resid = dy - x * gamma;
    Eigen::MatrixXd psi(x.rows(), 2 * k + 2);
    psi.leftCols(k) = (d - pi).asDiagonal() * x;
    psi.middleCols(k, k) = ((1.0 - d.array()) * resid.array()).matrix().asDiagonal() * x;
    psi.col(2 * k) = d.array() - p;
    psi.col(2 * k + 1) = (w.array() * resid.array() - d.array() * tau) / p;
    return psi;
  };
  s.jacobian = [&design, &dy, &d, k](const Eigen::VectorXd& theta) {
    const Eigen::MatrixXd& x = design.x();
    const Eigen::VectorXd beta = theta.head(k);
    const auto gamma = theta.segment(k, k);
    const double p = theta[2 * k], tau = theta[2 * k + 1];
    const auto n = static_cast<double>(x.rows());
    const Eigen::VectorXd w = balancing_weight(design, d, beta);
    const Eigen::VectorXd odds = control_odds(design, d, beta);
    const Eigen::VectorXd ctrl = 1.0 - d.array();
    const Eigen::VectorXd resid = dy - x * gamma;
    const Eigen::Index t = 2 * k + 1;
    Eigen::MatrixXd g = Eigen::MatrixXd::Zero(2 * k + 2, 2 * k + 2);
    g.topLeftCorner(k, k) = logistic_hessian(design, beta);
    g.block(k, k, k, k) = -(x.transpose() * ctrl.asDiagonal() * x) / n;
    g(2 * k, 2 * k) = -1.0;
    g.block(t, 0, 1, k) = -((odds.array() * resid.array()).matrix().transpose() * x) / (p * n);
    g.block(t, k, 1, k) = -(w.transpose() * x) / (p * n);
    g(t, 2 * k) = -(w.array() * resid.array() - d.array() * tau).sum() / (p * p * n);
    g(t, t) = -d.sum() / (p * n);
    return g;
  };
  return s;
}

double weighted_att(const DesignMatrix& x, const Eigen::VectorXd& dy, const Eigen::VectorXd& d,
                    const Eigen::VectorXd& pscore, const Eigen::VectorXd& gamma) {
  const double dbar = d.mean();
  const Eigen::VectorXd resid = dy - x.x() * gamma;
  const Eigen::ArrayXd w = (d.array() - pscore.array()) / (dbar * (1.0 - pscore.array()));
  return (w * resid.array()).mean();
}

Eigen::VectorXd plugin_influence(const DesignMatrix& x, const Eigen::VectorXd& dy,
                                 const Eigen::VectorXd& d, const Eigen::VectorXd& pscore,
                                 const Eigen::VectorXd& gamma, double tau) {
  const double dbar = d.mean();
  const Eigen::VectorXd resid = dy - x.x() * gamma;
  const Eigen::ArrayXd w = (d.array() - pscore.array()) / (dbar * (1.0 - pscore.array()));
  return (w * resid.array() - d.array() / dbar * tau).matrix();
}

AttResult att_or(const DesignMatrix& x, const Eigen::VectorXd& dy, const Eigen::VectorXd& d) {
  check_inputs(x, dy, d);
  AttResult r;
  r.method = Method::OR;
  r.outcome = ols_control(x, dy, d);
  const Eigen::VectorXd& gamma = r.outcome->gamma;
  const Eigen::VectorXd resid = dy - x.x() * gamma;
  r.tau = (d.array() * resid.array()).sum() / d.sum();

  const Eigen::Index k = x.k();
  Eigen::VectorXd theta(k + 2);
  theta << gamma, d.mean(), r.tau;
  const auto sw = sandwich_variance(or_moment_stack(x, dy, d), theta);
  r.asy_var = sw.variance;
  r.influence = sw.influence;
  finish(r, x.n());
  return r;
}

AttResult att_ipw(const DesignMatrix& x, const Eigen::VectorXd& dy, const Eigen::VectorXd& d) {
  check_inputs(x, dy, d);
  AttResult r;
  r.method = Method::IPW;
  r.propensity = logistic_mle(x, d);
  const Eigen::VectorXd& beta = r.propensity->beta;
  r.tau = weighted_att(x, dy, d, fitted_propensity(x, beta), Eigen::VectorXd::Zero(x.k()));

  const Eigen::Index k = x.k();
  Eigen::VectorXd theta(k + 2);
  theta << beta, d.mean(), r.tau;
  const auto sw = sandwich_variance(ipw_moment_stack(x, dy, d), theta);
  r.asy_var = sw.variance;
  r.influence = sw.influence;
  finish(r, x.n());
  return r;
}

AttResult att_aipw(const DesignMatrix& x, const Eigen::VectorXd& dy, const Eigen::VectorXd& d) {
  check_inputs(x, dy, d);
  AttResult r;
  r.method = Method::AIPW;
  r.propensity = logistic_mle(x, d);
  r.outcome = ols_control(x, dy, d);
  const Eigen::VectorXd pscore = fitted_propensity(x, r.propensity->beta);
  r.tau = weighted_att(x, dy, d, pscore, r.outcome->gamma);
  r.influence = plugin_influence(x, dy, d, pscore, r.outcome->gamma, r.tau);
  r.asy_var = mean_square(r.influence);

  const Eigen::Index k = x.k();
  Eigen::VectorXd theta(2 * k + 2);
  theta << r.propensity->beta, r.outcome->gamma, d.mean(), r.tau;
  try {
    r.sandwich_var = sandwich_variance(aipw_moment_stack(x, dy, d), theta).variance;
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::SingularJacobian) throw;
  }
  finish(r, x.n());
  return r;
}

AttResult att_cbps(const DesignMatrix& x, const Eigen::VectorXd& dy, const Eigen::VectorXd& d) {
  check_inputs(x, dy, d);
  AttResult r;
  r.method = Method::CBPS;
  r.propensity = cbps_solve(x, d);
  const Eigen::VectorXd& beta = r.propensity->beta;
  const Eigen::VectorXd pscore = fitted_propensity(x, beta);
  r.tau = weighted_att(x, dy, d, pscore, Eigen::VectorXd::Zero(x.k()));
  r.outcome = wls_cbps_gamma(x, dy, d, beta);
  r.influence = plugin_influence(x, dy, d, pscore, r.outcome->gamma, r.tau);
  r.asy_var = mean_square(r.influence);
  finish(r, x.n());
  return r;
}

AttResult estimate(Method method, const DesignMatrix& x, const Eigen::VectorXd& dy,
                   const Eigen::VectorXd& d) {
  switch (method) {
    case Method::OR: return att_or(x, dy, d);
    case Method::IPW: return att_ipw(x, dy, d);
    case Method::AIPW: return att_aipw(x, dy, d);
    case Method::CBPS: return att_cbps(x, dy, d);
  }
  throw Error(ErrorKind::InvalidArgument, "unknown method");
}

Eigen::VectorXd efficient_influence(const Eigen::VectorXd& oracle_pi, const Eigen::VectorXd& oracle_m,
                                    const Eigen::VectorXd& dy, const Eigen::VectorXd& d, double tau,
                                    double p) {
  const Eigen::Index n = d.size();
  if (oracle_pi.size() != n || oracle_m.size() != n || dy.size() != n) {
    throw Error(ErrorKind::InvalidArgument, "efficient_influence: length mismatch");
  }
  if (!(p > 0.0 && p < 1.0)) throw Error(ErrorKind::InvalidArgument, "p must lie in (0, 1)");
  if (!((oracle_pi.array() > 0.0) && (oracle_pi.array() < 1.0)).all()) {
    throw Error(ErrorKind::InvalidArgument, "oracle propensities must lie in (0, 1)");
  }
  return ((d.array() - oracle_pi.array()) / (p * (1.0 - oracle_pi.array())) *
              (dy.array() - oracle_m.array()) -
          d.array() / p * tau)
      .matrix();
}

}  // namespace cbpsdid
