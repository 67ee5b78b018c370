#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "cbpsdid/error.hpp"
#include "cbpsdid/estimators.hpp"
#include "test_util.hpp"

#include <numeric>
#include <random>

using namespace cbpsdid;
using cbpsdid::testing::design_of;
using cbpsdid::testing::design_names;
using cbpsdid::testing::random_instance;

namespace {

double group_mean_difference(const Eigen::VectorXd& dy, const Eigen::VectorXd& d) {
  double st = 0.0, sc = 0.0, nt = 0.0, nc = 0.0;
  for (Eigen::Index i = 0; i < d.size(); ++i) {
    if (d[i] == 1.0) {
      st += dy[i];
      nt += 1.0;
    } else {
      sc += dy[i];
      nc += 1.0;
    }
  }
  return st / nt - sc / nc;
}

}  // namespace

TEST_CASE("toy file collapses to the difference in means") {
  const auto x = DesignMatrix::intercept_only(4);
  const Eigen::Vector4d dy(3, 5, 1, 1), d(1, 1, 0, 0);
  for (Method m : kAllMethods) {
    CAPTURE(to_string(m));
    const auto r = estimate(m, x, dy, d);
    CHECK(r.tau == doctest::Approx(3.0).epsilon(1e-14));
  }
}

TEST_CASE("intercept-only collapse on random data") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto inst = random_instance(300, 1, seed);
    const auto x = DesignMatrix::intercept_only(300);
    const double target = group_mean_difference(inst.dy, inst.d);
    for (Method m : kAllMethods) {
      CAPTURE(to_string(m));
      CHECK(std::abs(estimate(m, x, inst.dy, inst.d).tau - target) <= 1e-12 * (1.0 + std::abs(target)));
    }
  }
}

TEST_CASE("OR: perfect fit gives zero") {
  const auto inst = random_instance(40, 3, 9);
  const auto x = design_of(inst);
  Eigen::VectorXd gamma(3);
  gamma << 2.0, -1.0, 0.5;
  const Eigen::VectorXd dy = inst.x * gamma;
  CHECK(std::abs(att_or(x, dy, inst.d).tau) <= 1e-10);
}

TEST_CASE("IPW is not location invariant") {
  const auto inst = random_instance(200, 3, 4);
  const auto x = design_of(inst);
  const Eigen::VectorXd c = Eigen::VectorXd::Constant(200, 7.0);
  const auto r = att_ipw(x, c, inst.d);
  const Eigen::VectorXd pi = fitted_propensity(x, r.propensity->beta);
  const double dbar = inst.d.mean();
  const double expect =
      7.0 * ((inst.d.array() - pi.array()) / (dbar * (1.0 - pi.array()))).mean();
  CHECK(r.tau == doctest::Approx(expect).epsilon(1e-12));
  CHECK(std::abs(r.tau) > 1e-6);
  // CBPS weights balance the intercept, so a constant shift vanishes
  CHECK(std::abs(att_cbps(x, c, inst.d).tau) <= 1e-8);
}

TEST_CASE("AIPW equals IPW minus the weighted fitted regression") {
  const auto inst = random_instance(250, 4, 12);
  const auto x = design_of(inst);
  const auto ipw = att_ipw(x, inst.dy, inst.d);
  const auto aipw = att_aipw(x, inst.dy, inst.d);
  const Eigen::VectorXd pi = fitted_propensity(x, aipw.propensity->beta);
  const Eigen::VectorXd fitted = inst.x * aipw.outcome->gamma;
  const double dbar = inst.d.mean();
  const double correction =
      ((inst.d.array() - pi.array()) / (dbar * (1.0 - pi.array())) * fitted.array()).mean();
  CHECK(aipw.tau == doctest::Approx(ipw.tau - correction).epsilon(1e-10));
  REQUIRE(aipw.sandwich_var.has_value());
  CHECK(*aipw.sandwich_var > 0.0);
}

TEST_CASE("CBPS: any gamma gives the same estimate") {
  std::mt19937_64 rng(77);
  std::normal_distribution<double> normal(0.0, 10.0);
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto inst = random_instance(300, 4, seed);
    const auto x = design_of(inst);
    const auto r = att_cbps(x, inst.dy, inst.d);
    const Eigen::VectorXd pi = fitted_propensity(x, r.propensity->beta);
    for (int rep = 0; rep < 20; ++rep) {
      Eigen::VectorXd g(4);
      for (auto& v : g) v = normal(rng);
      CHECK(std::abs(weighted_att(x, inst.dy, inst.d, pi, g) - r.tau) <= 1e-8);
    }
  }
}

TEST_CASE("CBPS is invariant to adding a linear function to dy") {
  const auto inst = random_instance(400, 3, 21);
  const auto x = design_of(inst);
  Eigen::VectorXd a(3);
  a << 5.0, -3.0, 8.0;
  const Eigen::VectorXd shifted = inst.dy + inst.x * a;
  CHECK(std::abs(att_cbps(x, shifted, inst.d).tau - att_cbps(x, inst.dy, inst.d).tau) <= 1e-8);
  CHECK(std::abs(att_ipw(x, shifted, inst.d).tau - att_ipw(x, inst.dy, inst.d).tau) > 1e-6);
}

TEST_CASE("confidence interval and standard error bookkeeping") {
  const auto inst = random_instance(300, 3, 2);
  const auto x = design_of(inst);
  for (Method m : kAllMethods) {
    CAPTURE(to_string(m));
    const auto r = estimate(m, x, inst.dy, inst.d);
    CHECK(r.se == doctest::Approx(std::sqrt(r.asy_var / 300.0)));
    CHECK(r.ci_low == doctest::Approx(r.tau - 1.96 * r.se));
    CHECK(r.ci_high == doctest::Approx(r.tau + 1.96 * r.se));
    CHECK(r.influence.size() == 300);
    CHECK(r.influence.squaredNorm() / 300.0 == doctest::Approx(r.asy_var).epsilon(1e-9));
  }
}

TEST_CASE("estimates do not depend on row order") {
  const auto inst = random_instance(200, 3, 31);
  std::vector<Eigen::Index> perm(200);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), std::mt19937_64(3));
  Eigen::MatrixXd xp(200, 3);
  Eigen::VectorXd dp(200), yp(200);
  for (Eigen::Index i = 0; i < 200; ++i) {
    xp.row(i) = inst.x.row(perm[static_cast<std::size_t>(i)]);
    dp[i] = inst.d[perm[static_cast<std::size_t>(i)]];
    yp[i] = inst.dy[perm[static_cast<std::size_t>(i)]];
  }
  const auto x = design_of(inst);
  const auto xpd = DesignMatrix::from_matrix(xp, design_names(3));
  for (Method m : kAllMethods) {
    CAPTURE(to_string(m));
    const auto a = estimate(m, x, inst.dy, inst.d);
    const auto b = estimate(m, xpd, yp, dp);
    CHECK(a.tau == doctest::Approx(b.tau).epsilon(1e-10));
    CHECK(a.asy_var == doctest::Approx(b.asy_var).epsilon(1e-8));
  }
}

TEST_CASE("sandwich: Bernoulli moment") {
  Eigen::VectorXd d(10);
  d << 1, 0, 0, 1, 1, 0, 0, 0, 1, 0;
  const double dbar = d.mean();
  MomentStack s;
  s.moments = [&](const Eigen::VectorXd& th) -> Eigen::MatrixXd { return (d.array() - th[0]).matrix(); };
  s.jacobian = [](const Eigen::VectorXd&) -> Eigen::MatrixXd { return -Eigen::MatrixXd::Ones(1, 1); };
  s.target = 0;
  const auto r = sandwich_variance(s, Eigen::VectorXd::Constant(1, dbar));
  CHECK(r.variance == doctest::Approx(dbar * (1.0 - dbar)));
}

TEST_CASE("sandwich: treated mean with known share matches delta method") {
  const auto inst = random_instance(100, 1, 8);
  const Eigen::VectorXd& d = inst.d;
  const Eigen::VectorXd& dy = inst.dy;
  const double p = d.mean();
  double mean_t = 0.0, n1 = d.sum();
  for (Eigen::Index i = 0; i < 100; ++i) mean_t += d[i] * dy[i] / n1;
  double var_t = 0.0;
  for (Eigen::Index i = 0; i < 100; ++i) var_t += d[i] * (dy[i] - mean_t) * (dy[i] - mean_t) / n1;

  MomentStack s;
  s.moments = [&](const Eigen::VectorXd& th) -> Eigen::MatrixXd {
    return (d.array() / p * (dy.array() - th[0])).matrix();
  };
  s.jacobian = [&](const Eigen::VectorXd&) -> Eigen::MatrixXd {
    return Eigen::MatrixXd::Constant(1, 1, -d.mean() / p);
  };
  const auto r = sandwich_variance(s, Eigen::VectorXd::Constant(1, mean_t));
  CHECK(r.variance == doctest::Approx(var_t / p).epsilon(1e-12));
}

TEST_CASE("sandwich: singular Jacobian") {
  MomentStack s;
  s.moments = [](const Eigen::VectorXd&) -> Eigen::MatrixXd { return Eigen::MatrixXd::Ones(5, 2); };
  s.jacobian = [](const Eigen::VectorXd&) -> Eigen::MatrixXd { return Eigen::MatrixXd::Ones(2, 2); };
  s.target = 1;
  try {
    sandwich_variance(s, Eigen::VectorXd::Zero(2));
    FAIL("expected SingularJacobian");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::SingularJacobian);
  }
}

TEST_CASE("efficient influence at zero residual") {
  const Eigen::Vector2d pi(0.3, 0.6), m(2.0, -1.0), dy(2.0, -1.0), d(1.0, 0.0);
  const Eigen::VectorXd eta = efficient_influence(pi, m, dy, d, 0.0, 0.5);
  CHECK(eta[0] == 0.0);
  CHECK(eta[1] == 0.0);

  const Eigen::VectorXd eta2 = efficient_influence(pi, m, Eigen::Vector2d(3.0, 1.0), d, 0.5, 0.4);
  CHECK(eta2[0] == doctest::Approx(0.7 / (0.4 * 0.7) * 1.0 - 0.5 / 0.4));
  CHECK(eta2[1] == doctest::Approx(-0.6 / (0.4 * 0.4) * 2.0));

  CHECK_THROWS_AS(efficient_influence(Eigen::Vector2d(1.0, 0.5), m, dy, d, 0.0, 0.5), Error);
  CHECK_THROWS_AS(efficient_influence(pi, m, dy, d, 0.0, 1.0), Error);
}

TEST_CASE("method names") {
  CHECK(parse_method("CbPs") == Method::CBPS);
  CHECK(parse_method("ipw") == Method::IPW);
  CHECK_FALSE(parse_method("ols").has_value());
  CHECK(to_string(Method::AIPW) == "AIPW");
}

TEST_CASE("estimator preconditions") {
  const auto x = DesignMatrix::intercept_only(3);
  CHECK_THROWS_AS(att_or(x, Eigen::Vector2d(1, 2), Eigen::Vector3d(1, 0, 0)), Error);
  Eigen::Vector3d dy(1, std::numeric_limits<double>::infinity(), 0);
  CHECK_THROWS_AS(att_cbps(x, dy, Eigen::Vector3d(1, 0, 0)), Error);
}
