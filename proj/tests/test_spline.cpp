#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numeric>
#include <vector>

#include "pooledspline/rng.hpp"
#include "pooledspline/spline.hpp"

using namespace pooledspline;

namespace {

// Independent oracle: invert the standard normal CDF by bisection.
double bisect_normal_quantile(double p) {
  double lo = -10.0, hi = 10.0;
  while (hi - lo > 1e-9) {
    const double mid = 0.5 * (lo + hi);
    const double cdf = 0.5 * std::erfc(-mid / std::sqrt(2.0));
    (cdf < p ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

}  // namespace

TEST_CASE("theoretical N(0,1) knots match bisection oracle", "[spline]") {
  const SplineBasis basis = make_normal_quantile_basis({0.25, 0.5, 0.75});
  REQUIRE(basis.knots.size() == 3);
  CHECK_THAT(basis.knots[0],
             Catch::Matchers::WithinAbs(bisect_normal_quantile(0.25), 1e-6));
  CHECK_THAT(basis.knots[1],
             Catch::Matchers::WithinAbs(0.0, 1e-9));
  CHECK_THAT(basis.knots[2],
             Catch::Matchers::WithinAbs(bisect_normal_quantile(0.75), 1e-6));
  CHECK_THAT(basis.knots[0], Catch::Matchers::WithinAbs(-0.6744897501960817,
                                                        1e-12));
}

TEST_CASE("empirical quantile knots on a uniform grid", "[spline]") {
  std::vector<double> values(101);
  std::iota(values.begin(), values.end(), 1.0);  // 1..101
  const SplineBasis basis = make_basis(values, {0.25, 0.5, 0.75});
  CHECK(basis.knots[0] == 26.0);
  CHECK(basis.knots[1] == 51.0);
  CHECK(basis.knots[2] == 76.0);
}

TEST_CASE("degenerate value distribution is rejected", "[spline]") {
  std::vector<double> values(50, 3.25);
  CHECK_THROWS_AS(make_basis(values, {0.25, 0.5, 0.75}), DataError);
  CHECK_THROWS_WITH(make_basis(values, {0.25, 0.5, 0.75}),
                    Catch::Matchers::ContainsSubstring("0.25") &&
                        Catch::Matchers::ContainsSubstring("0.5"));
}

TEST_CASE("quantile preconditions", "[spline]") {
  std::vector<double> values{1.0, 2.0, 3.0};
  CHECK_THROWS_AS(make_basis({}, {0.25, 0.5, 0.75}), DataError);
  CHECK_THROWS_AS(make_basis(values, {0.5, 0.25, 0.75}), ConfigError);
  CHECK_THROWS_AS(make_basis(values, {0.0, 0.5, 0.75}), ConfigError);
}

TEST_CASE("basis evaluation at pinned points", "[spline]") {
  SplineBasis sym = make_normal_quantile_basis({0.25, 0.5, 0.75});
  // At and below t1 the nonlinear term vanishes identically.
  const Eigen::VectorXd at_t1 = eval_basis(sym, sym.knots[0]);
  CHECK(at_t1[0] == sym.knots[0]);
  CHECK(at_t1[1] == 0.0);

  SplineBasis unit;
  unit.kind = BasisKind::restricted_cubic_3knot;
  unit.knots = {-1.0, 0.0, 1.0};
  const Eigen::VectorXd at0 = eval_basis(unit, 0.0);
  CHECK(at0[0] == 0.0);
  CHECK_THAT(at0[1], Catch::Matchers::WithinAbs(1.0, 1e-15));
  // f2(2) = 27 - 8*2 + 1*1 = 12 by direct evaluation of the three terms.
  const Eigen::VectorXd at2 = eval_basis(unit, 2.0);
  CHECK(at2[0] == 2.0);
  CHECK_THAT(at2[1], Catch::Matchers::WithinAbs(12.0, 1e-12));
}

TEST_CASE("f2 vanishes below t1 and is linear beyond t3", "[spline]") {
  const SplineBasis basis = make_normal_quantile_basis({0.25, 0.5, 0.75});
  for (double x = -6.0; x <= basis.knots[0]; x += 0.1)
    CHECK(eval_basis(basis, x)[1] == 0.0);
  // Second differences of f2 on equally spaced points beyond t3 vanish.
  for (double x = basis.knots[2] + 0.2; x < 8.0; x += 0.37) {
    const double h = 0.61;
    const double d2 = eval_basis(basis, x + 2 * h)[1] -
                      2.0 * eval_basis(basis, x + h)[1] +
                      eval_basis(basis, x)[1];
    CHECK_THAT(d2, Catch::Matchers::WithinAbs(0.0, 1e-10));
  }
}

TEST_CASE("value, slope and curvature are continuous at the knots",
          "[spline]") {
  SplineBasis basis;
  basis.kind = BasisKind::restricted_cubic_3knot;
  basis.knots = {-0.9, 0.3, 1.4};
  auto f = [&](double x) { return eval_basis(basis, x)[1]; };
  const double h = 1e-4;
  for (double t : basis.knots) {
    CHECK_THAT(f(t - 1e-9) - f(t + 1e-9),
               Catch::Matchers::WithinAbs(0.0, 1e-7));
    // One-sided second-order stencils straddling the knot.
    const double d1_left = (3 * f(t) - 4 * f(t - h) + f(t - 2 * h)) / (2 * h);
    const double d1_right =
        (-3 * f(t) + 4 * f(t + h) - f(t + 2 * h)) / (2 * h);
    CHECK_THAT(d1_left - d1_right, Catch::Matchers::WithinAbs(0.0, 1e-5));
    const double d2_left =
        (2 * f(t) - 5 * f(t - h) + 4 * f(t - 2 * h) - f(t - 3 * h)) / (h * h);
    const double d2_right =
        (2 * f(t) - 5 * f(t + h) + 4 * f(t + 2 * h) - f(t + 3 * h)) / (h * h);
    CHECK_THAT(d2_left - d2_right, Catch::Matchers::WithinAbs(0.0, 1e-4));
  }
}

TEST_CASE("analytic basis derivative matches central differences",
          "[spline]") {
  SplineBasis basis;
  basis.kind = BasisKind::restricted_cubic_3knot;
  basis.knots = {-0.7, 0.1, 0.9};
  RngStream rng(5, 1);
  for (int i = 0; i < 200; ++i) {
    const double x = 6.0 * rng.uniform() - 3.0;
    const double h = 1e-6;
    const double fd =
        (eval_basis(basis, x + h)[1] - eval_basis(basis, x - h)[1]) / (2 * h);
    CHECK_THAT(eval_basis_deriv(basis, x)[1],
               Catch::Matchers::WithinAbs(fd, 1e-5));
  }
}

TEST_CASE("shifting x and knots together leaves f2 unchanged", "[spline]") {
  SplineBasis basis;
  basis.kind = BasisKind::restricted_cubic_3knot;
  basis.knots = {-0.6744897501960817, 0.0, 0.6744897501960817};
  RngStream rng(11, 0);
  for (int i = 0; i < 200; ++i) {
    const double x = 5.0 * rng.uniform() - 2.5;
    const double c = 10.0 * rng.uniform() - 5.0;
    SplineBasis shifted = basis;
    for (double& t : shifted.knots) t += c;
    const Eigen::VectorXd orig = eval_basis(basis, x);
    const Eigen::VectorXd moved = eval_basis(shifted, x + c);
    CHECK_THAT(moved[1], Catch::Matchers::WithinAbs(orig[1], 1e-10));
    CHECK_THAT(moved[0], Catch::Matchers::WithinAbs(orig[0] + c, 1e-12));
  }
}

TEST_CASE("linear basis has dimension one", "[spline]") {
  const SplineBasis basis = make_linear_basis();
  CHECK(basis.dim() == 1);
  const Eigen::VectorXd v = eval_basis(basis, 2.5);
  REQUIRE(v.size() == 1);
  CHECK(v[0] == 2.5);
}
