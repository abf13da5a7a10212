#pragma once

// Restricted cubic spline basis with three knots, plus the degenerate
// linear-only basis used after a nonlinearity test fails to reject.
//
// With knots t1 < t2 < t3 the basis is
//   f1(x) = x
//   f2(x) = (x-t1)+^3 - (x-t2)+^3 (t3-t1)/(t3-t2) + (x-t3)+^3 (t2-t1)/(t3-t2)
// where (u)+ = max(u, 0).  The cubic and quadratic terms cancel beyond t3,
// so f2 is identically zero below t1 and exactly linear above t3.

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <boost/math/distributions/normal.hpp>

#include "pooledspline/errors.hpp"

namespace pooledspline {

enum class BasisKind { restricted_cubic_3knot, linear_only };

struct SplineBasis {
  std::vector<double> knots;  // strictly increasing; empty for linear_only
  BasisKind kind = BasisKind::restricted_cubic_3knot;

  int dim() const {
    return kind == BasisKind::restricted_cubic_3knot ? 2 : 1;
  }

  void validate() const {
    if (kind == BasisKind::linear_only) return;
    if (knots.size() < 3)
      throw ConfigError("restricted cubic basis requires 3 knots, got " +
                        std::to_string(knots.size()));
    for (std::size_t i = 1; i < knots.size(); ++i)
      if (!(knots[i - 1] < knots[i]))
        throw ConfigError("spline knots must be strictly increasing");
  }
};

inline double pos_part_cubed(double u) {
  return u > 0.0 ? u * u * u : 0.0;
}

// f2 for the 3-knot restricted cubic basis.
inline double rcs3_nonlinear_term(const std::vector<double>& t, double x) {
  const double r31 = (t[2] - t[0]) / (t[2] - t[1]);
  const double r21 = (t[1] - t[0]) / (t[2] - t[1]);
  return pos_part_cubed(x - t[0]) - pos_part_cubed(x - t[1]) * r31 +
         pos_part_cubed(x - t[2]) * r21;
}

// d f2 / dx, needed for calibration-uncertainty propagation.
inline double rcs3_nonlinear_deriv(const std::vector<double>& t, double x) {
  const double r31 = (t[2] - t[0]) / (t[2] - t[1]);
  const double r21 = (t[1] - t[0]) / (t[2] - t[1]);
  auto sq = [](double u) { return u > 0.0 ? 3.0 * u * u : 0.0; };
  return sq(x - t[0]) - sq(x - t[1]) * r31 + sq(x - t[2]) * r21;
}

inline Eigen::VectorXd eval_basis(const SplineBasis& basis, double x) {
  Eigen::VectorXd out(basis.dim());
  out[0] = x;
  if (basis.kind == BasisKind::restricted_cubic_3knot)
    out[1] = rcs3_nonlinear_term(basis.knots, x);
  return out;
}

inline Eigen::VectorXd eval_basis_deriv(const SplineBasis& basis, double x) {
  Eigen::VectorXd out(basis.dim());
  out[0] = 1.0;
  if (basis.kind == BasisKind::restricted_cubic_3knot)
    out[1] = rcs3_nonlinear_deriv(basis.knots, x);
  return out;
}

// Linear-interpolation quantile of a sample (the "type 7" rule used by
// most statistical software).  `p` must lie in (0, 1).
inline double sample_quantile(std::vector<double> values, double p) {
  if (values.empty()) throw DataError("quantile of empty sample");
  std::sort(values.begin(), values.end());
  const double h = (static_cast<double>(values.size()) - 1.0) * p;
  const std::size_t lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

// Knots at empirical quantiles of `values`.  Degenerate samples produce
// colliding knots, which is an error naming the offending quantiles.
inline SplineBasis make_basis(const std::vector<double>& values,
                              const std::vector<double>& quantiles) {
  if (values.empty()) throw DataError("make_basis: no values supplied");
  if (quantiles.size() < 3)
    throw ConfigError("make_basis: need at least 3 quantiles");
  for (std::size_t i = 0; i < quantiles.size(); ++i) {
    if (!(quantiles[i] > 0.0 && quantiles[i] < 1.0))
      throw ConfigError("make_basis: quantiles must lie in (0,1)");
    if (i > 0 && !(quantiles[i - 1] < quantiles[i]))
      throw ConfigError("make_basis: quantiles must be strictly increasing");
  }
  SplineBasis basis;
  basis.kind = BasisKind::restricted_cubic_3knot;
  for (double p : quantiles) basis.knots.push_back(sample_quantile(values, p));
  for (std::size_t i = 1; i < basis.knots.size(); ++i) {
    if (!(basis.knots[i - 1] < basis.knots[i])) {
      std::ostringstream msg;
      msg << "make_basis: quantiles " << quantiles[i - 1] << " and "
          << quantiles[i] << " collide at knot value " << basis.knots[i]
          << " (degenerate value distribution)";
      throw DataError(msg.str());
    }
  }
  return basis;
}

inline SplineBasis make_linear_basis() {
  SplineBasis basis;
  basis.kind = BasisKind::linear_only;
  return basis;
}

// Standard normal quantile.
inline double standard_normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0))
    throw ConfigError("standard_normal_quantile: p must lie in (0,1)");
  return boost::math::quantile(boost::math::normal_distribution<double>(), p);
}

// Knots at theoretical N(0,1) quantiles, as used by the simulation design.
inline SplineBasis make_normal_quantile_basis(
    const std::vector<double>& quantiles) {
  SplineBasis basis;
  basis.kind = BasisKind::restricted_cubic_3knot;
  for (double p : quantiles)
    basis.knots.push_back(standard_normal_quantile(p));
  basis.validate();
  return basis;
}

}  // namespace pooledspline
