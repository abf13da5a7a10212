#pragma once

// Variance estimation and reporting for the two-step pooled analysis.
//
// The parameter stack is theta = (a_1, b_1, ..., a_Q, b_Q, beta) over the Q
// studies with calibration models.  Estimating functions:
//   psi_a, psi_b  OLS normal-equation residuals of each calibration control
//   psi_beta      conditional-logistic stratum scores at X~(a, b)
// The sandwich is V = A^{-1} B A^{-T} with
//   A = -sum d(psi)/d(theta)   (block triangular: the calibration equations
//                               do not involve beta; the beta score moves
//                               with (a, b) through X~ = a + b W)
//   B = sum over strata of psi_cluster psi_cluster', where a calibration
//       control's (psi_a, psi_b) joins its stratum's cluster vector.
//
// Without calibration blocks (naive strategy, or all studies on the
// reference laboratory) the variance is the plain inverse observed
// information, flagged as model-based.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/normal.hpp>

#include "pooledspline/calibration.hpp"
#include "pooledspline/data.hpp"
#include "pooledspline/errors.hpp"
#include "pooledspline/likelihood.hpp"
#include "pooledspline/spline.hpp"

namespace pooledspline {

inline double z_975() {
  static const double z = boost::math::quantile(
      boost::math::normal_distribution<double>(), 0.975);
  return z;
}

inline double chi_squared_pvalue(double statistic, int df) {
  if (statistic <= 0.0) return 1.0;
  return boost::math::cdf(
      boost::math::complement(boost::math::chi_squared_distribution<double>(df),
                              statistic));
}

struct WaldTest {
  std::string label;
  std::vector<int> terms;  // indices into the flattened (beta_x, beta_z)
  double statistic = 0.0;
  int df = 0;
  double p_value = 1.0;
};

struct SandwichOptions {
  // Optional G/(G-1) small-sample inflation of the meat matrix (G = number
  // of cluster units).  Off by default; plain 95% intervals otherwise.
  bool cluster_inflation = false;
};

struct SandwichVcov {
  Eigen::MatrixXd vcov_theta;  // full (2Q + K + P) covariance; empty if model based
  Eigen::MatrixXd vcov_beta;   // (K+P) block
  bool model_based = false;    // true when no calibration blocks exist
  std::vector<int> calibration_studies;  // study index per (a, b) block
  Eigen::MatrixXd bread;       // A = -sum d(psi)/d(theta); empty if model based
  Eigen::MatrixXd meat;        // B = sum psi psi'; empty if model based
};

namespace detail {

// Does subject `sub` of a local-lab study have X~ depending on (a_s, b_s)?
inline bool xtilde_depends_on_calibration(const Subject& sub,
                                          CalibrationStrategy strategy) {
  switch (strategy) {
    case CalibrationStrategy::naive: return false;
    case CalibrationStrategy::full: return true;
    case CalibrationStrategy::internalized: return !sub.x_ref.has_value();
  }
  return false;
}

inline Eigen::MatrixXd observed_information(const PooledDataset& data,
                                            const SplineBasis& basis,
                                            const ModelCoefficients& coef,
                                            const SolverControls& controls) {
  const Eigen::VectorXd theta = coef.flat();
  Eigen::MatrixXd info = Eigen::MatrixXd::Zero(theta.size(), theta.size());
  const int p = data.confounder_count();
  for (const auto& st : data.strata) {
    if (!st.informative()) continue;
    const StratumDesign d = build_design(st, basis, p);
    const StratumMoments m =
        stratum_moments(design_eta(d, theta), d.case_idx, controls);
    info -= hessian_from_moments(d, m);
  }
  return info;
}

}  // namespace detail

// Stacked estimating-equation sandwich covariance of theta-hat, evaluated at
// the two-step estimates.  `data` must already carry X~ under `strategy`.
inline SandwichVcov sandwich_vcov(
    const PooledDataset& data, const SplineBasis& basis,
    const std::vector<std::optional<CalibrationFit>>& fits,
    CalibrationStrategy strategy, const ModelCoefficients& coef,
    const SolverControls& controls = {}, const SandwichOptions& options = {}) {
  if (fits.size() != data.studies.size())
    throw DataError("sandwich_vcov: fits vector does not match study count");
  const int dim = coef.dim();
  const Eigen::VectorXd theta = coef.flat();
  const int p = data.confounder_count();

  // Map study index -> (a, b) block, when the block exists.
  std::vector<int> block_of_study(data.studies.size(), -1);
  std::vector<int> cal_studies;
  if (strategy != CalibrationStrategy::naive) {
    for (std::size_t s = 0; s < data.studies.size(); ++s) {
      if (data.studies[s].is_reference_lab || !fits[s]) continue;
      block_of_study[s] = static_cast<int>(cal_studies.size());
      cal_studies.push_back(static_cast<int>(s));
    }
  }
  const int q = static_cast<int>(cal_studies.size());

  SandwichVcov out;
  out.calibration_studies = cal_studies;
  if (q == 0) {
    // No calibration parameters: plain inverse observed information.
    const Eigen::MatrixXd info =
        detail::observed_information(data, basis, coef, controls);
    Eigen::FullPivLU<Eigen::MatrixXd> lu(info);
    if (!lu.isInvertible())
      throw SingularError("sandwich_vcov: observed information is singular");
    out.vcov_beta = lu.inverse();
    out.vcov_beta = 0.5 * (out.vcov_beta + out.vcov_beta.transpose()).eval();
    out.model_based = true;
    return out;
  }

  const int full_dim = 2 * q + dim;
  Eigen::MatrixXd bread = Eigen::MatrixXd::Zero(full_dim, full_dim);
  Eigen::MatrixXd meat = Eigen::MatrixXd::Zero(full_dim, full_dim);
  int n_clusters = 0;

  Eigen::VectorXd cluster = Eigen::VectorXd::Zero(full_dim);
  for (const auto& st : data.strata) {
    cluster.setZero();
    bool has_contribution = false;

    if (st.informative()) {
      const StratumDesign d = build_design(st, basis, p);
      const StratumMoments m =
          stratum_moments(design_eta(d, theta), d.case_idx, controls);
      cluster.tail(dim) = score_from_moments(d, m);
      bread.bottomRightCorner(dim, dim) -= hessian_from_moments(d, m);
      has_contribution = true;

      // Cross block: the stratum score moves with (a_s, b_s) through the
      // calibrated values of dependent subjects.
      const int blk = block_of_study[st.study];
      if (blk >= 0 && !data.studies[st.study].is_reference_lab) {
        for (int i = 0; i < static_cast<int>(st.subjects.size()); ++i) {
          const Subject& sub = st.subjects[i];
          if (!detail::xtilde_depends_on_calibration(sub, strategy)) continue;
          const Eigen::VectorXd ds = dscore_dxtilde(d, m, basis, theta, i);
          bread.block(2 * q, 2 * blk, dim, 1) -= ds;          // d/d a_s
          bread.block(2 * q, 2 * blk + 1, dim, 1) -= ds * *sub.w;  // d/d b_s
        }
      }
    }

    // Calibration residual contributions of this stratum's controls.
    const int blk = block_of_study[st.study];
    if (blk >= 0) {
      const CalibrationFit& fit = *fits[st.study];
      for (const auto& sub : st.subjects) {
        if (!(sub.in_calibration_subset && sub.y == 0 && sub.w && sub.x_ref))
          continue;
        const double w = *sub.w;
        const double r = *sub.x_ref - fit.a_hat - fit.b_hat * w;
        cluster[2 * blk] += r;
        cluster[2 * blk + 1] += w * r;
        bread(2 * blk, 2 * blk) += 1.0;
        bread(2 * blk, 2 * blk + 1) += w;
        bread(2 * blk + 1, 2 * blk) += w;
        bread(2 * blk + 1, 2 * blk + 1) += w * w;
        has_contribution = true;
      }
    }

    if (has_contribution) {
      meat.noalias() += cluster * cluster.transpose();
      ++n_clusters;
    }
  }

  if (options.cluster_inflation && n_clusters > 1)
    meat *= static_cast<double>(n_clusters) / (n_clusters - 1);

  Eigen::FullPivLU<Eigen::MatrixXd> lu(bread);
  if (!lu.isInvertible())
    throw SingularError("sandwich_vcov: bread matrix A is singular");
  const Eigen::MatrixXd a_inv = lu.inverse();
  Eigen::MatrixXd vcov = a_inv * meat * a_inv.transpose();
  vcov = 0.5 * (vcov + vcov.transpose()).eval();

  out.vcov_theta = vcov;
  out.vcov_beta = vcov.bottomRightCorner(dim, dim);
  out.model_based = false;
  out.bread = bread;
  out.meat = meat;
  return out;
}

// ---------------------------------------------------------------------------
// Wald tests and the dose-response curve
// ---------------------------------------------------------------------------

inline WaldTest wald_test(const Eigen::VectorXd& coef_flat,
                          const Eigen::MatrixXd& vcov,
                          const std::vector<int>& terms,
                          const std::string& label = "") {
  const int s = static_cast<int>(terms.size());
  if (s == 0) throw ConfigError("wald_test: empty term set");
  Eigen::VectorXd beta_s(s);
  Eigen::MatrixXd v_ss(s, s);
  for (int i = 0; i < s; ++i) {
    if (terms[i] < 0 || terms[i] >= coef_flat.size())
      throw ConfigError("wald_test: term index out of range");
    beta_s[i] = coef_flat[terms[i]];
    for (int j = 0; j < s; ++j) v_ss(i, j) = vcov(terms[i], terms[j]);
  }
  Eigen::FullPivLU<Eigen::MatrixXd> lu(v_ss);
  if (!lu.isInvertible())
    throw SingularError("wald_test: covariance block is singular");
  WaldTest test;
  test.label = label;
  test.terms = terms;
  test.statistic = beta_s.dot(lu.solve(beta_s));
  test.df = s;
  test.p_value = chi_squared_pvalue(test.statistic, s);
  return test;
}

struct CurvePoint {
  double x = 0.0;
  double log_rr = 0.0;
  double lo95 = 0.0;
  double hi95 = 0.0;
};

// log RR(x vs x_ref) = beta_x' (f(x) - f(x_ref)) with delta-method pointwise
// 95% confidence bands.
inline std::vector<CurvePoint> log_rr_curve(const ModelCoefficients& coef,
                                            const Eigen::MatrixXd& vcov_beta,
                                            const SplineBasis& basis,
                                            const std::vector<double>& grid,
                                            double x_ref) {
  if (!std::isfinite(x_ref))
    throw ConfigError("log_rr_curve: reference level must be finite");
  const int k = basis.dim();
  const Eigen::VectorXd f_ref = eval_basis(basis, x_ref);
  const Eigen::MatrixXd v_xx = vcov_beta.topLeftCorner(k, k);
  std::vector<CurvePoint> out;
  out.reserve(grid.size());
  for (double x : grid) {
    const Eigen::VectorXd g = eval_basis(basis, x) - f_ref;
    CurvePoint pt;
    pt.x = x;
    pt.log_rr = coef.beta_x.dot(g);
    const double var = g.dot(v_xx * g);
    const double hw = z_975() * std::sqrt(std::max(var, 0.0));
    pt.lo95 = pt.log_rr - hw;
    pt.hi95 = pt.log_rr + hw;
    out.push_back(pt);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Full two-step analysis
// ---------------------------------------------------------------------------

struct FitResult {
  ModelCoefficients coef;
  Eigen::MatrixXd vcov_beta;
  bool vcov_model_based = false;
  Eigen::MatrixXd vcov_theta;  // empty when model based
  std::vector<std::optional<CalibrationFit>> calibration_fits;
  CalibrationStrategy strategy = CalibrationStrategy::full;
  SplineBasis basis;
  std::vector<WaldTest> wald;
  ConvergenceReport convergence;

  double se(int term) const { return std::sqrt(vcov_beta(term, term)); }
};

inline std::vector<std::string> coefficient_names(const SplineBasis& basis,
                                                  int p) {
  std::vector<std::string> names;
  names.push_back("x_f1");
  if (basis.dim() == 2) names.push_back("x_f2");
  for (int j = 1; j <= p; ++j) names.push_back("z_" + std::to_string(j));
  return names;
}

// Analysis core on an already-calibrated dataset: maximize the conditional
// likelihood, then propagate calibration uncertainty through the stacked
// sandwich and attach the Wald tests.
inline FitResult analyze_calibrated(
    const PooledDataset& calibrated, const SplineBasis& basis,
    const std::vector<std::optional<CalibrationFit>>& fits,
    CalibrationStrategy strategy, const SolverControls& controls = {},
    const SandwichOptions& options = {}) {
  const MatchedFit mf = fit_matched_likelihood(calibrated, basis, {}, controls);
  const SandwichVcov sw =
      sandwich_vcov(calibrated, basis, fits, strategy, mf.coef, controls,
                    options);

  FitResult result;
  result.coef = mf.coef;
  result.vcov_beta = sw.vcov_beta;
  result.vcov_model_based = sw.model_based;
  result.vcov_theta = sw.vcov_theta;
  result.calibration_fits = fits;
  result.strategy = strategy;
  result.basis = basis;
  result.convergence = mf.report;

  const Eigen::VectorXd flat = mf.coef.flat();
  const auto names = coefficient_names(basis, static_cast<int>(
                                                  mf.coef.beta_z.size()));
  for (int i = 0; i < flat.size(); ++i)
    result.wald.push_back(wald_test(flat, sw.vcov_beta, {i}, names[i]));
  const int k = basis.dim();
  if (k == 2) {
    result.wald.push_back(wald_test(flat, sw.vcov_beta, {1}, "nonlinearity"));
    result.wald.push_back(
        wald_test(flat, sw.vcov_beta, {0, 1}, "biomarker_joint"));
  }
  return result;
}

// Two-step pooled analysis: fit calibrations among calibration-subset
// controls, calibrate, then run the analysis core.
inline FitResult run_analysis(const PooledDataset& data,
                              const SplineBasis& basis,
                              CalibrationStrategy strategy,
                              const SolverControls& controls = {},
                              const SandwichOptions& options = {}) {
  std::vector<std::optional<CalibrationFit>> fits(data.studies.size());
  if (strategy != CalibrationStrategy::naive) fits = fit_all_calibrations(data);
  const PooledDataset calibrated = calibrate(data, fits, strategy);
  return analyze_calibrated(calibrated, basis, fits, strategy, controls,
                            options);
}

}  // namespace pooledspline
