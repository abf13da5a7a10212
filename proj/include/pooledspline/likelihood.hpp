#pragma once

// Conditional logistic likelihood for n:m matched strata, evaluated on
// calibrated biomarker values.
//
// For a stratum with case count n the denominator sums exp(eta) over all
// case-sized subsets of its members.  Two evaluation routes are provided:
//
//   * direct enumeration of the subsets (used while C(n+m, n) stays below
//     a cap), and
//   * the recursive elementary-symmetric-polynomial evaluation, which
//     handles strata whose subset count is astronomically large.
//
// Both routes produce the same subset-inclusion moments
//   incl1[u]    = P(u in S)
//   incl2[u][v] = P(u in S and v in S)
// from which the log-likelihood gradient and Hessian follow:
//   score   = F' (y - incl1)
//   hessian = -(F' incl2 F - mu mu'),   mu = F' incl1
// with F the stratum feature matrix [f(x~), z].  All exponentials are
// max-shifted before summation.
//
// Per-stratum evaluation is pure and reentrant; callers may evaluate strata
// from concurrent workers.  The simulation engine parallelizes at the
// replicate level instead, so totals are accumulated in a fixed order and
// results do not depend on the thread count.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pooledspline/data.hpp"
#include "pooledspline/errors.hpp"
#include "pooledspline/spline.hpp"

namespace pooledspline {

enum class DenominatorMethod { automatic, enumeration, recursive };

struct SolverControls {
  double tol_grad = 1e-8;
  double tol_step = 1e-8;
  int max_iter = 100;
  int max_step_halvings = 20;
  double enumeration_cap = 10000.0;  // max C(n+m, n) for direct enumeration
  DenominatorMethod method = DenominatorMethod::automatic;
};

struct StratumMoments {
  double loglik = 0.0;
  Eigen::VectorXd incl1;  // subset inclusion probabilities
  Eigen::MatrixXd incl2;  // pairwise inclusion probabilities, diag = incl1
};

// C(n, k) in floating point, saturating at `cap_hint` scale to avoid
// overflow for large strata.
inline double binomial_count(int n, int k, double cap_hint = 1e15) {
  if (k < 0 || k > n) return 0.0;
  k = std::min(k, n - k);
  double c = 1.0;
  for (int i = 1; i <= k; ++i) {
    c *= static_cast<double>(n - k + i) / static_cast<double>(i);
    if (c > cap_hint) return c;
  }
  return c;
}

namespace detail {

// Visit all size-k index subsets of {0, ..., t-1} in lexicographic order.
template <typename Visitor>
void for_each_combination(int t, int k, Visitor&& visit) {
  std::vector<int> idx(k);
  for (int i = 0; i < k; ++i) idx[i] = i;
  while (true) {
    visit(idx);
    int i = k - 1;
    while (i >= 0 && idx[i] == t - k + i) --i;
    if (i < 0) break;
    ++idx[i];
    for (int j = i + 1; j < k; ++j) idx[j] = idx[j - 1] + 1;
  }
}

// Elementary symmetric polynomials e_0..e_kmax of the weights, optionally
// excluding up to two indices.
inline Eigen::VectorXd esp(const Eigen::VectorXd& w, int kmax, int skip1 = -1,
                           int skip2 = -1) {
  Eigen::VectorXd e = Eigen::VectorXd::Zero(kmax + 1);
  e[0] = 1.0;
  int used = 0;
  for (int i = 0; i < w.size(); ++i) {
    if (i == skip1 || i == skip2) continue;
    ++used;
    for (int k = std::min(kmax, used); k >= 1; --k) e[k] += w[i] * e[k - 1];
  }
  return e;
}

inline StratumMoments moments_enumeration(const Eigen::VectorXd& eta,
                                          const std::vector<int>& case_idx) {
  const int t = static_cast<int>(eta.size());
  const int n = static_cast<int>(case_idx.size());
  const double shift = eta.maxCoeff();

  std::vector<double> subset_lp;
  subset_lp.reserve(256);
  double max_lp = -std::numeric_limits<double>::infinity();
  for_each_combination(t, n, [&](const std::vector<int>& idx) {
    double lp = 0.0;
    for (int i : idx) lp += eta[i] - shift;
    subset_lp.push_back(lp);
    max_lp = std::max(max_lp, lp);
  });
  double sum = 0.0;
  for (double lp : subset_lp) sum += std::exp(lp - max_lp);
  const double log_denom = max_lp + std::log(sum);

  StratumMoments m;
  m.incl1 = Eigen::VectorXd::Zero(t);
  m.incl2 = Eigen::MatrixXd::Zero(t, t);
  std::size_t pos = 0;
  for_each_combination(t, n, [&](const std::vector<int>& idx) {
    const double p = std::exp(subset_lp[pos++] - log_denom);
    for (std::size_t a = 0; a < idx.size(); ++a) {
      m.incl1[idx[a]] += p;
      m.incl2(idx[a], idx[a]) += p;
      for (std::size_t b = a + 1; b < idx.size(); ++b) {
        m.incl2(idx[a], idx[b]) += p;
        m.incl2(idx[b], idx[a]) += p;
      }
    }
  });
  double lp_case = 0.0;
  for (int i : case_idx) lp_case += eta[i] - shift;
  m.loglik = lp_case - log_denom;
  return m;
}

inline StratumMoments moments_recursive(const Eigen::VectorXd& eta,
                                        const std::vector<int>& case_idx) {
  const int t = static_cast<int>(eta.size());
  const int n = static_cast<int>(case_idx.size());
  const double shift = eta.maxCoeff();
  const Eigen::VectorXd w = (eta.array() - shift).exp();

  const Eigen::VectorXd e_all = esp(w, n);
  const double denom = e_all[n];
  if (!(denom > 0.0) || !std::isfinite(denom))
    throw Error("conditional likelihood denominator under/overflowed");

  StratumMoments m;
  m.incl1 = Eigen::VectorXd::Zero(t);
  m.incl2 = Eigen::MatrixXd::Zero(t, t);
  for (int u = 0; u < t; ++u) {
    const Eigen::VectorXd e_u = esp(w, n - 1, u);
    m.incl1[u] = w[u] * e_u[n - 1] / denom;
    m.incl2(u, u) = m.incl1[u];
  }
  if (n >= 2) {
    for (int u = 0; u < t; ++u)
      for (int v = u + 1; v < t; ++v) {
        const Eigen::VectorXd e_uv = esp(w, n - 2, u, v);
        const double p = w[u] * w[v] * e_uv[n - 2] / denom;
        m.incl2(u, v) = p;
        m.incl2(v, u) = p;
      }
  }
  double lp_case = 0.0;
  for (int i : case_idx) lp_case += eta[i] - shift;
  m.loglik = lp_case - std::log(denom);
  return m;
}

}  // namespace detail

// Subset-inclusion moments of one stratum given the linear predictors.
inline StratumMoments stratum_moments(const Eigen::VectorXd& eta,
                                      const std::vector<int>& case_idx,
                                      const SolverControls& controls = {}) {
  const int t = static_cast<int>(eta.size());
  const int n = static_cast<int>(case_idx.size());
  if (n < 1 || n >= t)
    throw DataError("stratum_moments: stratum must contain at least one case "
                    "and one control");
  const double count = binomial_count(t, n, controls.enumeration_cap * 4.0);
  switch (controls.method) {
    case DenominatorMethod::enumeration:
      if (count > controls.enumeration_cap) {
        std::ostringstream msg;
        msg << "stratum has C(" << t << ", " << n << ") = " << count
            << " case-sized subsets, above the enumeration cap "
            << controls.enumeration_cap
            << "; use the recursive denominator evaluator";
        throw EnumerationCapError(msg.str());
      }
      return detail::moments_enumeration(eta, case_idx);
    case DenominatorMethod::recursive:
      return detail::moments_recursive(eta, case_idx);
    case DenominatorMethod::automatic:
    default:
      return count <= controls.enumeration_cap
                 ? detail::moments_enumeration(eta, case_idx)
                 : detail::moments_recursive(eta, case_idx);
  }
}

// Per-stratum design: features [f(x~), z], case flags, calibrated values.
struct StratumDesign {
  Eigen::MatrixXd feat;     // T x (K+P)
  Eigen::VectorXd y;        // case indicators
  Eigen::VectorXd xtilde;   // calibrated biomarker values
  std::vector<int> case_idx;
};

inline StratumDesign build_design(const Stratum& stratum,
                                  const SplineBasis& basis, int p) {
  const int t = static_cast<int>(stratum.subjects.size());
  const int k = basis.dim();
  StratumDesign d;
  d.feat.resize(t, k + p);
  d.y.resize(t);
  d.xtilde.resize(t);
  for (int i = 0; i < t; ++i) {
    const Subject& sub = stratum.subjects[i];
    if (!sub.x_tilde)
      throw DataError("stratum '" + stratum.stratum_id +
                      "': subject has no calibrated value; run calibrate() "
                      "before fitting");
    if (static_cast<int>(sub.z.size()) != p)
      throw DataError("stratum '" + stratum.stratum_id +
                      "': confounder vector length mismatch");
    d.xtilde[i] = *sub.x_tilde;
    d.feat.block(i, 0, 1, k) = eval_basis(basis, d.xtilde[i]).transpose();
    for (int j = 0; j < p; ++j) d.feat(i, k + j) = sub.z[j];
    d.y[i] = sub.y;
    if (sub.y == 1) d.case_idx.push_back(i);
  }
  return d;
}

inline Eigen::VectorXd design_eta(const StratumDesign& d,
                                  const Eigen::VectorXd& theta) {
  return d.feat * theta;
}

inline Eigen::VectorXd score_from_moments(const StratumDesign& d,
                                          const StratumMoments& m) {
  return d.feat.transpose() * (d.y - m.incl1);
}

inline Eigen::MatrixXd hessian_from_moments(const StratumDesign& d,
                                            const StratumMoments& m) {
  const Eigen::VectorXd mu = d.feat.transpose() * m.incl1;
  return -(d.feat.transpose() * m.incl2 * d.feat - mu * mu.transpose());
}

// d(score)/d(xtilde_i): the feature row of subject i moves with its
// calibrated value, and so do all subset probabilities through eta_i.
inline Eigen::VectorXd dscore_dxtilde(const StratumDesign& d,
                                      const StratumMoments& m,
                                      const SplineBasis& basis,
                                      const Eigen::VectorXd& theta, int i) {
  const int k = basis.dim();
  const int p = static_cast<int>(d.feat.cols()) - k;
  const Eigen::VectorXd fprime = eval_basis_deriv(basis, d.xtilde[i]);
  Eigen::VectorXd di = Eigen::VectorXd::Zero(k + p);
  di.head(k) = fprime;
  const double gi = theta.head(k).dot(fprime);  // d eta_i / d xtilde_i
  const Eigen::VectorXd mu = d.feat.transpose() * m.incl1;
  const Eigen::VectorXd cov_i =
      d.feat.transpose() * m.incl2.col(i) - m.incl1[i] * mu;
  return (d.y[i] - m.incl1[i]) * di - gi * cov_i;
}

// ---------------------------------------------------------------------------
// Spec-level per-stratum operations
// ---------------------------------------------------------------------------

inline double stratum_loglik(const Stratum& stratum, const SplineBasis& basis,
                             const ModelCoefficients& coef,
                             const SolverControls& controls = {}) {
  if (!stratum.informative())
    throw DataError("stratum_loglik: uninformative stratum");
  const int p = static_cast<int>(coef.beta_z.size());
  const StratumDesign d = build_design(stratum, basis, p);
  return stratum_moments(design_eta(d, coef.flat()), d.case_idx, controls)
      .loglik;
}

inline Eigen::VectorXd stratum_score(const Stratum& stratum,
                                     const SplineBasis& basis,
                                     const ModelCoefficients& coef,
                                     const SolverControls& controls = {}) {
  if (!stratum.informative())
    throw DataError("stratum_score: uninformative stratum");
  const int p = static_cast<int>(coef.beta_z.size());
  const StratumDesign d = build_design(stratum, basis, p);
  const StratumMoments m =
      stratum_moments(design_eta(d, coef.flat()), d.case_idx, controls);
  return score_from_moments(d, m);
}

inline Eigen::MatrixXd stratum_hessian(const Stratum& stratum,
                                       const SplineBasis& basis,
                                       const ModelCoefficients& coef,
                                       const SolverControls& controls = {}) {
  if (!stratum.informative())
    throw DataError("stratum_hessian: uninformative stratum");
  const int p = static_cast<int>(coef.beta_z.size());
  const StratumDesign d = build_design(stratum, basis, p);
  const StratumMoments m =
      stratum_moments(design_eta(d, coef.flat()), d.case_idx, controls);
  return hessian_from_moments(d, m);
}

// ---------------------------------------------------------------------------
// Newton-Raphson maximization
// ---------------------------------------------------------------------------

struct ConvergenceReport {
  bool converged = false;
  int iterations = 0;
  double final_loglik = 0.0;
  double max_score = 0.0;
  double max_step = 0.0;
  int n_strata_used = 0;
  int n_strata_dropped = 0;
  std::vector<IterationRecord> trajectory;
};

struct MatchedFit {
  ModelCoefficients coef;
  Eigen::MatrixXd information;  // negative Hessian at the optimum
  ConvergenceReport report;
};

namespace detail {

struct TotalEval {
  double loglik;
  Eigen::VectorXd score;
  Eigen::MatrixXd hessian;
};

inline TotalEval eval_total(const std::vector<StratumDesign>& designs,
                            const Eigen::VectorXd& theta,
                            const SolverControls& controls,
                            bool with_derivatives) {
  const int dim = static_cast<int>(theta.size());
  TotalEval tot{0.0, Eigen::VectorXd::Zero(dim),
                Eigen::MatrixXd::Zero(dim, dim)};
  for (const auto& d : designs) {
    const StratumMoments m =
        stratum_moments(design_eta(d, theta), d.case_idx, controls);
    tot.loglik += m.loglik;
    if (with_derivatives) {
      tot.score += score_from_moments(d, m);
      tot.hessian += hessian_from_moments(d, m);
    }
  }
  return tot;
}

// Ascent direction information^{-1} * score via eigendecomposition, with a
// singularity check that names the null direction.
inline Eigen::VectorXd newton_direction(const Eigen::MatrixXd& information,
                                        const Eigen::VectorXd& score) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(information);
  const Eigen::VectorXd& ev = es.eigenvalues();
  const double eig_max = ev.maxCoeff();
  const double eig_min = ev.minCoeff();
  if (eig_min <= 1e-12 * std::max(eig_max, 1.0)) {
    Eigen::VectorXd null_dir = es.eigenvectors().col(0);
    std::ostringstream msg;
    msg << "singular Hessian (separation or collinearity); null direction (";
    for (int i = 0; i < null_dir.size(); ++i)
      msg << (i ? ", " : "") << null_dir[i];
    msg << ")";
    throw SingularError(
        msg.str(), std::vector<double>(null_dir.data(),
                                       null_dir.data() + null_dir.size()));
  }
  return es.eigenvectors() *
         (es.eigenvectors().transpose() * score).cwiseQuotient(ev);
}

}  // namespace detail

inline std::vector<StratumDesign> build_designs(const PooledDataset& data,
                                                const SplineBasis& basis,
                                                int* n_dropped = nullptr) {
  const int p = data.confounder_count();
  std::vector<StratumDesign> designs;
  designs.reserve(data.strata.size());
  int dropped = 0;
  for (const auto& st : data.strata) {
    if (!st.informative()) {
      ++dropped;
      continue;
    }
    designs.push_back(build_design(st, basis, p));
  }
  if (n_dropped) *n_dropped = dropped;
  return designs;
}

// Maximize the pooled conditional log-likelihood by Newton iteration with
// step halving.  Non-informative strata are dropped (count reported).
inline MatchedFit fit_matched_likelihood(const PooledDataset& data,
                                         const SplineBasis& basis,
                                         const ModelCoefficients& init = {},
                                         const SolverControls& controls = {}) {
  basis.validate();
  int dropped = 0;
  const std::vector<StratumDesign> designs =
      build_designs(data, basis, &dropped);
  if (designs.empty())
    throw DataError("fit_matched_likelihood: no informative strata");

  const int k = basis.dim();
  const int p = data.confounder_count();
  const int dim = k + p;
  Eigen::VectorXd theta;
  if (init.dim() == 0) {
    theta = Eigen::VectorXd::Zero(dim);
  } else {
    if (init.dim() != dim)
      throw ConfigError("fit_matched_likelihood: init has dimension " +
                        std::to_string(init.dim()) + ", model needs " +
                        std::to_string(dim));
    theta = init.flat();
  }

  ConvergenceReport report;
  report.n_strata_used = static_cast<int>(designs.size());
  report.n_strata_dropped = dropped;

  detail::TotalEval cur = detail::eval_total(designs, theta, controls, true);
  if (!std::isfinite(cur.loglik))
    throw Error("fit_matched_likelihood: non-finite log-likelihood at init");

  for (int iter = 1; iter <= controls.max_iter; ++iter) {
    const Eigen::VectorXd direction =
        detail::newton_direction(-cur.hessian, cur.score);

    double lambda = 1.0;
    int halvings = 0;
    Eigen::VectorXd theta_next;
    detail::TotalEval next;
    bool accepted = false;
    for (; halvings <= controls.max_step_halvings; ++halvings) {
      theta_next = theta + lambda * direction;
      next = detail::eval_total(designs, theta_next, controls, true);
      if (std::isfinite(next.loglik) &&
          next.loglik >= cur.loglik - 1e-12 * (1.0 + std::abs(cur.loglik))) {
        accepted = true;
        break;
      }
      lambda *= 0.5;
    }
    if (!accepted) {
      if (cur.score.cwiseAbs().maxCoeff() < controls.tol_grad) {
        report.converged = true;  // already at the optimum, step is noise
        break;
      }
      report.trajectory.push_back({iter, cur.loglik,
                                   cur.score.cwiseAbs().maxCoeff(),
                                   (lambda * direction).cwiseAbs().maxCoeff(),
                                   halvings});
      throw ConvergenceError(
          "fit_matched_likelihood: step halving failed to improve the "
          "log-likelihood",
          report.trajectory);
    }

    const double max_step = (lambda * direction).cwiseAbs().maxCoeff();
    theta = theta_next;
    cur = next;
    report.iterations = iter;
    report.max_score = cur.score.cwiseAbs().maxCoeff();
    report.max_step = max_step;
    report.trajectory.push_back(
        {iter, cur.loglik, report.max_score, max_step, halvings});

    if (theta.cwiseAbs().maxCoeff() > 1e6) {
      throw ConvergenceError(
          "fit_matched_likelihood: estimates diverging (possible separation)",
          report.trajectory);
    }
    if (report.max_score < controls.tol_grad &&
        max_step < controls.tol_step) {
      report.converged = true;
      break;
    }
  }
  if (!report.converged)
    throw ConvergenceError("fit_matched_likelihood: no convergence in " +
                               std::to_string(controls.max_iter) +
                               " iterations",
                           report.trajectory);

  // Surface separation/collinearity that the iteration limit did not catch.
  detail::newton_direction(-cur.hessian, cur.score);

  report.final_loglik = cur.loglik;
  MatchedFit out;
  out.coef = ModelCoefficients::from_flat(theta, k);
  out.information = -cur.hessian;
  out.report = report;
  return out;
}

// Total log-likelihood / score over the informative strata (test and
// diagnostic helpers).
inline double total_loglik(const PooledDataset& data, const SplineBasis& basis,
                           const ModelCoefficients& coef,
                           const SolverControls& controls = {}) {
  return detail::eval_total(build_designs(data, basis), coef.flat(), controls,
                            false)
      .loglik;
}

inline Eigen::VectorXd total_score(const PooledDataset& data,
                                   const SplineBasis& basis,
                                   const ModelCoefficients& coef,
                                   const SolverControls& controls = {}) {
  return detail::eval_total(build_designs(data, basis), coef.flat(), controls,
                            true)
      .score;
}

}  // namespace pooledspline
