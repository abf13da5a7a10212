#pragma once

// Study-specific calibration of local laboratory measurements.
//
// Each local-lab study gets a linear model E(X | W) = a_s + b_s W fitted by
// ordinary least squares among its calibration-subset controls.  The fitted
// models impute reference-scale values X~ for subjects without reference
// measurements; the three strategies differ in who gets imputed:
//
//   naive         X~ = W            (no calibration at all)
//   full          X~ = a + b W      for everyone in the study
//   internalized  X~ = x_ref where observed, a + b W otherwise
//
// Reference-lab studies pass through untouched: X~ = x_ref.

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "pooledspline/data.hpp"
#include "pooledspline/errors.hpp"

namespace pooledspline {

struct CalibrationFit {
  std::string study_id;
  double a_hat = 0.0;  // intercept, reference-lab units
  double b_hat = 0.0;  // slope, ratio of lab scales
  double se_a = 0.0;
  double se_b = 0.0;
  int n_cal = 0;
  double residual_variance = 0.0;
};

// OLS of X on W over the calibration pairs.  Classical homoskedastic
// standard errors with n - 2 residual degrees of freedom.
inline CalibrationFit fit_calibration(
    const std::vector<std::pair<double, double>>& pairs_w_x) {
  const int n = static_cast<int>(pairs_w_x.size());
  if (n < 3)
    throw DataError("fit_calibration: need at least 3 (W, X) pairs, got " +
                    std::to_string(n));
  double wbar = 0.0, xbar = 0.0;
  for (const auto& [w, x] : pairs_w_x) {
    wbar += w;
    xbar += x;
  }
  wbar /= n;
  xbar /= n;
  double sww = 0.0, swx = 0.0;
  for (const auto& [w, x] : pairs_w_x) {
    sww += (w - wbar) * (w - wbar);
    swx += (w - wbar) * (x - xbar);
  }
  double scale = 0.0;
  for (const auto& [w, x] : pairs_w_x) scale += w * w;
  if (sww <= 1e-12 * std::max(1.0, scale))
    throw SingularError(
        "fit_calibration: singular design, W is constant across the "
        "calibration subset");

  CalibrationFit fit;
  fit.n_cal = n;
  fit.b_hat = swx / sww;
  fit.a_hat = xbar - fit.b_hat * wbar;
  double rss = 0.0;
  for (const auto& [w, x] : pairs_w_x) {
    const double e = x - fit.a_hat - fit.b_hat * w;
    rss += e * e;
  }
  fit.residual_variance = rss / (n - 2);
  fit.se_b = std::sqrt(fit.residual_variance / sww);
  fit.se_a = std::sqrt(fit.residual_variance * (1.0 / n + wbar * wbar / sww));
  return fit;
}

// Calibration pairs (W, X) of one study: its calibration-subset controls.
inline std::vector<std::pair<double, double>> calibration_pairs(
    const PooledDataset& data, int study) {
  std::vector<std::pair<double, double>> pairs;
  for (const auto& st : data.strata) {
    if (st.study != study) continue;
    for (const auto& sub : st.subjects)
      if (sub.in_calibration_subset && sub.y == 0 && sub.w && sub.x_ref)
        pairs.emplace_back(*sub.w, *sub.x_ref);
  }
  return pairs;
}

// Fit calibration models for every local-lab study that has a calibration
// subset.  Slot s is empty for reference-lab studies and for local-lab
// studies without calibration data.
inline std::vector<std::optional<CalibrationFit>> fit_all_calibrations(
    const PooledDataset& data) {
  std::vector<std::optional<CalibrationFit>> fits(data.studies.size());
  for (std::size_t s = 0; s < data.studies.size(); ++s) {
    if (data.studies[s].is_reference_lab) continue;
    auto pairs = calibration_pairs(data, static_cast<int>(s));
    if (pairs.empty()) continue;
    if (pairs.size() < 3)
      throw DataError("study '" + data.studies[s].id +
                      "': fewer than 3 calibration pairs (" +
                      std::to_string(pairs.size()) + ")");
    fits[s] = fit_calibration(pairs);
    fits[s]->study_id = data.studies[s].id;
  }
  return fits;
}

// Fill x_tilde for every subject.  Returns a new dataset; the input is
// never mutated.
inline PooledDataset calibrate(
    const PooledDataset& data,
    const std::vector<std::optional<CalibrationFit>>& fits,
    CalibrationStrategy strategy) {
  if (fits.size() != data.studies.size())
    throw DataError("calibrate: fits vector does not match study count");
  PooledDataset out = data;
  for (auto& st : out.strata) {
    const StudyInfo& info = out.studies[st.study];
    const auto& fit = fits[st.study];
    for (auto& sub : st.subjects) {
      if (info.is_reference_lab) {
        if (!sub.x_ref)
          throw DataError("calibrate: subject in reference-lab study '" +
                          info.id + "' lacks a reference measurement");
        sub.x_tilde = *sub.x_ref;
        continue;
      }
      if (!sub.w)
        throw DataError("calibrate: subject in local-lab study '" + info.id +
                        "' lacks a local measurement W");
      switch (strategy) {
        case CalibrationStrategy::naive:
          sub.x_tilde = *sub.w;
          break;
        case CalibrationStrategy::full:
          if (!fit)
            throw DataError("calibrate: full calibration requires a "
                            "calibration model for study '" + info.id + "'");
          sub.x_tilde = fit->a_hat + fit->b_hat * *sub.w;
          break;
        case CalibrationStrategy::internalized:
          if (sub.x_ref) {
            sub.x_tilde = *sub.x_ref;
          } else {
            if (!fit)
              throw DataError(
                  "calibrate: internalized calibration requires a "
                  "calibration model for study '" + info.id + "'");
            sub.x_tilde = fit->a_hat + fit->b_hat * *sub.w;
          }
          break;
      }
    }
  }
  return out;
}

}  // namespace pooledspline
