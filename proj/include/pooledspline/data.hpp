#pragma once

// Data model for pooled matched/nested case-control biomarker studies.
//
// A PooledDataset groups matched strata under studies.  Studies either
// measured the biomarker at the reference laboratory directly
// (is_reference_lab) or at a local laboratory, in which case a subset of
// controls carries re-assayed reference measurements (the calibration
// subset) and everyone carries the local measurement w.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "pooledspline/errors.hpp"

namespace pooledspline {

enum class CalibrationStrategy { naive, internalized, full };

inline const char* strategy_name(CalibrationStrategy s) {
  switch (s) {
    case CalibrationStrategy::naive: return "naive";
    case CalibrationStrategy::internalized: return "internalized";
    case CalibrationStrategy::full: return "full";
  }
  return "?";
}

struct Subject {
  int y = 0;                           // 1 = case, 0 = control
  std::optional<double> w;             // local laboratory measurement
  std::optional<double> x_ref;         // reference laboratory measurement
  bool in_calibration_subset = false;  // control re-assayed at reference lab
  std::vector<double> z;               // confounders, length P
  std::optional<double> x_tilde;       // calibrated value; set by calibrate()
};

struct Stratum {
  int study = -1;  // index into PooledDataset::studies
  std::string stratum_id;
  std::vector<Subject> subjects;

  int case_count() const {
    int n = 0;
    for (const auto& s : subjects) n += s.y;
    return n;
  }
  int control_count() const {
    return static_cast<int>(subjects.size()) - case_count();
  }
  // A stratum contributes to the conditional likelihood only when it
  // contains at least one case and one control.
  bool informative() const {
    const int n = case_count();
    return n >= 1 && n < static_cast<int>(subjects.size());
  }
};

struct StudyInfo {
  std::string id;
  bool is_reference_lab = false;
};

struct PooledDataset {
  std::vector<StudyInfo> studies;
  std::vector<Stratum> strata;

  int study_index(const std::string& id) const {
    for (std::size_t i = 0; i < studies.size(); ++i)
      if (studies[i].id == id) return static_cast<int>(i);
    return -1;
  }

  // Confounder dimension; throws if subjects disagree.
  int confounder_count() const {
    int p = -1;
    for (const auto& st : strata)
      for (const auto& sub : st.subjects) {
        if (p < 0)
          p = static_cast<int>(sub.z.size());
        else if (p != static_cast<int>(sub.z.size()))
          throw DataError("inconsistent confounder vector lengths in dataset");
      }
    return p < 0 ? 0 : p;
  }

  std::size_t subject_count() const {
    std::size_t n = 0;
    for (const auto& st : strata) n += st.subjects.size();
    return n;
  }
};

// Coefficients of the matched logistic model: beta_x multiplies the spline
// basis of the calibrated biomarker, beta_z the confounders.  The
// stratum intercepts cancel from the conditional likelihood and are not
// represented here.
struct ModelCoefficients {
  Eigen::VectorXd beta_x;
  Eigen::VectorXd beta_z;

  ModelCoefficients() = default;
  ModelCoefficients(int k, int p)
      : beta_x(Eigen::VectorXd::Zero(k)), beta_z(Eigen::VectorXd::Zero(p)) {}

  int dim() const {
    return static_cast<int>(beta_x.size() + beta_z.size());
  }
  Eigen::VectorXd flat() const {
    Eigen::VectorXd out(dim());
    out.head(beta_x.size()) = beta_x;
    out.tail(beta_z.size()) = beta_z;
    return out;
  }
  static ModelCoefficients from_flat(const Eigen::VectorXd& v, int k) {
    ModelCoefficients c;
    c.beta_x = v.head(k);
    c.beta_z = v.tail(v.size() - k);
    return c;
  }
};

}  // namespace pooledspline
