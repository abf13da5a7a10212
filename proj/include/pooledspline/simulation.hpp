#pragma once

// Monte Carlo engine for the matched 1:1 case-control design.
//
// For every stratum a pool of subjects is drawn sequentially from the
// study-specific bivariate normal (X, W) until both a case and a control
// are present (capped; the stratum restarts with a fresh intercept when the
// cap is hit), then one case and one control are selected uniformly.  A
// fixed-count simple random sample of each study's selected controls forms
// the calibration subset; reference measurements are retained only there.
//
// Replicate r draws from the Philox stream (seed, r), making runs
// reproducible under any thread schedule.

#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "pooledspline/calibration.hpp"
#include "pooledspline/data.hpp"
#include "pooledspline/errors.hpp"
#include "pooledspline/inference.hpp"
#include "pooledspline/likelihood.hpp"
#include "pooledspline/rng.hpp"
#include "pooledspline/spline.hpp"

namespace pooledspline {

struct SimulationConfig {
  std::string label = "battery";
  int n_studies = 4;
  int pairs_per_study = 500;
  double mu_x = 0.0;
  double sigma2_x = 1.0;
  std::vector<double> a{-3.0, 1.0, -1.0, 3.0};      // calibration intercepts
  std::vector<double> b{0.5, 0.75, 1.25, 1.5};      // calibration slopes
  std::vector<double> sigma2_w{3.8, 1.7, 0.6, 0.4}; // Var(W) per study
  double beta_x1 = 0.0;
  double beta_x2 = 0.0;
  double beta0_sd = 0.1;  // SD of the stratum intercepts
  double calibration_proportion = 0.05;
  std::array<double, 3> knots{-0.6744897501960817, 0.0, 0.6744897501960817};
  int n_replicates = 1000;
  std::uint64_t seed = 0;
  std::vector<CalibrationStrategy> strategies{CalibrationStrategy::naive,
                                              CalibrationStrategy::internalized,
                                              CalibrationStrategy::full};
  // When set, Var(W) is overridden per study as ratio * sigma2_x / b_s^2 so
  // the calibration R^2 equals `ratio` uniformly across studies.
  std::optional<double> variance_ratio;
  int max_pool_draws = 10000;

  std::vector<double> effective_sigma2_w() const {
    if (!variance_ratio) return sigma2_w;
    std::vector<double> out(b.size());
    for (std::size_t s = 0; s < b.size(); ++s)
      out[s] = *variance_ratio * sigma2_x / (b[s] * b[s]);
    return out;
  }

  // Calibration controls per study; guards the representation error of
  // proportion * count (e.g. 0.05 * 500 must be 25, not 26).
  int calibration_count() const {
    return static_cast<int>(
        std::ceil(calibration_proportion * pairs_per_study - 1e-9));
  }

  SplineBasis basis() const {
    SplineBasis basis;
    basis.kind = BasisKind::restricted_cubic_3knot;
    basis.knots.assign(knots.begin(), knots.end());
    return basis;
  }

  void validate() const {
    if (n_studies < 1) throw ConfigError("n_studies must be >= 1");
    if (pairs_per_study < 1) throw ConfigError("pairs_per_study must be >= 1");
    if (!(sigma2_x > 0.0)) throw ConfigError("sigma2_x must be > 0");
    if (!(beta0_sd >= 0.0)) throw ConfigError("beta0_sd must be >= 0");
    const auto sz = static_cast<std::size_t>(n_studies);
    if (a.size() != sz || b.size() != sz || sigma2_w.size() != sz)
      throw ConfigError("a, b, sigma2_w must each have n_studies entries");
    if (variance_ratio && !(*variance_ratio > 0.0 && *variance_ratio < 1.0))
      throw ConfigError("variance_ratio must lie in (0,1)");
    const auto s2w = effective_sigma2_w();
    for (int s = 0; s < n_studies; ++s) {
      if (b[s] == 0.0) throw ConfigError("calibration slope b must be nonzero");
      if (!(s2w[s] > 0.0)) throw ConfigError("sigma2_w must be > 0");
      if (b[s] * b[s] * s2w[s] > sigma2_x * (1.0 + 1e-12))
        throw ConfigError(
            "covariance matrix not PSD: need b^2 * sigma2_w <= sigma2_x "
            "(study " + std::to_string(s + 1) + ")");
    }
    if (!(calibration_proportion > 0.0 && calibration_proportion <= 1.0))
      throw ConfigError("calibration_proportion must lie in (0,1]");
    if (calibration_count() < 3)
      throw ConfigError(
          "calibration_proportion * pairs_per_study must be at least 3");
    if (!(knots[0] < knots[1] && knots[1] < knots[2]))
      throw ConfigError("knots must be strictly increasing");
    if (n_replicates < 1) throw ConfigError("n_replicates must be >= 1");
    if (strategies.empty()) throw ConfigError("no strategies requested");
    if (max_pool_draws < 2) throw ConfigError("max_pool_draws must be >= 2");
  }
};

inline double expit(double t) { return 1.0 / (1.0 + std::exp(-t)); }

// One simulated pooled dataset.  All draw sequencing is fixed: per study,
// per stratum, intercept first, then subject triples (W, eps, Y), then the
// case/control picks; the calibration subset is sampled after the study's
// strata are complete.
inline PooledDataset generate_dataset(const SimulationConfig& config,
                                      std::uint64_t replicate_index) {
  config.validate();
  RngStream rng(config.seed, replicate_index);
  const std::vector<double> s2w = config.effective_sigma2_w();
  const std::vector<double> knots(config.knots.begin(), config.knots.end());

  PooledDataset data;
  data.studies.reserve(config.n_studies);
  data.strata.reserve(static_cast<std::size_t>(config.n_studies) *
                      config.pairs_per_study);

  for (int s = 0; s < config.n_studies; ++s) {
    data.studies.push_back({"study_" + std::to_string(s + 1), false});
    const double w_mean = (config.mu_x - config.a[s]) / config.b[s];
    const double w_sd = std::sqrt(s2w[s]);
    const double eps_sd =
        std::sqrt(std::max(0.0, config.sigma2_x - config.b[s] * config.b[s] *
                                                      s2w[s]));
    const std::size_t study_first_stratum = data.strata.size();

    for (int j = 0; j < config.pairs_per_study; ++j) {
      std::vector<double> pool_x, pool_w;
      std::vector<int> pool_y;
      bool have_case = false, have_control = false;
      while (true) {
        const double beta0 = config.beta0_sd * rng.normal();
        pool_x.clear();
        pool_w.clear();
        pool_y.clear();
        have_case = have_control = false;
        for (int t = 0; t < config.max_pool_draws; ++t) {
          const double w = w_mean + w_sd * rng.normal();
          const double eps = eps_sd * rng.normal();
          const double x = config.a[s] + config.b[s] * w + eps;
          const double lp = beta0 + config.beta_x1 * x +
                            config.beta_x2 * rcs3_nonlinear_term(knots, x);
          const int y = rng.bernoulli(expit(lp)) ? 1 : 0;
          pool_x.push_back(x);
          pool_w.push_back(w);
          pool_y.push_back(y);
          (y ? have_case : have_control) = true;
          if (have_case && have_control) break;
        }
        if (have_case && have_control) break;
        // Pool cap hit without both classes: restart with a fresh intercept.
      }

      std::vector<int> cases, controls;
      for (std::size_t i = 0; i < pool_y.size(); ++i)
        (pool_y[i] ? cases : controls).push_back(static_cast<int>(i));
      const int pick_case = cases[rng.below(cases.size())];
      const int pick_control = controls[rng.below(controls.size())];

      Stratum st;
      st.study = s;
      st.stratum_id = std::to_string(j + 1);
      Subject control;
      control.y = 0;
      control.w = pool_w[pick_control];
      control.x_ref = pool_x[pick_control];  // trimmed to the subset below
      Subject kase;
      kase.y = 1;
      kase.w = pool_w[pick_case];
      st.subjects.push_back(control);
      st.subjects.push_back(kase);
      data.strata.push_back(std::move(st));
    }

    // Simple random sample of the study's controls, one per stratum,
    // without replacement; only they keep the reference measurement.
    const int n_cal = config.calibration_count();
    std::vector<int> order(config.pairs_per_study);
    for (int j = 0; j < config.pairs_per_study; ++j) order[j] = j;
    for (int i = 0; i < n_cal; ++i) {
      const std::uint64_t pick =
          i + rng.below(static_cast<std::uint64_t>(order.size()) - i);
      std::swap(order[i], order[pick]);
    }
    std::vector<char> keep(config.pairs_per_study, 0);
    for (int i = 0; i < n_cal && i < config.pairs_per_study; ++i)
      keep[order[i]] = 1;
    for (int j = 0; j < config.pairs_per_study; ++j) {
      Subject& control = data.strata[study_first_stratum + j].subjects[0];
      if (keep[j])
        control.in_calibration_subset = true;
      else
        control.x_ref.reset();
    }
  }
  return data;
}

// ---------------------------------------------------------------------------
// Replicate batteries and operating characteristics
// ---------------------------------------------------------------------------

struct CoefficientOC {
  double true_value = 0.0;
  double bias = 0.0;           // mean relative bias, or absolute when true=0
  bool bias_is_relative = true;
  double empirical_sd = 0.0;   // SD of the estimates over used replicates
  double coverage = 0.0;       // 95% CI coverage rate
  int n_used = 0;
};

struct StrategyOC {
  CalibrationStrategy strategy = CalibrationStrategy::full;
  std::array<CoefficientOC, 2> coef;
  int n_failed = 0;
  std::string first_error;
};

struct OperatingCharacteristics {
  std::vector<StrategyOC> per_strategy;
  int n_replicates = 0;
  std::optional<double> variance_ratio;
};

struct RawEstimate {
  int replicate = 0;
  CalibrationStrategy strategy = CalibrationStrategy::full;
  bool ok = false;
  std::array<double, 2> est{};
  std::array<double, 2> se{};
  std::array<bool, 2> covered{};
  std::string error;
};

namespace detail {

inline RawEstimate run_one_strategy(const PooledDataset& data,
                                    const SplineBasis& basis,
                                    CalibrationStrategy strategy,
                                    const SimulationConfig& config,
                                    int replicate) {
  RawEstimate out;
  out.replicate = replicate;
  out.strategy = strategy;
  const std::array<double, 2> truth{config.beta_x1, config.beta_x2};
  try {
    const FitResult fit = run_analysis(data, basis, strategy);
    for (int c = 0; c < 2; ++c) {
      out.est[c] = fit.coef.beta_x[c];
      out.se[c] = fit.se(c);
      const double hw = z_975() * out.se[c];
      out.covered[c] =
          truth[c] >= out.est[c] - hw && truth[c] <= out.est[c] + hw;
    }
    out.ok = true;
  } catch (const Error& e) {
    out.error = e.what();
  }
  return out;
}

}  // namespace detail

// Run the replicate battery for every requested strategy.  Failed replicate
// fits are excluded per strategy and counted; more than 10% failures for any
// strategy aborts the battery as a sign of a mis-specified configuration.
inline OperatingCharacteristics run_battery(
    const SimulationConfig& config, int threads = 1,
    std::vector<RawEstimate>* raw_out = nullptr) {
  config.validate();
  const SplineBasis basis = config.basis();
  const int n_rep = config.n_replicates;
  const int n_strat = static_cast<int>(config.strategies.size());

  std::vector<std::vector<RawEstimate>> results(
      n_rep, std::vector<RawEstimate>(n_strat));

  auto run_replicate = [&](int r) {
    try {
      const PooledDataset data =
          generate_dataset(config, static_cast<std::uint64_t>(r));
      for (int k = 0; k < n_strat; ++k)
        results[r][k] = detail::run_one_strategy(data, basis,
                                                 config.strategies[k], config,
                                                 r);
    } catch (const Error& e) {
      for (int k = 0; k < n_strat; ++k) {
        results[r][k].replicate = r;
        results[r][k].strategy = config.strategies[k];
        results[r][k].ok = false;
        results[r][k].error = e.what();
      }
    }
  };

  if (threads <= 1) {
    for (int r = 0; r < n_rep; ++r) run_replicate(r);
  } else {
    std::atomic<int> next{0};
    auto worker = [&]() {
      for (int r = next.fetch_add(1); r < n_rep; r = next.fetch_add(1))
        run_replicate(r);
    };
    std::vector<std::thread> pool;
    const int n_workers = std::min(threads, n_rep);
    pool.reserve(n_workers);
    for (int t = 0; t < n_workers; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  OperatingCharacteristics oc;
  oc.n_replicates = n_rep;
  oc.variance_ratio = config.variance_ratio;
  const std::array<double, 2> truth{config.beta_x1, config.beta_x2};

  for (int k = 0; k < n_strat; ++k) {
    StrategyOC soc;
    soc.strategy = config.strategies[k];
    std::array<std::vector<double>, 2> ests;
    std::array<int, 2> n_covered{0, 0};
    for (int r = 0; r < n_rep; ++r) {
      const RawEstimate& re = results[r][k];
      if (!re.ok) {
        ++soc.n_failed;
        if (soc.first_error.empty()) soc.first_error = re.error;
        continue;
      }
      for (int c = 0; c < 2; ++c) {
        ests[c].push_back(re.est[c]);
        n_covered[c] += re.covered[c] ? 1 : 0;
      }
    }
    for (int c = 0; c < 2; ++c) {
      CoefficientOC& coc = soc.coef[c];
      coc.true_value = truth[c];
      coc.n_used = static_cast<int>(ests[c].size());
      if (coc.n_used == 0) continue;
      double mean_bias = 0.0;
      coc.bias_is_relative = truth[c] != 0.0;
      for (double est : ests[c])
        mean_bias += coc.bias_is_relative ? (est - truth[c]) / truth[c]
                                          : est - truth[c];
      coc.bias = mean_bias / coc.n_used;
      double mean_est = 0.0;
      for (double est : ests[c]) mean_est += est;
      mean_est /= coc.n_used;
      double ss = 0.0;
      for (double est : ests[c]) ss += (est - mean_est) * (est - mean_est);
      coc.empirical_sd = coc.n_used > 1 ? std::sqrt(ss / (coc.n_used - 1)) : 0.0;
      coc.coverage = static_cast<double>(n_covered[c]) / coc.n_used;
    }
    oc.per_strategy.push_back(std::move(soc));
  }

  for (const auto& soc : oc.per_strategy) {
    if (soc.n_failed > 0.10 * n_rep)
      throw Error(std::string("run_battery: strategy ") +
                  strategy_name(soc.strategy) + " failed on " +
                  std::to_string(soc.n_failed) + " of " +
                  std::to_string(n_rep) +
                  " replicates (mis-specified config?); first error: " +
                  soc.first_error);
  }

  if (raw_out) {
    raw_out->clear();
    for (int r = 0; r < n_rep; ++r)
      for (int k = 0; k < n_strat; ++k) raw_out->push_back(results[r][k]);
  }
  return oc;
}

// Re-run the battery over a list of calibration R^2 ratios, overriding
// Var(W) per study while keeping the calibration truth vectors fixed.
inline std::vector<OperatingCharacteristics> variance_ratio_battery(
    const SimulationConfig& config, const std::vector<double>& ratios,
    int threads = 1) {
  if (ratios.empty())
    throw ConfigError("variance_ratio_battery: no ratios supplied");
  std::vector<OperatingCharacteristics> out;
  out.reserve(ratios.size());
  for (double ratio : ratios) {
    SimulationConfig cfg = config;
    cfg.variance_ratio = ratio;
    out.push_back(run_battery(cfg, threads));
  }
  return out;
}

}  // namespace pooledspline
