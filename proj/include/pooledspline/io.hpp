#pragma once

// CSV ingestion/validation, simulation config files, and result
// serialization for the fit/simulate workflows.
//
// Dataset CSV schema (comma separated, header row, decimal point):
//   required  study, stratum, case (0/1), w (may be empty in reference-lab
//             studies)
//   optional  x_ref, in_cal (0/1), is_reference_lab (0/1, constant within
//             study), z_1 ... z_P
//
// Simulation configs are flat key = value files; per-study vectors are
// comma lists; '#' starts a comment.

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "pooledspline/calibration.hpp"
#include "pooledspline/data.hpp"
#include "pooledspline/errors.hpp"
#include "pooledspline/inference.hpp"
#include "pooledspline/simulation.hpp"

namespace pooledspline {

// ---------------------------------------------------------------------------
// Small text helpers
// ---------------------------------------------------------------------------

inline std::string fmt_g(double v, int precision = 10) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*g", precision, v);
  return buf;
}

inline std::string fmt_exact(double v) { return fmt_g(v, 17); }

inline std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

inline double parse_double(const std::string& raw, const std::string& what) {
  const std::string s = trim(raw);
  double v = 0.0;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last)
    throw DataError(what + ": expected a number, got '" + raw + "'");
  return v;
}

inline long long parse_int(const std::string& raw, const std::string& what) {
  const std::string s = trim(raw);
  long long v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size())
    throw DataError(what + ": expected an integer, got '" + raw + "'");
  return v;
}

inline std::vector<double> parse_double_list(const std::string& raw,
                                             const std::string& what) {
  std::vector<double> out;
  for (const auto& tok : split(raw, ','))
    if (!trim(tok).empty()) out.push_back(parse_double(tok, what));
  return out;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write file: " + path);
  out << content;
  if (!out) throw DataError("write failed: " + path);
}

// ---------------------------------------------------------------------------
// Dataset loading
// ---------------------------------------------------------------------------

struct ValidationReport {
  int n_rows = 0;
  int n_studies = 0;
  int n_strata_kept = 0;
  int n_strata_dropped = 0;
  int n_missing_w = 0;
  int n_missing_x_ref = 0;
  std::vector<std::string> warnings;
  std::map<std::string, int> calibration_counts;            // per study
  std::map<std::string, std::pair<int, int>> study_sizes;   // cases, controls

  std::string to_text() const {
    std::ostringstream out;
    out << "rows: " << n_rows << ", studies: " << n_studies
        << ", strata kept: " << n_strata_kept
        << ", dropped: " << n_strata_dropped << "\n";
    for (const auto& [study, sz] : study_sizes) {
      out << "  " << study << ": " << sz.first << " cases / " << sz.second
          << " controls";
      auto it = calibration_counts.find(study);
      out << ", n_cal = " << (it == calibration_counts.end() ? 0 : it->second)
          << "\n";
    }
    for (const auto& w : warnings) out << "  warning: " << w << "\n";
    return out.str();
  }
};

struct LoadResult {
  PooledDataset data;
  ValidationReport report;
};

inline LoadResult load_dataset(const std::string& path) {
  const std::string text = read_file(path);
  std::vector<std::string> lines;
  {
    std::string cur;
    for (char c : text) {
      if (c == '\n') {
        lines.push_back(cur);
        cur.clear();
      } else {
        cur += c;
      }
    }
    if (!cur.empty()) lines.push_back(cur);
  }
  if (lines.empty()) throw DataError(path + ": empty file");

  const std::vector<std::string> header_raw = split(trim(lines[0]), ',');
  std::map<std::string, int> col;
  std::vector<std::pair<int, int>> z_cols;  // (z index, column)
  for (std::size_t i = 0; i < header_raw.size(); ++i) {
    const std::string name = trim(header_raw[i]);
    if (name.rfind("z_", 0) == 0) {
      z_cols.emplace_back(static_cast<int>(parse_int(name.substr(2),
                                                     "z column index")),
                          static_cast<int>(i));
      continue;
    }
    if (name != "study" && name != "stratum" && name != "case" &&
        name != "w" && name != "x_ref" && name != "in_cal" &&
        name != "is_reference_lab")
      throw DataError(path + ": unknown column '" + name + "'");
    if (col.count(name)) throw DataError(path + ": duplicate column " + name);
    col[name] = static_cast<int>(i);
  }
  for (const char* req : {"study", "stratum", "case", "w"})
    if (!col.count(req))
      throw DataError(path + ": missing required column '" +
                      std::string(req) + "'");
  std::sort(z_cols.begin(), z_cols.end());
  for (std::size_t i = 0; i < z_cols.size(); ++i)
    if (z_cols[i].first != static_cast<int>(i) + 1)
      throw DataError(path + ": confounder columns must be numbered z_1..z_P");
  const int n_z = static_cast<int>(z_cols.size());

  LoadResult res;
  PooledDataset& data = res.data;
  ValidationReport& report = res.report;

  std::map<std::string, int> study_of;                // id -> index
  std::map<std::pair<int, std::string>, int> stratum_of;
  std::vector<std::optional<bool>> study_ref_flag;

  auto field = [&](const std::vector<std::string>& f, const char* name)
      -> std::string {
    auto it = col.find(name);
    if (it == col.end()) return "";
    return trim(f[it->second]);
  };

  for (std::size_t li = 1; li < lines.size(); ++li) {
    const std::string line = trim(lines[li]);
    if (line.empty()) continue;
    ++report.n_rows;
    const std::string where = path + " line " + std::to_string(li + 1);
    const std::vector<std::string> f = split(line, ',');
    if (f.size() != header_raw.size())
      throw DataError(where + ": expected " +
                      std::to_string(header_raw.size()) + " fields, got " +
                      std::to_string(f.size()));

    const std::string study_id = field(f, "study");
    const std::string stratum_id = field(f, "stratum");
    if (study_id.empty() || stratum_id.empty())
      throw DataError(where + ": study and stratum must be nonempty");

    Subject sub;
    const long long y = parse_int(field(f, "case"), where + ", case");
    if (y != 0 && y != 1) throw DataError(where + ": case must be 0 or 1");
    sub.y = static_cast<int>(y);

    const std::string w_raw = field(f, "w");
    if (!w_raw.empty()) sub.w = parse_double(w_raw, where + ", w");
    const std::string x_raw = field(f, "x_ref");
    if (!x_raw.empty()) sub.x_ref = parse_double(x_raw, where + ", x_ref");

    const std::string cal_raw = field(f, "in_cal");
    if (!cal_raw.empty()) {
      const long long v = parse_int(cal_raw, where + ", in_cal");
      if (v != 0 && v != 1) throw DataError(where + ": in_cal must be 0 or 1");
      sub.in_calibration_subset = v == 1;
    }
    bool is_ref = false;
    const std::string ref_raw = field(f, "is_reference_lab");
    if (!ref_raw.empty()) {
      const long long v = parse_int(ref_raw, where + ", is_reference_lab");
      if (v != 0 && v != 1)
        throw DataError(where + ": is_reference_lab must be 0 or 1");
      is_ref = v == 1;
    }
    sub.z.resize(n_z);
    for (int j = 0; j < n_z; ++j) {
      const std::string raw = trim(f[z_cols[j].second]);
      if (raw.empty())
        throw DataError(where + ": missing confounder z_" +
                        std::to_string(j + 1));
      sub.z[j] = parse_double(raw, where + ", z_" + std::to_string(j + 1));
    }

    // Hard schema errors citing the offending row.
    if (sub.in_calibration_subset && sub.y != 0)
      throw DataError(where +
                      ": in_cal = 1 on a case row; calibration subsets "
                      "contain controls only");
    if (sub.in_calibration_subset && !sub.x_ref)
      throw DataError(where + ": in_cal = 1 requires x_ref");

    int s;
    auto it = study_of.find(study_id);
    if (it == study_of.end()) {
      s = static_cast<int>(data.studies.size());
      study_of[study_id] = s;
      data.studies.push_back({study_id, is_ref});
      study_ref_flag.push_back(is_ref);
    } else {
      s = it->second;
      if (study_ref_flag[s] != std::optional<bool>(is_ref))
        throw DataError(where + ": is_reference_lab differs within study '" +
                        study_id + "'");
    }
    if (data.studies[s].is_reference_lab) {
      if (!sub.x_ref)
        throw DataError(where + ": reference-lab study '" + study_id +
                        "' requires x_ref for every subject");
      if (!sub.w) ++report.n_missing_w;  // allowed, just tallied
    } else {
      if (!sub.w)
        throw DataError(where + ": local-lab study '" + study_id +
                        "' requires w for every subject");
      if (!sub.x_ref) ++report.n_missing_x_ref;
    }
    if (data.studies[s].is_reference_lab && sub.in_calibration_subset) {
      report.warnings.push_back(
          where + ": in_cal ignored in reference-lab study '" + study_id +
          "'");
      sub.in_calibration_subset = false;
    }

    const auto key = std::make_pair(s, stratum_id);
    auto st_it = stratum_of.find(key);
    if (st_it == stratum_of.end()) {
      stratum_of[key] = static_cast<int>(data.strata.size());
      Stratum st;
      st.study = s;
      st.stratum_id = stratum_id;
      data.strata.push_back(std::move(st));
      st_it = stratum_of.find(key);
    }
    data.strata[st_it->second].subjects.push_back(std::move(sub));
  }

  // Drop uninformative strata with a warning.
  std::vector<Stratum> kept;
  kept.reserve(data.strata.size());
  for (auto& st : data.strata) {
    if (st.informative()) {
      kept.push_back(std::move(st));
    } else {
      ++report.n_strata_dropped;
      report.warnings.push_back("stratum '" + st.stratum_id + "' of study '" +
                                data.studies[st.study].id +
                                "' has no case/control contrast; dropped");
    }
  }
  data.strata = std::move(kept);

  report.n_studies = static_cast<int>(data.studies.size());
  report.n_strata_kept = static_cast<int>(data.strata.size());
  for (const auto& info : data.studies) {
    report.study_sizes[info.id] = {0, 0};
    report.calibration_counts[info.id] = 0;
  }
  for (const auto& st : data.strata)
    for (const auto& sub : st.subjects) {
      auto& sz = report.study_sizes[data.studies[st.study].id];
      (sub.y ? sz.first : sz.second) += 1;
      if (sub.in_calibration_subset)
        report.calibration_counts[data.studies[st.study].id] += 1;
    }
  return res;
}

inline void save_dataset(const PooledDataset& data, const std::string& path) {
  const int n_z = data.confounder_count();
  std::ostringstream out;
  out << "study,stratum,case,w,x_ref,in_cal,is_reference_lab";
  for (int j = 1; j <= n_z; ++j) out << ",z_" << j;
  out << "\n";
  for (const auto& st : data.strata) {
    const StudyInfo& info = data.studies[st.study];
    for (const auto& sub : st.subjects) {
      out << info.id << ',' << st.stratum_id << ',' << sub.y << ','
          << (sub.w ? fmt_exact(*sub.w) : "") << ','
          << (sub.x_ref ? fmt_exact(*sub.x_ref) : "") << ','
          << (sub.in_calibration_subset ? 1 : 0) << ','
          << (info.is_reference_lab ? 1 : 0);
      for (double z : sub.z) out << ',' << fmt_exact(z);
      out << "\n";
    }
  }
  write_file(path, out.str());
}

// ---------------------------------------------------------------------------
// Simulation config files
// ---------------------------------------------------------------------------

struct SimulationSpec {
  SimulationConfig config;
  std::vector<double> variance_ratios;  // empty = single battery
};

inline CalibrationStrategy parse_strategy(const std::string& name) {
  if (name == "naive") return CalibrationStrategy::naive;
  if (name == "internalized") return CalibrationStrategy::internalized;
  if (name == "full") return CalibrationStrategy::full;
  throw ConfigError("unknown strategy '" + name +
                    "' (expected naive, internalized or full)");
}

inline SimulationSpec parse_simulation_config(const std::string& text,
                                              const std::string& origin) {
  SimulationSpec spec;
  SimulationConfig& cfg = spec.config;
  bool saw_beta_x1 = false, saw_beta_x2 = false, saw_seed = false,
       saw_replicates = false, saw_proportion = false;

  int line_no = 0;
  std::istringstream in(text);
  std::string raw;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::size_t hash = raw.find('#');
    if (hash != std::string::npos) raw = raw.substr(0, hash);
    const std::string line = trim(raw);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + " line " + std::to_string(line_no) +
                        ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    const std::string where = origin + ", key " + key;

    if (key == "label") cfg.label = val;
    else if (key == "n_studies") cfg.n_studies = static_cast<int>(parse_int(val, where));
    else if (key == "pairs_per_study") cfg.pairs_per_study = static_cast<int>(parse_int(val, where));
    else if (key == "mu_x") cfg.mu_x = parse_double(val, where);
    else if (key == "sigma2_x") cfg.sigma2_x = parse_double(val, where);
    else if (key == "a") cfg.a = parse_double_list(val, where);
    else if (key == "b") cfg.b = parse_double_list(val, where);
    else if (key == "sigma2_w") cfg.sigma2_w = parse_double_list(val, where);
    else if (key == "beta_x1") { cfg.beta_x1 = parse_double(val, where); saw_beta_x1 = true; }
    else if (key == "beta_x2") { cfg.beta_x2 = parse_double(val, where); saw_beta_x2 = true; }
    else if (key == "beta0_sd") cfg.beta0_sd = parse_double(val, where);
    else if (key == "calibration_proportion") { cfg.calibration_proportion = parse_double(val, where); saw_proportion = true; }
    else if (key == "knots") {
      const auto k = parse_double_list(val, where);
      if (k.size() != 3) throw ConfigError(where + ": knots needs 3 values");
      cfg.knots = {k[0], k[1], k[2]};
    }
    else if (key == "n_replicates") { cfg.n_replicates = static_cast<int>(parse_int(val, where)); saw_replicates = true; }
    else if (key == "seed") { cfg.seed = static_cast<std::uint64_t>(parse_int(val, where)); saw_seed = true; }
    else if (key == "strategies") {
      cfg.strategies.clear();
      for (const auto& tok : split(val, ','))
        if (!trim(tok).empty()) cfg.strategies.push_back(parse_strategy(trim(tok)));
    }
    else if (key == "variance_ratios") spec.variance_ratios = parse_double_list(val, where);
    else if (key == "max_pool_draws") cfg.max_pool_draws = static_cast<int>(parse_int(val, where));
    else throw ConfigError(origin + ": unknown key '" + key + "'");
  }
  if (!saw_beta_x1 || !saw_beta_x2)
    throw ConfigError(origin + ": beta_x1 and beta_x2 are required");
  if (!saw_seed) throw ConfigError(origin + ": seed is required");
  if (!saw_replicates) throw ConfigError(origin + ": n_replicates is required");
  if (!saw_proportion)
    throw ConfigError(origin + ": calibration_proportion is required");
  cfg.validate();
  return spec;
}

inline SimulationSpec load_simulation_config(const std::string& path) {
  return parse_simulation_config(read_file(path), path);
}

inline std::string join_list(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i)
    out += (i ? "," : "") + fmt_exact(v[i]);
  return out;
}

// Flat config serialization; re-parsable for exact reruns.
inline std::string serialize_simulation_config(const SimulationSpec& spec) {
  const SimulationConfig& cfg = spec.config;
  std::ostringstream out;
  out << "label = " << cfg.label << "\n";
  out << "n_studies = " << cfg.n_studies << "\n";
  out << "pairs_per_study = " << cfg.pairs_per_study << "\n";
  out << "mu_x = " << fmt_exact(cfg.mu_x) << "\n";
  out << "sigma2_x = " << fmt_exact(cfg.sigma2_x) << "\n";
  out << "a = " << join_list(cfg.a) << "\n";
  out << "b = " << join_list(cfg.b) << "\n";
  out << "sigma2_w = " << join_list(cfg.sigma2_w) << "\n";
  out << "beta_x1 = " << fmt_exact(cfg.beta_x1) << "\n";
  out << "beta_x2 = " << fmt_exact(cfg.beta_x2) << "\n";
  out << "beta0_sd = " << fmt_exact(cfg.beta0_sd) << "\n";
  out << "calibration_proportion = " << fmt_exact(cfg.calibration_proportion)
      << "\n";
  out << "knots = "
      << join_list({cfg.knots[0], cfg.knots[1], cfg.knots[2]}) << "\n";
  out << "n_replicates = " << cfg.n_replicates << "\n";
  out << "seed = " << cfg.seed << "\n";
  out << "strategies = ";
  for (std::size_t i = 0; i < cfg.strategies.size(); ++i)
    out << (i ? "," : "") << strategy_name(cfg.strategies[i]);
  out << "\n";
  if (!spec.variance_ratios.empty())
    out << "variance_ratios = " << join_list(spec.variance_ratios) << "\n";
  out << "max_pool_draws = " << cfg.max_pool_draws << "\n";
  return out.str();
}

// ---------------------------------------------------------------------------
// Result serialization
// ---------------------------------------------------------------------------

inline const StrategyOC* find_strategy(const OperatingCharacteristics& oc,
                                       CalibrationStrategy s) {
  for (const auto& soc : oc.per_strategy)
    if (soc.strategy == s) return &soc;
  return nullptr;
}

// One row per battery, strategy-by-statistic columns per coefficient in the
// order internalized, full, naive.
inline std::string ops_csv(const SimulationSpec& spec,
                           const std::vector<OperatingCharacteristics>& ocs) {
  std::ostringstream out;
  out << "label,variance_ratio,calib_proportion,replicates,beta_x1_true,"
         "beta_x2_true";
  const char* coefs[2] = {"x1", "x2"};
  const char* strats[3] = {"in", "fc", "naive"};
  for (const char* c : coefs)
    for (const char* s : strats)
      out << ",relbias_" << c << "_" << s << ",sd_" << c << "_" << s
          << ",cover_" << c << "_" << s;
  out << ",bias_type_x1,bias_type_x2,failed_in,failed_fc,failed_naive\n";

  const CalibrationStrategy order[3] = {CalibrationStrategy::internalized,
                                        CalibrationStrategy::full,
                                        CalibrationStrategy::naive};
  for (const auto& oc : ocs) {
    out << spec.config.label << ','
        << (oc.variance_ratio ? fmt_g(*oc.variance_ratio) : "") << ','
        << fmt_g(spec.config.calibration_proportion) << ',' << oc.n_replicates
        << ',' << fmt_g(spec.config.beta_x1) << ','
        << fmt_g(spec.config.beta_x2);
    for (int c = 0; c < 2; ++c)
      for (const CalibrationStrategy s : order) {
        const StrategyOC* soc = find_strategy(oc, s);
        if (!soc || soc->coef[c].n_used == 0) {
          out << ",,,";
          continue;
        }
        out << ',' << fmt_g(soc->coef[c].bias) << ','
            << fmt_g(soc->coef[c].empirical_sd) << ','
            << fmt_g(soc->coef[c].coverage);
      }
    for (int c = 0; c < 2; ++c) {
      const bool rel = (c == 0 ? spec.config.beta_x1 : spec.config.beta_x2) != 0.0;
      out << ',' << (rel ? "relative" : "absolute");
    }
    for (const CalibrationStrategy s : order) {
      const StrategyOC* soc = find_strategy(oc, s);
      out << ',';
      if (soc) out << soc->n_failed;
    }
    out << "\n";
  }
  return out.str();
}

inline std::string raw_csv(
    const std::vector<std::pair<std::optional<double>,
                                std::vector<RawEstimate>>>& batteries) {
  std::ostringstream out;
  out << "variance_ratio,replicate,strategy,converged,beta_x1,se_x1,cover_x1,"
         "beta_x2,se_x2,cover_x2,error\n";
  for (const auto& [ratio, rows] : batteries)
    for (const auto& r : rows) {
      out << (ratio ? fmt_g(*ratio) : "") << ',' << r.replicate << ','
          << strategy_name(r.strategy) << ',' << (r.ok ? 1 : 0) << ',';
      if (r.ok) {
        out << fmt_exact(r.est[0]) << ',' << fmt_exact(r.se[0]) << ','
            << (r.covered[0] ? 1 : 0) << ',' << fmt_exact(r.est[1]) << ','
            << fmt_exact(r.se[1]) << ',' << (r.covered[1] ? 1 : 0) << ',';
      } else {
        out << ",,,,,,";
      }
      std::string err = r.error;
      for (char& ch : err)
        if (ch == ',' || ch == '\n') ch = ';';
      out << err << "\n";
    }
  return out.str();
}

inline nlohmann::json matrix_json(const Eigen::MatrixXd& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (int i = 0; i < m.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (int j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(row);
  }
  return rows;
}

inline nlohmann::json fit_result_json(const FitResult& fit,
                                      const ValidationReport& report) {
  nlohmann::json j;
  j["strategy"] = strategy_name(fit.strategy);
  j["basis"]["kind"] = fit.basis.kind == BasisKind::restricted_cubic_3knot
                           ? "rcs3"
                           : "linear";
  j["basis"]["knots"] = fit.basis.knots;

  const auto names = coefficient_names(
      fit.basis, static_cast<int>(fit.coef.beta_z.size()));
  const Eigen::VectorXd flat = fit.coef.flat();
  nlohmann::json coef = nlohmann::json::array();
  for (int i = 0; i < flat.size(); ++i) {
    nlohmann::json c;
    c["name"] = names[i];
    c["estimate"] = flat[i];
    c["se"] = fit.se(i);
    c["ci95_lo"] = flat[i] - z_975() * fit.se(i);
    c["ci95_hi"] = flat[i] + z_975() * fit.se(i);
    coef.push_back(c);
  }
  j["coefficients"] = coef;
  j["vcov_beta"] = matrix_json(fit.vcov_beta);
  j["vcov_kind"] = fit.vcov_model_based ? "model_based" : "sandwich";

  nlohmann::json wald = nlohmann::json::array();
  for (const auto& t : fit.wald) {
    nlohmann::json w;
    w["label"] = t.label;
    w["terms"] = t.terms;
    w["statistic"] = t.statistic;
    w["df"] = t.df;
    w["p_value"] = t.p_value;
    wald.push_back(w);
  }
  j["wald"] = wald;

  j["convergence"]["converged"] = fit.convergence.converged;
  j["convergence"]["iterations"] = fit.convergence.iterations;
  j["convergence"]["final_loglik"] = fit.convergence.final_loglik;
  j["convergence"]["max_score"] = fit.convergence.max_score;
  j["convergence"]["strata_used"] = fit.convergence.n_strata_used;
  j["convergence"]["strata_dropped"] = fit.convergence.n_strata_dropped;

  j["validation"]["rows"] = report.n_rows;
  j["validation"]["strata_kept"] = report.n_strata_kept;
  j["validation"]["strata_dropped"] = report.n_strata_dropped;
  j["validation"]["warnings"] = report.warnings;
  return j;
}

inline nlohmann::json calibration_json(
    const PooledDataset& data,
    const std::vector<std::optional<CalibrationFit>>& fits,
    CalibrationStrategy strategy) {
  nlohmann::json j;
  j["strategy"] = strategy_name(strategy);
  nlohmann::json studies = nlohmann::json::array();
  for (std::size_t s = 0; s < data.studies.size(); ++s) {
    nlohmann::json e;
    e["study"] = data.studies[s].id;
    e["is_reference_lab"] = data.studies[s].is_reference_lab;
    if (fits.size() > s && fits[s]) {
      e["a"] = fits[s]->a_hat;
      e["se_a"] = fits[s]->se_a;
      e["b"] = fits[s]->b_hat;
      e["se_b"] = fits[s]->se_b;
      e["n_cal"] = fits[s]->n_cal;
      e["residual_variance"] = fits[s]->residual_variance;
    }
    studies.push_back(e);
  }
  j["studies"] = studies;
  return j;
}

inline std::string curve_csv(const std::vector<CurvePoint>& curve) {
  std::ostringstream out;
  out << "x,log_rr,lo95,hi95\n";
  for (const auto& pt : curve)
    out << fmt_g(pt.x) << ',' << fmt_g(pt.log_rr) << ',' << fmt_g(pt.lo95)
        << ',' << fmt_g(pt.hi95) << "\n";
  return out.str();
}

// ---------------------------------------------------------------------------
// Command drivers
// ---------------------------------------------------------------------------

struct FitCommandOptions {
  std::string data_path;
  std::string out_dir;
  std::string strategy = "full";           // naive | internalized | full
  std::string basis = "rcs3";              // rcs3 | linear
  std::vector<double> knot_quantiles{0.25, 0.5, 0.75};
  std::vector<double> explicit_knots;      // overrides quantile placement
  std::string knot_source = "calibrated";  // calibrated | reference
  std::optional<double> ref_level;
  std::string curve_grid;                  // "min:max:step", optional
  bool cluster_inflation = false;
};

struct SimulateCommandOptions {
  std::string config_path;
  std::string out_dir;
  std::optional<int> replicates_override;
  std::optional<int> threads;
  bool keep_raw = false;
};

inline int resolve_threads(const std::optional<int>& requested) {
  if (requested) return std::max(1, *requested);
  if (const char* env = std::getenv("POOLED_SPLINE_THREADS")) {
    try {
      return std::max(1, static_cast<int>(parse_int(env,
                                                    "POOLED_SPLINE_THREADS")));
    } catch (const Error&) {
      throw ConfigError("POOLED_SPLINE_THREADS is not an integer");
    }
  }
  return 1;
}

inline std::vector<double> parse_grid(const std::string& s) {
  const auto parts = split(s, ':');
  if (parts.size() != 3)
    throw ConfigError("curve grid must be min:max:step, got '" + s + "'");
  const double lo = parse_double(parts[0], "grid min");
  const double hi = parse_double(parts[1], "grid max");
  const double step = parse_double(parts[2], "grid step");
  if (!(step > 0.0) || hi < lo)
    throw ConfigError("curve grid must satisfy min <= max, step > 0");
  std::vector<double> grid;
  for (double x = lo; x <= hi + 1e-12 * std::max(1.0, std::abs(hi)); x += step)
    grid.push_back(x);
  return grid;
}

inline int run_fit_command(const FitCommandOptions& opt, std::ostream& log) {
  if (opt.out_dir.empty())
    throw ConfigError("fit: --out is required");
  const CalibrationStrategy strategy = parse_strategy(opt.strategy);
  if (opt.basis != "rcs3" && opt.basis != "linear")
    throw ConfigError("fit: --basis must be rcs3 or linear");
  if (opt.knot_source != "calibrated" && opt.knot_source != "reference")
    throw ConfigError("fit: --knot-source must be calibrated or reference");

  LoadResult loaded = load_dataset(opt.data_path);
  log << loaded.report.to_text();

  std::vector<std::optional<CalibrationFit>> fits(loaded.data.studies.size());
  if (strategy != CalibrationStrategy::naive)
    fits = fit_all_calibrations(loaded.data);
  const PooledDataset calibrated = calibrate(loaded.data, fits, strategy);

  SplineBasis basis;
  if (opt.basis == "linear") {
    basis = make_linear_basis();
  } else if (!opt.explicit_knots.empty()) {
    if (opt.explicit_knots.size() != 3)
      throw ConfigError("fit: --knots needs exactly 3 values");
    basis.kind = BasisKind::restricted_cubic_3knot;
    basis.knots = opt.explicit_knots;
    basis.validate();
  } else {
    std::vector<double> values;
    for (const auto& st : calibrated.strata)
      for (const auto& sub : st.subjects) {
        if (opt.knot_source == "calibrated") {
          values.push_back(*sub.x_tilde);
        } else if (sub.x_ref) {
          values.push_back(*sub.x_ref);
        }
      }
    if (values.empty())
      throw DataError("fit: no values available for knot placement from "
                      "source '" + opt.knot_source + "'");
    basis = make_basis(values, opt.knot_quantiles);
  }

  std::filesystem::create_directories(opt.out_dir);
  const std::filesystem::path out(opt.out_dir);

  FitResult fit;
  try {
    fit = analyze_calibrated(calibrated, basis, fits, strategy, {},
                             {opt.cluster_inflation});
  } catch (const ConvergenceError& e) {
    nlohmann::json diag;
    diag["error"] = e.what();
    nlohmann::json traj = nlohmann::json::array();
    for (const auto& it : e.trajectory) {
      nlohmann::json t;
      t["iteration"] = it.iteration;
      t["loglik"] = it.loglik;
      t["max_score"] = it.max_score;
      t["max_step"] = it.max_step;
      t["halvings"] = it.halvings;
      traj.push_back(t);
    }
    diag["trajectory"] = traj;
    write_file((out / "diagnostics.json").string(), diag.dump(2) + "\n");
    log << "fit did not converge; trajectory written to diagnostics.json\n";
    return 2;
  }

  write_file((out / "fit.json").string(),
             fit_result_json(fit, loaded.report).dump(2) + "\n");
  write_file((out / "calibration.json").string(),
             calibration_json(loaded.data, fits, strategy).dump(2) + "\n");

  if (opt.ref_level) {
    std::vector<double> grid;
    if (!opt.curve_grid.empty()) {
      grid = parse_grid(opt.curve_grid);
    } else {
      double lo = 1e300, hi = -1e300;
      for (const auto& st : calibrated.strata)
        for (const auto& sub : st.subjects) {
          lo = std::min(lo, *sub.x_tilde);
          hi = std::max(hi, *sub.x_tilde);
        }
      const double step = (hi - lo) / 100.0;
      for (int i = 0; i <= 100; ++i) grid.push_back(lo + step * i);
    }
    const auto curve =
        log_rr_curve(fit.coef, fit.vcov_beta, basis, grid, *opt.ref_level);
    write_file((out / "curve.csv").string(), curve_csv(curve));
  }

  log << "fit written to " << (out / "fit.json").string() << "\n";
  return 0;
}

inline int run_simulate_command(const SimulateCommandOptions& opt,
                                std::ostream& log) {
  if (opt.out_dir.empty())
    throw ConfigError("simulate: --out is required");
  SimulationSpec spec = load_simulation_config(opt.config_path);
  if (opt.replicates_override) {
    spec.config.n_replicates = *opt.replicates_override;
    spec.config.validate();
  }
  const int threads = resolve_threads(opt.threads);

  std::filesystem::create_directories(opt.out_dir);
  const std::filesystem::path out(opt.out_dir);

  std::vector<OperatingCharacteristics> ocs;
  std::vector<std::pair<std::optional<double>, std::vector<RawEstimate>>> raws;
  if (spec.variance_ratios.empty()) {
    std::vector<RawEstimate> raw;
    ocs.push_back(run_battery(spec.config, threads,
                              opt.keep_raw ? &raw : nullptr));
    if (opt.keep_raw) raws.emplace_back(std::nullopt, std::move(raw));
  } else {
    for (double ratio : spec.variance_ratios) {
      SimulationConfig cfg = spec.config;
      cfg.variance_ratio = ratio;
      std::vector<RawEstimate> raw;
      ocs.push_back(run_battery(cfg, threads, opt.keep_raw ? &raw : nullptr));
      if (opt.keep_raw) raws.emplace_back(ratio, std::move(raw));
    }
  }

  write_file((out / "ops.csv").string(), ops_csv(spec, ocs));
  if (opt.keep_raw) write_file((out / "raw.csv").string(), raw_csv(raws));
  write_file((out / "manifest.cfg").string(),
             serialize_simulation_config(spec));

  for (const auto& oc : ocs)
    for (const auto& soc : oc.per_strategy)
      log << "battery" << (oc.variance_ratio
                               ? " (ratio " + fmt_g(*oc.variance_ratio) + ")"
                               : "")
          << " " << strategy_name(soc.strategy)
          << ": bias_x1 = " << fmt_g(soc.coef[0].bias, 4)
          << ", cover_x1 = " << fmt_g(soc.coef[0].coverage, 4)
          << ", failed = " << soc.n_failed << "\n";
  log << "results written to " << out.string() << "\n";
  return 0;
}

}  // namespace pooledspline
