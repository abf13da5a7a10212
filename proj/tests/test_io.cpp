#include <catch2/catch_amalgamated.hpp>

#include <unistd.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "pooledspline/io.hpp"
#include "pooledspline/rng.hpp"

using namespace pooledspline;

namespace {

std::filesystem::path temp_dir() {
  static int counter = 0;
  auto dir = std::filesystem::temp_directory_path() /
             ("pooledspline_test_" + std::to_string(::getpid()) + "_" +
              std::to_string(counter++));
  std::filesystem::create_directories(dir);
  return dir;
}

// Two-study file mimicking the applied pooled analysis layout: 348/694 and
// 267/519 cases/controls with 29 calibration controls per study.
std::string applied_layout_csv() {
  std::ostringstream out;
  out << "study,stratum,case,w,x_ref,in_cal,is_reference_lab\n";
  RngStream rng(7, 0);
  auto emit_study = [&](const std::string& name, int strata12, int strata11,
                        int n_cal) {
    int cal_left = n_cal;
    int stratum = 0;
    auto emit_stratum = [&](int n_controls) {
      ++stratum;
      out << name << ',' << stratum << ",1," << fmt_g(20.0 + rng.normal())
          << ",,0,0\n";
      for (int c = 0; c < n_controls; ++c) {
        const double w = 20.0 + rng.normal();
        if (cal_left > 0) {
          --cal_left;
          out << name << ',' << stratum << ",0," << fmt_g(w) << ','
              << fmt_g(-3.0 + 1.1 * w + 0.1 * rng.normal()) << ",1,0\n";
        } else {
          out << name << ',' << stratum << ",0," << fmt_g(w) << ",,0,0\n";
        }
      }
    };
    for (int j = 0; j < strata12; ++j) emit_stratum(2);
    for (int j = 0; j < strata11; ++j) emit_stratum(1);
  };
  emit_study("cohort_a", 346, 2, 29);   // 348 cases, 694 controls
  emit_study("cohort_b", 252, 15, 29);  // 267 cases, 519 controls
  return out.str();
}

}  // namespace

TEST_CASE("applied-layout ingestion reports calibration subset sizes",
          "[io]") {
  const auto dir = temp_dir();
  const auto path = dir / "pooled.csv";
  write_file(path.string(), applied_layout_csv());
  const LoadResult res = load_dataset(path.string());
  CHECK(res.report.n_studies == 2);
  CHECK(res.report.calibration_counts.at("cohort_a") == 29);
  CHECK(res.report.calibration_counts.at("cohort_b") == 29);
  CHECK(res.report.study_sizes.at("cohort_a") == std::make_pair(348, 694));
  CHECK(res.report.study_sizes.at("cohort_b") == std::make_pair(267, 519));
  CHECK(res.report.n_strata_dropped == 0);
  CHECK(res.data.strata.size() == 348 + 267);
}

TEST_CASE("uninformative strata are dropped with a warning", "[io]") {
  const auto dir = temp_dir();
  const auto path = dir / "d.csv";
  const std::string content =
      "study,stratum,case,w\n"
      "s1,1,1,2.0\n"
      "s1,1,0,1.5\n"
      "s1,2,0,1.0\n"  // two controls, no case
      "s1,2,0,1.1\n";
  write_file(path.string(), content);
  const LoadResult res = load_dataset(path.string());
  CHECK(res.report.n_strata_kept == 1);
  CHECK(res.report.n_strata_dropped == 1);
  REQUIRE(!res.report.warnings.empty());
  CHECK(res.report.warnings[0].find("dropped") != std::string::npos);
  // Validation never mutates the input file.
  CHECK(read_file(path.string()) == content);
}

TEST_CASE("in_cal in a reference-lab study is ignored with a warning",
          "[io]") {
  const auto dir = temp_dir();
  const auto path = dir / "refcal.csv";
  write_file(path.string(),
             "study,stratum,case,w,x_ref,in_cal,is_reference_lab\n"
             "r1,1,1,,2.0,0,1\n"
             "r1,1,0,,1.5,1,1\n");
  const LoadResult res = load_dataset(path.string());
  CHECK(res.report.calibration_counts.at("r1") == 0);
  REQUIRE(!res.report.warnings.empty());
  CHECK(res.report.warnings[0].find("in_cal ignored") != std::string::npos);
  for (const auto& st : res.data.strata)
    for (const auto& sub : st.subjects)
      CHECK(!sub.in_calibration_subset);
}

TEST_CASE("schema violations are hard errors with row numbers", "[io]") {
  const auto dir = temp_dir();

  auto expect_error = [&](const std::string& name, const std::string& content,
                          const std::string& needle) {
    const auto path = dir / name;
    write_file(path.string(), content);
    try {
      (void)load_dataset(path.string());
      FAIL("expected DataError for " << name);
    } catch (const DataError& e) {
      CHECK_THAT(e.what(), Catch::Matchers::ContainsSubstring(needle));
    }
  };

  // Calibration flag on a case row (line 3).
  expect_error("case_cal.csv",
               "study,stratum,case,w,x_ref,in_cal\n"
               "s1,1,0,1.0,1.1,1\n"
               "s1,1,1,2.0,2.1,1\n",
               "line 3");
  // Missing required column.
  expect_error("nocol.csv", "study,stratum,w\ns1,1,0.5\n", "case");
  // Non-numeric biomarker.
  expect_error("nonnum.csv",
               "study,stratum,case,w\ns1,1,1,abc\ns1,1,0,1.0\n", "number");
  // Missing w in a local-lab study.
  expect_error("now.csv",
               "study,stratum,case,w\ns1,1,1,\ns1,1,0,1.0\n", "requires w");
  // Missing x_ref in a reference-lab study.
  expect_error("norefx.csv",
               "study,stratum,case,w,x_ref,is_reference_lab\n"
               "r1,1,1,,2.0,1\n"
               "r1,1,0,,,1\n",
               "requires x_ref");
  // in_cal without x_ref.
  expect_error("noref.csv",
               "study,stratum,case,w,in_cal\ns1,1,1,2.0,0\ns1,1,0,1.0,1\n",
               "x_ref");
  // Unknown column.
  expect_error("unk.csv", "study,stratum,case,w,foo\ns1,1,1,1.0,2\n", "foo");
}

TEST_CASE("load-serialize-load round-trips the dataset", "[io]") {
  SimulationConfig cfg;
  cfg.n_studies = 2;
  cfg.pairs_per_study = 40;
  cfg.a = {-1.0, 1.0};
  cfg.b = {0.8, 1.2};
  cfg.sigma2_w = {1.0, 0.5};
  cfg.beta_x1 = -0.3;
  cfg.beta_x2 = 0.08;
  cfg.calibration_proportion = 0.2;
  cfg.n_replicates = 1;
  cfg.seed = 5;
  PooledDataset data = generate_dataset(cfg, 0);
  // Add confounders to exercise the z columns.
  RngStream rng(1, 1);
  for (auto& st : data.strata)
    for (auto& sub : st.subjects) sub.z = {rng.normal(), rng.uniform()};

  const auto dir = temp_dir();
  const auto p1 = dir / "a.csv";
  const auto p2 = dir / "b.csv";
  save_dataset(data, p1.string());
  const LoadResult r1 = load_dataset(p1.string());
  save_dataset(r1.data, p2.string());
  const LoadResult r2 = load_dataset(p2.string());

  REQUIRE(r1.data.strata.size() == data.strata.size());
  REQUIRE(r2.data.strata.size() == data.strata.size());
  for (std::size_t j = 0; j < data.strata.size(); ++j) {
    const Stratum& orig = data.strata[j];
    const Stratum& back = r1.data.strata[j];
    CHECK(back.stratum_id == orig.stratum_id);
    CHECK(r1.data.studies[back.study].id == data.studies[orig.study].id);
    REQUIRE(back.subjects.size() == orig.subjects.size());
    for (std::size_t i = 0; i < orig.subjects.size(); ++i) {
      const Subject& a = orig.subjects[i];
      const Subject& b = back.subjects[i];
      CHECK(a.y == b.y);
      CHECK(a.w == b.w);
      CHECK(a.x_ref == b.x_ref);
      CHECK(a.in_calibration_subset == b.in_calibration_subset);
      CHECK(a.z == b.z);
    }
  }
  // Byte-stable second pass.
  CHECK(read_file(p1.string()) == read_file(p2.string()));
}

TEST_CASE("config files parse, validate and round-trip", "[io]") {
  const std::string text =
      "# comment\n"
      "label = demo\n"
      "n_studies = 2\n"
      "pairs_per_study = 50\n"
      "a = -1, 1\n"
      "b = 0.8, 1.2\n"
      "sigma2_w = 1.0, 0.5\n"
      "beta_x1 = -0.25\n"
      "beta_x2 = 0.08\n"
      "calibration_proportion = 0.2\n"
      "n_replicates = 4\n"
      "seed = 11\n"
      "strategies = naive, full\n";
  const SimulationSpec spec = parse_simulation_config(text, "inline");
  CHECK(spec.config.label == "demo");
  CHECK(spec.config.n_studies == 2);
  CHECK(spec.config.strategies.size() == 2);
  CHECK(spec.config.strategies[1] == CalibrationStrategy::full);

  const SimulationSpec back =
      parse_simulation_config(serialize_simulation_config(spec), "rt");
  CHECK(back.config.seed == spec.config.seed);
  CHECK(back.config.a == spec.config.a);
  CHECK(back.config.beta_x1 == spec.config.beta_x1);
  CHECK(serialize_simulation_config(back) ==
        serialize_simulation_config(spec));

  CHECK_THROWS_AS(parse_simulation_config("beta_x1 = 0\n", "x"), ConfigError);
  CHECK_THROWS_AS(parse_simulation_config(text + "bogus_key = 1\n", "x"),
                  ConfigError);
}

TEST_CASE("fit command writes the documented outputs", "[io]") {
  SimulationConfig cfg;
  cfg.n_studies = 2;
  cfg.pairs_per_study = 120;
  cfg.a = {-1.0, 1.0};
  cfg.b = {0.8, 1.2};
  cfg.sigma2_w = {1.0, 0.5};
  cfg.beta_x1 = -0.4;
  cfg.beta_x2 = 0.08;
  cfg.calibration_proportion = 0.25;
  cfg.n_replicates = 1;
  cfg.seed = 17;
  const PooledDataset data = generate_dataset(cfg, 0);

  const auto dir = temp_dir();
  const auto csv = dir / "data.csv";
  save_dataset(data, csv.string());

  FitCommandOptions opt;
  opt.data_path = csv.string();
  opt.out_dir = (dir / "out").string();
  opt.strategy = "full";
  opt.ref_level = -1.0;
  opt.curve_grid = "-2:2:0.5";
  std::ostringstream log;
  const int rc = run_fit_command(opt, log);
  CHECK(rc == 0);
  REQUIRE(std::filesystem::exists(dir / "out" / "fit.json"));
  REQUIRE(std::filesystem::exists(dir / "out" / "calibration.json"));
  REQUIRE(std::filesystem::exists(dir / "out" / "curve.csv"));

  const auto fit = nlohmann::json::parse(read_file(
      (dir / "out" / "fit.json").string()));
  CHECK(fit["strategy"] == "full");
  CHECK(fit["convergence"]["converged"] == true);
  CHECK(fit["coefficients"].size() == 2);
  CHECK(fit["vcov_kind"] == "sandwich");
  const auto cal = nlohmann::json::parse(read_file(
      (dir / "out" / "calibration.json").string()));
  CHECK(cal["studies"].size() == 2);
  CHECK(cal["studies"][0].contains("a"));

  const std::string curve = read_file((dir / "out" / "curve.csv").string());
  CHECK(curve.rfind("x,log_rr,lo95,hi95\n", 0) == 0);

  // Internalized and full differ only through calibration-subset handling;
  // both must produce valid output on the same data.
  FitCommandOptions opt2 = opt;
  opt2.strategy = "internalized";
  opt2.out_dir = (dir / "out2").string();
  CHECK(run_fit_command(opt2, log) == 0);
  const auto fit2 = nlohmann::json::parse(read_file(
      (dir / "out2" / "fit.json").string()));
  const double b1_full = fit["coefficients"][0]["estimate"].get<double>();
  const double b1_int = fit2["coefficients"][0]["estimate"].get<double>();
  CHECK(b1_full != b1_int);                      // strategies do differ
  CHECK(std::abs(b1_full - b1_int) < 0.5);       // but typically close

  // Linear basis drops to a single biomarker coefficient.
  FitCommandOptions opt3 = opt;
  opt3.basis = "linear";
  opt3.out_dir = (dir / "out3").string();
  opt3.ref_level.reset();
  CHECK(run_fit_command(opt3, log) == 0);
  const auto fit3 = nlohmann::json::parse(read_file(
      (dir / "out3" / "fit.json").string()));
  CHECK(fit3["coefficients"].size() == 1);

  // Without --curve-grid the grid defaults to the observed range with
  // 101 points.
  FitCommandOptions opt4 = opt;
  opt4.curve_grid.clear();
  opt4.out_dir = (dir / "out4").string();
  CHECK(run_fit_command(opt4, log) == 0);
  const std::string curve4 = read_file((dir / "out4" / "curve.csv").string());
  int curve_lines = 0;
  for (char c : curve4) curve_lines += c == '\n';
  CHECK(curve_lines == 102);  // header + 101 grid points

  // Missing --out fails before any computation.
  FitCommandOptions bad = opt;
  bad.out_dir = "";
  CHECK_THROWS_AS(run_fit_command(bad, log), ConfigError);
}

TEST_CASE("simulate command writes ops.csv deterministically", "[io]") {
  const auto dir = temp_dir();
  const std::string cfg_text =
      "label = t\n"
      "n_studies = 2\n"
      "pairs_per_study = 50\n"
      "a = -1, 1\n"
      "b = 0.8, 1.2\n"
      "sigma2_w = 1.0, 0.5\n"
      "beta_x1 = -0.4054651081081644\n"
      "beta_x2 = 0.08\n"
      "calibration_proportion = 0.2\n"
      "n_replicates = 4\n"
      "seed = 3\n";
  const auto cfg_path = dir / "sim.cfg";
  write_file(cfg_path.string(), cfg_text);

  SimulateCommandOptions opt;
  opt.config_path = cfg_path.string();
  opt.out_dir = (dir / "o1").string();
  opt.keep_raw = true;
  std::ostringstream log;
  REQUIRE(run_simulate_command(opt, log) == 0);
  REQUIRE(std::filesystem::exists(dir / "o1" / "ops.csv"));
  REQUIRE(std::filesystem::exists(dir / "o1" / "raw.csv"));
  REQUIRE(std::filesystem::exists(dir / "o1" / "manifest.cfg"));

  // raw.csv has one row per replicate and strategy.
  const std::string raw = read_file((dir / "o1" / "raw.csv").string());
  int lines = 0;
  for (char c : raw) lines += c == '\n';
  CHECK(lines == 1 + 4 * 3);

  // Rerunning from the manifest reproduces ops.csv byte for byte.
  SimulateCommandOptions opt2;
  opt2.config_path = (dir / "o1" / "manifest.cfg").string();
  opt2.out_dir = (dir / "o2").string();
  REQUIRE(run_simulate_command(opt2, log) == 0);
  CHECK(read_file((dir / "o1" / "ops.csv").string()) ==
        read_file((dir / "o2" / "ops.csv").string()));
}

TEST_CASE("ops.csv marks absolute bias when the true coefficient is zero",
          "[io]") {
  const auto dir = temp_dir();
  const auto cfg_path = dir / "zero.cfg";
  write_file(cfg_path.string(),
             "n_studies = 2\n"
             "pairs_per_study = 50\n"
             "a = -1, 1\n"
             "b = 0.8, 1.2\n"
             "sigma2_w = 1.0, 0.5\n"
             "beta_x1 = -0.3\n"
             "beta_x2 = 0\n"
             "calibration_proportion = 0.2\n"
             "n_replicates = 2\n"
             "seed = 12\n");
  SimulateCommandOptions opt;
  opt.config_path = cfg_path.string();
  opt.out_dir = (dir / "out").string();
  std::ostringstream log;
  REQUIRE(run_simulate_command(opt, log) == 0);
  const std::string ops = read_file((dir / "out" / "ops.csv").string());
  CHECK(ops.find(",relative,absolute,") != std::string::npos);
}

TEST_CASE("threads resolve from option then environment", "[io]") {
  unsetenv("POOLED_SPLINE_THREADS");
  CHECK(resolve_threads(std::nullopt) == 1);
  CHECK(resolve_threads(4) == 4);
  setenv("POOLED_SPLINE_THREADS", "3", 1);
  CHECK(resolve_threads(std::nullopt) == 3);
  CHECK(resolve_threads(2) == 2);
  setenv("POOLED_SPLINE_THREADS", "zzz", 1);
  CHECK_THROWS_AS(resolve_threads(std::nullopt), ConfigError);
  unsetenv("POOLED_SPLINE_THREADS");
}
