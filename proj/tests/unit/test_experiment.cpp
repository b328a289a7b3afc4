#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cfm/error.hpp"
#include "cfm/experiment.hpp"
#include "cfm/report.hpp"
#include "cfm/scm.hpp"

using namespace cfm;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("config parsing: defaults, presets, overrides, errors") {
  exp::ExperimentConfig desk = exp::parse_config(R"({"task": "train-metric"})");
  CHECK(desk.metric_examples == 2000);
  CHECK(desk.metric_batch == 200);
  CHECK(desk.metric_epochs == 30);
  CHECK(desk.dataset_name == "lin");

  exp::ExperimentConfig paper =
      exp::parse_config(R"({"task": "train-metric", "preset": "paper"})");
  CHECK(paper.metric_examples == 10000);
  CHECK(paper.metric_batch == 1000);
  CHECK(paper.metric_epochs == 100);

  exp::ExperimentConfig mixed = exp::parse_config(
      R"({"scm": {"builtin": "nlm"}, "delta": 0.2, "seeds": [1, 2], "epochs": 7})");
  CHECK(mixed.dataset_name == "nlm");
  CHECK(mixed.deltas == std::vector<double>{0.2});
  CHECK(mixed.seeds == std::vector<std::uint64_t>{1, 2});
  CHECK(mixed.metric_epochs == 7);

  CHECK_THROWS_AS(exp::parse_config("not json"), ConfigError);
  CHECK_THROWS_AS(exp::parse_config(R"({"preset": "huge"})"), ConfigError);
  CHECK_THROWS_AS(exp::parse_config(R"({"seeds": []})"), ConfigError);
  CHECK_THROWS_AS(exp::parse_config(R"({"mu": [1, 2]})"), ConfigError);
}

TEST_CASE("gen-data writes the expected csv shape") {
  TempDir dir("cfm_test_gendata");
  exp::ExperimentConfig cfg = exp::parse_config(
      R"({"task": "gen-data", "count": 50, "seeds": [0]})");
  cfg.out_dir = dir.path.string();
  exp::run(cfg);

  TabularData data = read_csv((dir.path / "data_lin_s0.csv").string());
  CHECK(data.names == std::vector<std::string>{"s", "x1", "x2"});
  CHECK(data.rows.size() == 50);
  CHECK(fs::exists(dir.path / "meta.json"));
}

TEST_CASE("unknown task is a config error") {
  exp::ExperimentConfig cfg;
  cfg.task = "fly-to-the-moon";
  cfg.out_dir = (fs::temp_directory_path() / "cfm_test_task").string();
  CHECK_THROWS_AS(exp::run(cfg), ConfigError);
  fs::remove_all(cfg.out_dir);
}

TEST_CASE("report csv headers are pinned") {
  CHECK(report::report_csv_header() ==
        "dataset,task,method,knowledge,delta,seed,acc,fn,fp,mcc,mae,rmse,"
        "unfair_area,cf_unfair_area,nonrobust_area");
  CHECK(report::aggregate_csv_header() ==
        "dataset,task,method,knowledge,delta,seeds,acc_mean,acc_std,fn_mean,fn_std,"
        "fp_mean,fp_std,mcc_mean,mcc_std,mae_mean,mae_std,rmse_mean,rmse_std,"
        "unfair_area_mean,unfair_area_std,cf_unfair_area_mean,cf_unfair_area_std,"
        "nonrobust_area_mean,nonrobust_area_std");
}

TEST_CASE("aggregation computes mean and std per cell") {
  report::RunReport rep;
  for (int seed = 0; seed < 3; ++seed) {
    report::Row row;
    row.dataset = "lin";
    row.task = "metric";
    row.method = "distance";
    row.knowledge = "known";
    row.delta = 0.1;
    row.seed = seed;
    row.acc = 0.9 + 0.01 * seed;
    rep.rows.push_back(row);
  }
  const auto agg = report::aggregate(rep);
  REQUIRE(agg.size() == 1);
  CHECK(agg[0].seeds == 3);
  CHECK(agg[0].mean[0] == doctest::Approx(0.91));
  CHECK(agg[0].stddev[0] == doctest::Approx(std::sqrt(2.0 / 3.0) * 0.01).epsilon(1e-9));
  CHECK(std::isnan(agg[0].mean[4]));  // mae column untouched
}

TEST_CASE("plot data emission") {
  TempDir dir("cfm_test_plot");
  report::RunReport rep;
  report::Row row;
  row.dataset = "lin";
  row.task = "classifier";
  row.method = "erm";
  row.delta = 0.01;
  row.seed = 0;
  row.acc = 0.8;
  row.unfair_area = 0.25;
  rep.rows.push_back(row);
  row.seed = 1;
  row.acc = 0.9;
  row.unfair_area = 0.35;
  rep.rows.push_back(row);

  const auto agg = report::aggregate(rep);
  const auto files = report::emit_plot_data(dir.path.string(), agg);
  REQUIRE(files.size() == 2);  // only the populated panels: acc and unfair_area

  const std::string unfair = slurp(dir.path / "plot_unfair_area.csv");
  CHECK(unfair.find("panel,group,value,ci") == 0);
  CHECK(unfair.find("unfair_area,lin/erm@0.01,0.3,0.05") != std::string::npos);

  CHECK_THROWS_AS(report::emit_plot_data(dir.path.string(), {}), EmptyReportError);
}

TEST_CASE("report json round trip") {
  TempDir dir("cfm_test_json");
  report::RunReport rep;
  report::Row row;
  row.dataset = "nlm";
  row.task = "metric";
  row.method = "label";
  row.knowledge = "unknown";
  row.delta = 0.2;
  row.seed = 5;
  row.acc = 0.83;
  row.mae = 0.19;
  rep.rows.push_back(row);

  const std::string path = (dir.path / "rows.json").string();
  report::write_report_json(path, rep);
  report::RunReport loaded = report::read_report_json(path);
  REQUIRE(loaded.rows.size() == 1);
  CHECK(loaded.rows[0].dataset == "nlm");
  CHECK(loaded.rows[0].knowledge == "unknown");
  CHECK(loaded.rows[0].acc == doctest::Approx(0.83));
  CHECK(loaded.rows[0].mae == doctest::Approx(0.19));
  CHECK(std::isnan(loaded.rows[0].unfair_area));
}

TEST_CASE("tiny train-metric runs are byte-identical across reruns") {
  const std::string config = R"({
    "task": "train-metric",
    "scm": {"builtin": "lin"},
    "scenario": "distance",
    "delta": 0.1,
    "seeds": [0],
    "examples": 64,
    "batch": 32,
    "epochs": 2,
    "test_pairs": 40,
    "depth": 1,
    "hidden_width": 8
  })";

  TempDir dir_a("cfm_test_repro_a");
  TempDir dir_b("cfm_test_repro_b");
  exp::ExperimentConfig a = exp::parse_config(config);
  a.out_dir = dir_a.path.string();
  exp::ExperimentConfig b = exp::parse_config(config);
  b.out_dir = dir_b.path.string();

  const report::RunReport ra = exp::run(a);
  const report::RunReport rb = exp::run(b);
  REQUIRE(ra.rows.size() == 1);
  CHECK(slurp(dir_a.path / "metric_rows.json") == slurp(dir_b.path / "metric_rows.json"));
  CHECK(slurp(dir_a.path / "metric_report.csv") == slurp(dir_b.path / "metric_report.csv"));

  // The report task merges row files and emits aggregates and plot data.
  exp::ExperimentConfig rep_cfg;
  rep_cfg.task = "report";
  rep_cfg.out_dir = dir_a.path.string();
  exp::run(rep_cfg);
  CHECK(fs::exists(dir_a.path / "report.csv"));
  CHECK(fs::exists(dir_a.path / "report_aggregate.csv"));
  CHECK(fs::exists(dir_a.path / "plot_acc.csv"));

  const std::string report_csv = slurp(dir_a.path / "report.csv");
  CHECK(report_csv.find(report::report_csv_header()) == 0);
}

TEST_CASE("report task with nothing to merge raises EmptyReport") {
  TempDir dir("cfm_test_empty_report");
  exp::ExperimentConfig cfg;
  cfg.task = "report";
  cfg.out_dir = dir.path.string();
  CHECK_THROWS_AS(exp::run(cfg), EmptyReportError);
}
