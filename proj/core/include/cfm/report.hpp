#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

namespace cfm::report {

constexpr double kAbsent = std::numeric_limits<double>::quiet_NaN();

/// One result row of an experiment grid. Metric columns that do not apply to
/// the task stay NaN and are written as empty CSV cells.
struct Row {
  std::string dataset;
  std::string task;       // "metric" or "classifier"
  std::string method;     // scenario name or trainer name
  std::string knowledge;  // "known"/"unknown" for metric rows, "" otherwise
  double delta = 0.0;
  std::uint64_t seed = 0;

  double acc = kAbsent;
  double fn = kAbsent;
  double fp = kAbsent;
  double mcc = kAbsent;
  double mae = kAbsent;
  double rmse = kAbsent;
  double unfair_area = kAbsent;
  double cf_unfair_area = kAbsent;
  double nonrobust_area = kAbsent;
};

struct RunReport {
  std::vector<Row> rows;
};

/// Names of the numeric metric columns, in CSV order.
const std::vector<std::string>& metric_columns();

std::string report_csv_header();
void write_report_csv(const std::string& path, const RunReport& report);
void write_report_json(const std::string& path, const RunReport& report);
RunReport read_report_json(const std::string& path);

/// Mean and standard deviation over seeds per (dataset, task, method,
/// knowledge, delta) cell.
struct AggregateRow {
  std::string dataset;
  std::string task;
  std::string method;
  std::string knowledge;
  double delta = 0.0;
  int seeds = 0;
  std::vector<double> mean;  // one entry per metric column
  std::vector<double> stddev;
};

std::vector<AggregateRow> aggregate(const RunReport& report);

std::string aggregate_csv_header();
void write_aggregate_csv(const std::string& path, const std::vector<AggregateRow>& rows);

/// Tidy long-format CSVs (panel, group, value, ci), one file per metric panel,
/// named plot_<metric>.csv under `dir`. Throws EmptyReportError when there is
/// nothing to emit. Returns the file paths written.
std::vector<std::string> emit_plot_data(const std::string& dir,
                                        const std::vector<AggregateRow>& rows);

}  // namespace cfm::report
