#include "cfm/report.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cfm/error.hpp"

namespace cfm::report {

namespace {

std::string format_value(double v) {
  if (std::isnan(v)) return "";
  std::ostringstream ss;
  ss.precision(12);
  ss << v;
  return ss.str();
}

std::vector<double> row_metrics(const Row& r) {
  return {r.acc, r.fn, r.fp, r.mcc, r.mae, r.rmse, r.unfair_area, r.cf_unfair_area,
          r.nonrobust_area};
}

void set_row_metric(Row& r, std::size_t i, double v) {
  double* fields[] = {&r.acc, &r.fn, &r.fp, &r.mcc, &r.mae, &r.rmse, &r.unfair_area,
                      &r.cf_unfair_area, &r.nonrobust_area};
  *fields[i] = v;
}

}  // namespace

const std::vector<std::string>& metric_columns() {
  static const std::vector<std::string> cols = {
      "acc", "fn", "fp", "mcc", "mae", "rmse", "unfair_area", "cf_unfair_area",
      "nonrobust_area"};
  return cols;
}

std::string report_csv_header() {
  std::string header = "dataset,task,method,knowledge,delta,seed";
  for (const auto& c : metric_columns()) header += "," + c;
  return header;
}

void write_report_csv(const std::string& path, const RunReport& report) {
  std::ofstream out(path);
  if (!out) throw MissingFileError("cannot write report csv: " + path);
  out << report_csv_header() << "\n";
  for (const auto& r : report.rows) {
    out << r.dataset << ',' << r.task << ',' << r.method << ',' << r.knowledge << ','
        << format_value(r.delta) << ',' << r.seed;
    for (double v : row_metrics(r)) out << ',' << format_value(v);
    out << "\n";
  }
}

void write_report_json(const std::string& path, const RunReport& report) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : report.rows) {
    nlohmann::json j;
    j["dataset"] = r.dataset;
    j["task"] = r.task;
    j["method"] = r.method;
    j["knowledge"] = r.knowledge;
    j["delta"] = r.delta;
    j["seed"] = r.seed;
    const auto metrics = row_metrics(r);
    for (std::size_t i = 0; i < metrics.size(); ++i) {
      if (!std::isnan(metrics[i])) j[metric_columns()[i]] = metrics[i];
    }
    arr.push_back(std::move(j));
  }
  nlohmann::json doc;
  doc["schema"] = "cfm-report-v1";
  doc["rows"] = std::move(arr);
  std::ofstream out(path);
  if (!out) throw MissingFileError("cannot write report json: " + path);
  out << doc.dump(2) << "\n";
}

RunReport read_report_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw MissingFileError("cannot read report json: " + path);
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("report json: ") + e.what());
  }
  if (doc.value("schema", "") != std::string("cfm-report-v1")) {
    throw ConfigError("unsupported report schema in " + path);
  }
  RunReport report;
  for (const auto& j : doc.at("rows")) {
    Row r;
    r.dataset = j.value("dataset", "");
    r.task = j.value("task", "");
    r.method = j.value("method", "");
    r.knowledge = j.value("knowledge", "");
    r.delta = j.value("delta", 0.0);
    r.seed = j.value("seed", 0ULL);
    for (std::size_t i = 0; i < metric_columns().size(); ++i) {
      if (j.contains(metric_columns()[i])) {
        set_row_metric(r, i, j[metric_columns()[i]].get<double>());
      }
    }
    report.rows.push_back(std::move(r));
  }
  return report;
}

std::vector<AggregateRow> aggregate(const RunReport& report) {
  std::map<std::tuple<std::string, std::string, std::string, std::string, double>,
           std::vector<const Row*>>
      groups;
  for (const auto& r : report.rows) {
    groups[{r.dataset, r.task, r.method, r.knowledge, r.delta}].push_back(&r);
  }

  std::vector<AggregateRow> out;
  out.reserve(groups.size());
  const std::size_t k = metric_columns().size();
  for (const auto& [key, rows] : groups) {
    AggregateRow agg;
    agg.dataset = std::get<0>(key);
    agg.task = std::get<1>(key);
    agg.method = std::get<2>(key);
    agg.knowledge = std::get<3>(key);
    agg.delta = std::get<4>(key);
    agg.seeds = static_cast<int>(rows.size());
    agg.mean.assign(k, kAbsent);
    agg.stddev.assign(k, kAbsent);
    for (std::size_t i = 0; i < k; ++i) {
      double sum = 0.0, sq = 0.0;
      int n = 0;
      for (const Row* r : rows) {
        const double v = row_metrics(*r)[i];
        if (std::isnan(v)) continue;
        sum += v;
        sq += v * v;
        ++n;
      }
      if (n == 0) continue;
      const double mean = sum / n;
      agg.mean[i] = mean;
      agg.stddev[i] = n > 1 ? std::sqrt(std::max(0.0, sq / n - mean * mean)) : 0.0;
    }
    out.push_back(std::move(agg));
  }
  return out;
}

std::string aggregate_csv_header() {
  std::string header = "dataset,task,method,knowledge,delta,seeds";
  for (const auto& c : metric_columns()) header += "," + c + "_mean," + c + "_std";
  return header;
}

void write_aggregate_csv(const std::string& path, const std::vector<AggregateRow>& rows) {
  std::ofstream out(path);
  if (!out) throw MissingFileError("cannot write aggregate csv: " + path);
  out << aggregate_csv_header() << "\n";
  for (const auto& r : rows) {
    out << r.dataset << ',' << r.task << ',' << r.method << ',' << r.knowledge << ','
        << format_value(r.delta) << ',' << r.seeds;
    for (std::size_t i = 0; i < metric_columns().size(); ++i) {
      out << ',' << format_value(r.mean[i]) << ',' << format_value(r.stddev[i]);
    }
    out << "\n";
  }
}

std::vector<std::string> emit_plot_data(const std::string& dir,
                                        const std::vector<AggregateRow>& rows) {
  if (rows.empty()) throw EmptyReportError("emit_plot_data: empty report");

  std::vector<std::string> written;
  for (std::size_t i = 0; i < metric_columns().size(); ++i) {
    // Skip panels with no populated cells.
    bool any = false;
    for (const auto& r : rows) any |= !std::isnan(r.mean[i]);
    if (!any) continue;

    const std::string path = dir + "/plot_" + metric_columns()[i] + ".csv";
    std::ofstream out(path);
    if (!out) throw MissingFileError("cannot write plot csv: " + path);
    out << "panel,group,value,ci\n";
    for (const auto& r : rows) {
      if (std::isnan(r.mean[i])) continue;
      std::ostringstream group;
      group << r.dataset << '/' << r.method;
      if (!r.knowledge.empty()) group << '/' << r.knowledge;
      group << "@" << format_value(r.delta);
      out << metric_columns()[i] << ',' << group.str() << ',' << format_value(r.mean[i])
          << ',' << format_value(r.stddev[i]) << "\n";
    }
    written.push_back(path);
  }
  return written;
}

}  // namespace cfm::report
