#include "cfm/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "cfm/error.hpp"
#include "cfm/fair_classifier.hpp"
#include "cfm/metric.hpp"
#include "cfm/metric_learning.hpp"
#include "cfm/rng.hpp"
#include "cfm/scm.hpp"

namespace cfm::exp {

namespace fs = std::filesystem;

namespace {

std::string trim_number(double v) {
  std::ostringstream ss;
  ss.precision(10);
  ss << v;
  return ss.str();
}

unsigned pool_size(std::size_t cells) {
  unsigned threads = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("CFM_THREADS")) {
    const long parsed = std::strtol(env, nullptr, 10);
    if (parsed >= 1) threads = static_cast<unsigned>(parsed);
  }
  return static_cast<unsigned>(std::min<std::size_t>(threads, std::max<std::size_t>(cells, 1)));
}

template <typename F>
void parallel_cells(std::size_t count, F&& body) {
  const unsigned workers = pool_size(count);
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  std::vector<std::thread> threads;
  threads.reserve(workers);
  for (unsigned w = 0; w < workers; ++w) {
    threads.emplace_back([&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= count) return;
        try {
          body(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!first_error) first_error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : threads) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

void write_meta(const ExperimentConfig& cfg) {
  nlohmann::json meta;
  const auto now = std::chrono::system_clock::now();
  const std::time_t tt = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%FT%TZ", std::gmtime(&tt));
  meta["generated_at"] = buf;
  meta["task"] = cfg.task;
  meta["preset"] = cfg.preset;
  meta["dataset"] = cfg.dataset_name;
  std::ofstream out(cfg.out_dir + "/meta.json");
  if (out) out << meta.dump(2) << "\n";
}

ml::MetricTrainConfig metric_config(const ExperimentConfig& cfg, const std::string& scenario,
                                    const std::string& knowledge, double delta,
                                    std::uint64_t seed) {
  ml::MetricTrainConfig mc;
  mc.scenario = ml::scenario_from_string(scenario);
  mc.delta = delta;
  mc.epochs = cfg.metric_epochs;
  mc.batch_size = cfg.metric_batch;
  mc.decorrelation_coeff = cfg.decorrelation;
  mc.depth = cfg.metric_depth;
  mc.hidden_width = cfg.metric_hidden_width;
  mc.lr = cfg.metric_lr;
  mc.seed = seed;
  if (knowledge == "known") {
    mc.knowledge = ml::EmbeddingKnowledge::Known;
  } else if (knowledge == "unknown") {
    mc.knowledge = ml::EmbeddingKnowledge::Unknown;
  } else {
    throw ConfigError("knowledge must be \"known\" or \"unknown\": " + knowledge);
  }
  return mc;
}

std::string cell_stem(const ExperimentConfig& cfg, const std::string& kind,
                      const std::string& method, const std::string& knowledge, double delta,
                      std::uint64_t seed) {
  std::ostringstream ss;
  ss << kind << '_' << cfg.dataset_name << '_' << method;
  if (!knowledge.empty()) ss << '_' << knowledge;
  ss << "_d" << trim_number(delta) << "_s" << seed;
  return ss.str();
}

void write_metric_report_json(const std::string& path, const report::Row& row) {
  nlohmann::json j;
  j["dataset"] = row.dataset;
  j["scenario"] = row.method;
  j["knowledge"] = row.knowledge;
  j["delta"] = row.delta;
  j["seed"] = row.seed;
  j["acc"] = row.acc;
  j["fn"] = row.fn;
  j["fp"] = row.fp;
  j["mcc"] = row.mcc;
  j["mae"] = row.mae;
  j["rmse"] = row.rmse;
  std::ofstream out(path);
  if (!out) throw MissingFileError("cannot write metric report: " + path);
  out << j.dump(2) << "\n";
}

void write_fairness_report_json(const std::string& path, const report::Row& row) {
  nlohmann::json j;
  j["method"] = row.method;
  j["dataset"] = row.dataset;
  j["delta"] = row.delta;
  j["acc"] = row.acc;
  j["mcc"] = row.mcc;
  j["unfair_area"] = row.unfair_area;
  j["cf_unfair_area"] = row.cf_unfair_area;
  j["nonrobust_area"] = row.nonrobust_area;
  j["seed"] = row.seed;
  std::ofstream out(path);
  if (!out) throw MissingFileError("cannot write fairness report: " + path);
  out << j.dump(2) << "\n";
}

report::Row metric_row(const ExperimentConfig& cfg, const std::string& scenario,
                       const std::string& knowledge, double delta, std::uint64_t seed,
                       const ml::MetricReport& rep) {
  report::Row row;
  row.dataset = cfg.dataset_name;
  row.task = "metric";
  row.method = scenario;
  row.knowledge = knowledge;
  row.delta = delta;
  row.seed = seed;
  row.acc = rep.acc;
  row.fn = rep.fn;
  row.fp = rep.fp;
  row.mcc = rep.mcc;
  row.mae = rep.mae;
  row.rmse = rep.rmse;
  return row;
}

report::Row classifier_row(const ExperimentConfig& cfg, const std::string& method,
                           double delta, std::uint64_t seed,
                           const clf::FairnessReport& rep) {
  report::Row row;
  row.dataset = cfg.dataset_name;
  row.task = "classifier";
  row.method = method;
  row.delta = delta;
  row.seed = seed;
  row.acc = rep.acc;
  row.mcc = rep.mcc;
  row.unfair_area = rep.unfair_area;
  row.cf_unfair_area = rep.cf_unfair_area;
  row.nonrobust_area = rep.nonrobust_area;
  return row;
}

std::uint64_t test_seed(std::uint64_t seed) { return seed ^ 0x7e57ULL; }

report::RunReport run_gen_data(const ExperimentConfig& cfg) {
  const Scm scm = load_scm_config(cfg.scm_json);
  for (std::uint64_t seed : cfg.seeds) {
    TabularData data;
    data.names = scm.feature_names();
    for (const auto& [v, u] : scm.sample(cfg.gen_count, seed)) data.rows.push_back(v);
    write_csv(cfg.out_dir + "/data_" + cfg.dataset_name + "_s" + std::to_string(seed) +
                  ".csv",
              data);
  }
  return {};
}

report::RunReport run_train_metric(const ExperimentConfig& cfg) {
  const Scm scm = load_scm_config(cfg.scm_json);
  const OracleMetric oracle(scm, load_metric_config(cfg.metric_json));

  struct Cell {
    std::string scenario, knowledge;
    double delta;
    std::uint64_t seed;
  };
  std::vector<Cell> cells;
  for (const auto& scenario : cfg.scenarios) {
    for (const auto& knowledge : cfg.knowledge) {
      for (double delta : cfg.deltas) {
        for (std::uint64_t seed : cfg.seeds) cells.push_back({scenario, knowledge, delta, seed});
      }
    }
  }

  std::vector<report::Row> rows(cells.size());
  parallel_cells(cells.size(), [&](std::size_t i) {
    const Cell& c = cells[i];
    const ml::MetricTrainConfig mc = metric_config(cfg, c.scenario, c.knowledge, c.delta, c.seed);
    const ml::MetricDataset data = ml::build_dataset(oracle, mc, cfg.metric_examples);
    ml::TrainedMetric trained = ml::train_metric(oracle, mc, data);

    const auto test = ml::build_pairs(oracle, c.delta, cfg.metric_test_pairs,
                                      test_seed(c.seed), false);
    const ml::LearnedMetric& lm = trained.metric;
    const ml::MetricReport rep = ml::eval_metric(
        [&lm](const Instance& a, const Instance& b) { return lm.distance(a, b); }, oracle,
        c.delta, test);

    const std::string stem =
        cell_stem(cfg, "metric", c.scenario, c.knowledge, c.delta, c.seed);
    nn::save_net(trained.metric.net, cfg.out_dir + "/" + stem + ".net.json");
    rows[i] = metric_row(cfg, c.scenario, c.knowledge, c.delta, c.seed, rep);
    write_metric_report_json(cfg.out_dir + "/" + stem + ".report.json", rows[i]);
  });

  report::RunReport report{std::move(rows)};
  report::write_report_json(cfg.out_dir + "/metric_rows.json", report);
  report::write_report_csv(cfg.out_dir + "/metric_report.csv", report);
  return report;
}

report::RunReport run_eval_metric(const ExperimentConfig& cfg) {
  if (cfg.checkpoint.empty()) throw ConfigError("eval-metric needs \"checkpoint\"");
  const Scm scm = load_scm_config(cfg.scm_json);
  const OracleMetric oracle(scm, load_metric_config(cfg.metric_json));
  ml::LearnedMetric lm{nn::load_net(cfg.checkpoint), BaseMetric::euclidean()};
  if (!cfg.knowledge.empty() && cfg.knowledge.front() == "known") {
    lm.embed_metric = oracle.base();
  }

  std::vector<report::Row> rows;
  for (double delta : cfg.deltas) {
    for (std::uint64_t seed : cfg.seeds) {
      const auto test =
          ml::build_pairs(oracle, delta, cfg.metric_test_pairs, test_seed(seed), false);
      const ml::MetricReport rep = ml::eval_metric(
          [&lm](const Instance& a, const Instance& b) { return lm.distance(a, b); },
          oracle, delta, test);
      rows.push_back(metric_row(cfg, "eval", cfg.knowledge.front(), delta, seed, rep));
      write_metric_report_json(
          cfg.out_dir + "/" + cell_stem(cfg, "evalmetric", "eval", "", delta, seed) +
              ".report.json",
          rows.back());
    }
  }
  report::RunReport report{std::move(rows)};
  report::write_report_json(cfg.out_dir + "/evalmetric_rows.json", report);
  report::write_report_csv(cfg.out_dir + "/evalmetric_report.csv", report);
  return report;
}

clf::TrainerConfig trainer_config(const ExperimentConfig& cfg, const std::string& method,
                                  double delta, std::uint64_t seed) {
  clf::TrainerConfig tc;
  tc.method = clf::method_from_string(method);
  tc.delta = delta;
  tc.mu1 = cfg.mu1;
  tc.mu2 = cfg.mu2;
  tc.mu3 = cfg.mu3;
  tc.pgd_steps = cfg.pgd_steps;
  tc.epochs = cfg.clf_epochs;
  tc.batch = cfg.clf_batch;
  tc.lr = cfg.clf_lr;
  tc.hidden = cfg.clf_hidden;
  tc.seed = seed;
  return tc;
}

report::RunReport run_train_clf(const ExperimentConfig& cfg) {
  const Scm scm = load_scm_config(cfg.scm_json);
  const OracleMetric oracle(scm, load_metric_config(cfg.metric_json));

  const bool needs_metric = std::any_of(cfg.methods.begin(), cfg.methods.end(),
                                        [](const std::string& m) { return m == "ecapify"; });

  // One learned metric per seed, shared by every ecapify cell of that seed.
  std::vector<ml::LearnedMetric> metrics_by_seed;
  if (needs_metric) {
    metrics_by_seed.resize(cfg.seeds.size());
    parallel_cells(cfg.seeds.size(), [&](std::size_t i) {
      const ml::MetricTrainConfig mc =
          metric_config(cfg, "distance", "known", cfg.deltas.front(), cfg.seeds[i]);
      const ml::MetricDataset data = ml::build_dataset(oracle, mc, cfg.metric_examples);
      metrics_by_seed[i] = ml::train_metric(oracle, mc, data).metric;
    });
  }

  struct Cell {
    std::string method;
    double delta;
    std::size_t seed_idx;
  };
  std::vector<Cell> cells;
  for (const auto& method : cfg.methods) {
    for (double delta : cfg.deltas) {
      for (std::size_t s = 0; s < cfg.seeds.size(); ++s) cells.push_back({method, delta, s});
    }
  }

  std::vector<report::Row> rows(cells.size());
  parallel_cells(cells.size(), [&](std::size_t i) {
    const Cell& c = cells[i];
    const std::uint64_t seed = cfg.seeds[c.seed_idx];
    const clf::LabeledDataset data =
        clf::make_synthetic_dataset(scm, cfg.clf_points, cfg.clf_test_fraction, seed);
    const clf::TrainerConfig tc = trainer_config(cfg, c.method, c.delta, seed);

    clf::Classifier h;
    switch (tc.method) {
      case clf::TrainMethod::Erm:
        h = clf::train_erm(data, tc);
        break;
      case clf::TrainMethod::Al:
        h = clf::train_al(data, tc);
        break;
      case clf::TrainMethod::Capify:
        h = clf::train_capify(data, tc, oracle);
        break;
      case clf::TrainMethod::Ecapify: {
        std::vector<Instance> pool;
        pool.reserve(data.train_idx.size());
        for (std::size_t idx : data.train_idx) pool.push_back(data.instances[idx]);
        h = clf::train_ecapify(data, tc, metrics_by_seed[c.seed_idx], scm.sensitive_idx(),
                               scm.sensitive_levels(), pool);
        break;
      }
    }

    const clf::FairnessReport rep =
        clf::eval_fairness(h, oracle, data, c.delta, cfg.probe_count, test_seed(seed));
    const std::string stem = cell_stem(cfg, "clf", c.method, "", c.delta, seed);
    nn::save_net(h.net, cfg.out_dir + "/" + stem + ".net.json");
    rows[i] = classifier_row(cfg, c.method, c.delta, seed, rep);
    write_fairness_report_json(cfg.out_dir + "/" + stem + ".report.json", rows[i]);
  });

  report::RunReport report{std::move(rows)};
  report::write_report_json(cfg.out_dir + "/clf_rows.json", report);
  report::write_report_csv(cfg.out_dir + "/clf_report.csv", report);
  return report;
}

report::RunReport run_eval_clf(const ExperimentConfig& cfg) {
  if (cfg.checkpoint.empty()) throw ConfigError("eval-clf needs \"checkpoint\"");
  const Scm scm = load_scm_config(cfg.scm_json);
  const OracleMetric oracle(scm, load_metric_config(cfg.metric_json));
  const clf::Classifier h{nn::load_net(cfg.checkpoint)};

  std::vector<report::Row> rows;
  for (double delta : cfg.deltas) {
    for (std::uint64_t seed : cfg.seeds) {
      const clf::LabeledDataset data =
          clf::make_synthetic_dataset(scm, cfg.clf_points, cfg.clf_test_fraction, seed);
      const clf::FairnessReport rep =
          clf::eval_fairness(h, oracle, data, delta, cfg.probe_count, test_seed(seed));
      rows.push_back(classifier_row(cfg, "eval", delta, seed, rep));
      write_fairness_report_json(
          cfg.out_dir + "/" + cell_stem(cfg, "evalclf", "eval", "", delta, seed) +
              ".report.json",
          rows.back());
    }
  }
  report::RunReport report{std::move(rows)};
  report::write_report_json(cfg.out_dir + "/evalclf_rows.json", report);
  report::write_report_csv(cfg.out_dir + "/evalclf_report.csv", report);
  return report;
}

report::RunReport run_report(const ExperimentConfig& cfg) {
  std::vector<std::string> inputs;
  if (fs::exists(cfg.out_dir)) {
    for (const auto& entry : fs::directory_iterator(cfg.out_dir)) {
      const std::string name = entry.path().filename().string();
      if (name.size() > 10 && name.substr(name.size() - 10) == "_rows.json") {
        inputs.push_back(entry.path().string());
      }
    }
  }
  std::sort(inputs.begin(), inputs.end());
  if (inputs.empty()) throw EmptyReportError("report: no *_rows.json under " + cfg.out_dir);

  report::RunReport merged;
  for (const auto& path : inputs) {
    const report::RunReport part = report::read_report_json(path);
    merged.rows.insert(merged.rows.end(), part.rows.begin(), part.rows.end());
  }
  report::write_report_csv(cfg.out_dir + "/report.csv", merged);
  const auto agg = report::aggregate(merged);
  report::write_aggregate_csv(cfg.out_dir + "/report_aggregate.csv", agg);
  report::emit_plot_data(cfg.out_dir, agg);
  return merged;
}

}  // namespace

ExperimentConfig parse_config(const std::string& json_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("experiment config: ") + e.what());
  }

  ExperimentConfig cfg;
  cfg.task = j.value("task", "");
  if (j.contains("scm")) {
    cfg.scm_json = j["scm"].dump();
    if (j["scm"].contains("builtin")) cfg.dataset_name = j["scm"]["builtin"].get<std::string>();
    else cfg.dataset_name = "custom";
  }
  cfg.dataset_name = j.value("name", cfg.dataset_name);
  if (j.contains("metric")) cfg.metric_json = j["metric"].dump();
  cfg.preset = j.value("preset", cfg.preset);
  if (cfg.preset != "desk" && cfg.preset != "paper") {
    throw ConfigError("preset must be \"desk\" or \"paper\"");
  }
  cfg.out_dir = j.value("out_dir", cfg.out_dir);
  cfg.checkpoint = j.value("checkpoint", cfg.checkpoint);

  auto read_list = [&j](const char* key, auto& target) {
    if (!j.contains(key)) return;
    using V = typename std::decay_t<decltype(target)>::value_type;
    if (j[key].is_array()) {
      target = j[key].template get<std::vector<V>>();
    } else {
      target = {j[key].template get<V>()};
    }
    if (target.empty()) throw ConfigError(std::string(key) + " must be nonempty");
  };
  read_list("seeds", cfg.seeds);
  read_list("delta", cfg.deltas);
  read_list("scenario", cfg.scenarios);
  read_list("knowledge", cfg.knowledge);
  read_list("method", cfg.methods);

  const bool paper = cfg.preset == "paper";
  cfg.gen_count = j.value("count", 2000);
  cfg.metric_examples = j.value("examples", paper ? 10000 : 2000);
  cfg.metric_batch = j.value("batch", paper ? 1000 : 200);
  cfg.metric_epochs = j.value("epochs", paper ? 100 : 30);
  cfg.metric_test_pairs = j.value("test_pairs", paper ? 2000 : 1000);
  cfg.metric_depth = j.value("depth", 5);
  cfg.metric_hidden_width = j.value("hidden_width", 100);
  cfg.metric_lr = j.value("lr", 3e-3);
  cfg.decorrelation = j.value("decorrelation", 0.1);

  cfg.clf_points = j.value("clf_points", paper ? 5000 : 1200);
  cfg.clf_test_fraction = j.value("test_fraction", 1.0 / 3.0);
  cfg.clf_epochs = j.value("clf_epochs", paper ? 50 : 20);
  cfg.clf_batch = j.value("clf_batch", 100);
  cfg.clf_lr = j.value("clf_lr", 1e-3);
  if (j.contains("clf_hidden")) cfg.clf_hidden = j["clf_hidden"].get<std::vector<int>>();
  if (j.contains("mu")) {
    const auto mu = j["mu"].get<std::vector<double>>();
    if (mu.size() != 3) throw ConfigError("mu must have three entries");
    cfg.mu1 = mu[0];
    cfg.mu2 = mu[1];
    cfg.mu3 = mu[2];
  }
  cfg.pgd_steps = j.value("pgd_steps", 10);
  cfg.probe_count = j.value("probes", paper ? 1000 : 100);

  if (cfg.seeds.empty()) throw ConfigError("seeds must be nonempty");
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw MissingFileError("cannot open config: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

report::RunReport run(const ExperimentConfig& cfg) {
  fs::create_directories(cfg.out_dir);
  write_meta(cfg);

  if (cfg.task == "gen-data") return run_gen_data(cfg);
  if (cfg.task == "train-metric") return run_train_metric(cfg);
  if (cfg.task == "eval-metric") return run_eval_metric(cfg);
  if (cfg.task == "train-clf") return run_train_clf(cfg);
  if (cfg.task == "eval-clf") return run_eval_clf(cfg);
  if (cfg.task == "report") return run_report(cfg);
  throw ConfigError("unknown task: " + cfg.task);
}

}  // namespace cfm::exp
