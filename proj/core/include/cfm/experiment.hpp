#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cfm/report.hpp"

namespace cfm::exp {

/// Declarative experiment description. Unset numeric fields resolve from the
/// scale preset ("desk" or "paper") when the config is parsed.
struct ExperimentConfig {
  std::string task;  // gen-data | train-metric | eval-metric | train-clf | eval-clf | report
  std::string scm_json = R"({"builtin": "lin"})";
  std::string dataset_name = "lin";
  std::string metric_json = R"({"base": "euclidean"})";
  std::string preset = "desk";
  std::string out_dir = "out";
  std::string checkpoint;  // eval-metric / eval-clf input

  std::vector<std::uint64_t> seeds = {0};
  std::vector<double> deltas = {0.1};
  std::vector<std::string> scenarios = {"distance"};
  std::vector<std::string> knowledge = {"known"};
  std::vector<std::string> methods = {"erm"};

  int gen_count = 2000;

  // metric learning
  int metric_examples = 0;
  int metric_batch = 0;
  int metric_epochs = 0;
  int metric_test_pairs = 0;
  int metric_depth = 5;
  int metric_hidden_width = 100;
  double metric_lr = 3e-3;
  double decorrelation = 0.1;

  // classifier
  int clf_points = 0;
  double clf_test_fraction = 1.0 / 3.0;
  int clf_epochs = 0;
  int clf_batch = 100;
  double clf_lr = 1e-3;
  std::vector<int> clf_hidden = {16, 16};
  double mu1 = 1.0;
  double mu2 = 1.0;
  double mu3 = 1.0;
  int pgd_steps = 10;
  int probe_count = 0;
};

ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config(const std::string& path);

/// Executes the configured task, writing datasets, checkpoints, per-cell JSON
/// reports and row files under out_dir. Independent grid cells run on a work
/// pool capped by the CFM_THREADS environment variable; outputs are assembled
/// in grid order so identical configs produce byte-identical reports
/// (timestamps live in the meta.json sidecar only). Throws ConfigError for
/// configuration problems and other cfm errors for runtime failures.
report::RunReport run(const ExperimentConfig& cfg);

}  // namespace cfm::exp
