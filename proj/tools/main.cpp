#include <cstdint>
#include <exception>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cfm/error.hpp"
#include "cfm/experiment.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 2;
constexpr int kRuntimeError = 3;

void print_error_json(const std::string& kind, const std::string& message) {
  nlohmann::json j;
  j["error"] = kind;
  j["message"] = message;
  std::cerr << j.dump() << std::endl;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw cfm::MissingFileError("cannot open config: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"causal fair metrics experiment runner"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  std::string preset;
  std::vector<std::uint64_t> seeds;

  const std::vector<std::string> tasks = {"gen-data",  "train-metric", "eval-metric",
                                          "train-clf", "eval-clf",     "report"};
  for (const auto& task : tasks) {
    CLI::App* sub = app.add_subcommand(task);
    sub->add_option("-c,--config", config_path, "experiment config JSON");
    sub->add_option("-o,--out", out_dir, "output directory override");
    sub->add_option("--preset", preset, "scale preset: desk or paper");
    sub->add_option("--seed", seeds, "seed override (repeatable)");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help / --version
    print_error_json("ConfigParse", e.what());
    return kConfigError;
  }

  try {
    // Fold command-line overrides into the raw JSON, then parse once so
    // preset-dependent defaults resolve consistently.
    nlohmann::json j = nlohmann::json::object();
    if (!config_path.empty()) {
      try {
        j = nlohmann::json::parse(read_file(config_path));
      } catch (const nlohmann::json::exception& e) {
        throw cfm::ConfigError(std::string("experiment config: ") + e.what());
      }
    }
    if (!preset.empty()) j["preset"] = preset;
    if (!out_dir.empty()) j["out_dir"] = out_dir;
    if (!seeds.empty()) j["seeds"] = seeds;

    cfm::exp::ExperimentConfig cfg = cfm::exp::parse_config(j.dump());
    cfg.task = app.get_subcommands().front()->get_name();
    cfm::exp::run(cfg);
    return kOk;
  } catch (const cfm::ConfigError& e) {
    print_error_json("ConfigParse", e.what());
    return kConfigError;
  } catch (const cfm::MissingFileError& e) {
    print_error_json("MissingFile", e.what());
    return kConfigError;
  } catch (const cfm::Error& e) {
    print_error_json("Runtime", e.what());
    return kRuntimeError;
  } catch (const std::exception& e) {
    print_error_json("Runtime", e.what());
    return kRuntimeError;
  }
}
