#include <iostream>
#include <map>

#include <CLI11.hpp>

#include "feddva/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"feddva: federated dual-encoder VAE simulator"};
  app.set_version_flag("--version", feddva::version_string());
  app.require_subcommand(1);

  auto* train = app.add_subcommand("train", "run a federated experiment");
  std::string config_path;
  bool resume = false;
  train->add_option("--config", config_path, "key = value config file");
  train->add_flag("--resume", resume, "continue from the last checkpoint in the output directory");
  // One flag per config key; applied on top of the file.
  std::map<std::string, std::string> overrides;
  for (const auto& key : feddva::config_keys()) {
    train->add_option_function<std::string>(
        "--" + key, [&overrides, key](const std::string& v) { overrides[key] = v; },
        "default: " + feddva::get_config_value(feddva::ExperimentConfig{}, key));
  }

  auto* eval = app.add_subcommand("eval", "evaluate the last checkpoint of a run");
  std::string run_dir;
  eval->add_option("--run-dir", run_dir, "directory written by train")->required();

  app.add_subcommand("selftest", "fast invariant checks");

  CLI11_PARSE(app, argc, argv);

  if (train->parsed()) {
    feddva::ExperimentConfig cfg;
    try {
      if (!config_path.empty()) cfg = feddva::load_config(config_path);
      for (const auto& [k, v] : overrides) feddva::set_config_value(cfg, k, v);
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << "\n";
      return 2;
    }
    return feddva::cmd_train(cfg, std::cout, resume);
  }
  if (eval->parsed()) return feddva::cmd_eval(run_dir, std::cout);
  return feddva::cmd_selftest(std::cout);
}
