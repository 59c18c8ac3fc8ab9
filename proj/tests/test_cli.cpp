#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "feddva/cli.hpp"

using namespace feddva;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("feddva_cli_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::vector<std::string> lines(const fs::path& p) {
  std::istringstream is(slurp(p));
  std::vector<std::string> out;
  for (std::string l; std::getline(is, l);) out.push_back(l);
  return out;
}

// History lines with the wall-clock field removed.
std::vector<nlohmann::json> history(const fs::path& dir) {
  std::vector<nlohmann::json> out;
  for (const auto& l : lines(dir / "history.jsonl")) {
    auto j = nlohmann::json::parse(l);
    j.erase("wall_seconds");
    out.push_back(j);
  }
  return out;
}

ExperimentConfig tiny(const fs::path& out) {
  ExperimentConfig c;
  c.K = 2;
  c.m = 2;
  c.rounds = 3;
  c.epochs_per_phase = 1;
  c.batch_size = 16;
  c.lr_eta = c.lr_lambda = 0.01;
  c.hidden = {16};
  c.n_classes = 4;
  c.samples_per_class = 10;
  c.image_size = 8;
  c.checkpoint_every = 2;
  c.output_dir = out.string();
  return c;
}

int run_binary(const std::string& args) {
  const char* bin = std::getenv("FEDDVA_BIN");
  REQUIRE_MESSAGE(bin, "FEDDVA_BIN is not set");
  const int status = std::system((std::string(bin) + " " + args + " > /dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("train writes one history line per round and a manifest") {
  const fs::path dir = fresh_dir("train");
  std::ostringstream log;
  REQUIRE(cmd_train(tiny(dir), log) == 0);
  CHECK(lines(dir / "history.jsonl").size() == 3);
  const auto manifest = nlohmann::json::parse(slurp(dir / "manifest.json"));
  CHECK(manifest["seed"] == 1);
  CHECK(manifest["version"] == version_string());
  CHECK(manifest["config"] == slurp(dir / "config.txt"));
  CHECK(fs::exists(dir / "checkpoints" / "r3" / "theta.ckpt"));
  CHECK(fs::exists(dir / "checkpoints" / "r3" / "client_1.ckpt"));
  CHECK_FALSE(fs::exists(dir / "checkpoints" / "r2"));
  CHECK(fs::exists(dir / "partition.json"));
}

TEST_CASE("the same config and seed reproduce every output but wall time") {
  const fs::path a = fresh_dir("rep_a"), b = fresh_dir("rep_b");
  std::ostringstream log;
  REQUIRE(cmd_train(tiny(a), log) == 0);
  REQUIRE(cmd_train(tiny(b), log) == 0);
  CHECK(slurp(a / "final_metrics.json") == slurp(b / "final_metrics.json"));
  CHECK(slurp(a / "checkpoints/r3/theta.ckpt") == slurp(b / "checkpoints/r3/theta.ckpt"));
  CHECK(history(a) == history(b));
}

TEST_CASE("replaying the manifest config reproduces the run") {
  const fs::path a = fresh_dir("replay_a"), b = fresh_dir("replay_b");
  std::ostringstream log;
  REQUIRE(cmd_train(tiny(a), log) == 0);
  ExperimentConfig replay = parse_config(nlohmann::json::parse(slurp(a / "manifest.json"))["config"].get<std::string>());
  replay.output_dir = b.string();
  REQUIRE(cmd_train(replay, log) == 0);
  CHECK(slurp(a / "checkpoints/r3/theta.ckpt") == slurp(b / "checkpoints/r3/theta.ckpt"));
  CHECK(slurp(a / "checkpoints/r3/client_0.ckpt") == slurp(b / "checkpoints/r3/client_0.ckpt"));
}

TEST_CASE("a resumed run continues identically to an uninterrupted one") {
  const fs::path full = fresh_dir("resume_full"), part = fresh_dir("resume_part");
  std::ostringstream log;
  ExperimentConfig c = tiny(full);
  c.rounds = 4;
  REQUIRE(cmd_train(c, log) == 0);

  ExperimentConfig first = tiny(part);
  first.rounds = 2;
  REQUIRE(cmd_train(first, log) == 0);
  // A crash after the checkpoint can leave extra history behind.
  std::ofstream(part / "history.jsonl", std::ios::app) << "{\"round\": 99}\n";
  ExperimentConfig second = tiny(part);
  second.rounds = 4;
  REQUIRE(cmd_train(second, log, true) == 0);
  CHECK(history(part) == history(full));
  CHECK(slurp(part / "checkpoints/r4/theta.ckpt") == slurp(full / "checkpoints/r4/theta.ckpt"));
  CHECK(slurp(part / "final_metrics.json") == slurp(full / "final_metrics.json"));

  ExperimentConfig changed = second;
  changed.lr_eta = 0.5;
  std::ostringstream err;
  CHECK(cmd_train(changed, err, true) != 0);
  CHECK(err.str().find("config differs") != std::string::npos);
}

TEST_CASE("eval writes the report, embeddings and traversals, identically twice") {
  const fs::path dir = fresh_dir("eval");
  std::ostringstream log;
  REQUIRE(cmd_train(tiny(dir), log) == 0);
  REQUIRE(cmd_eval(dir, log) == 0);
  const auto report = nlohmann::json::parse(slurp(dir / "eval/report.json"));
  CHECK(report["round"] == 3);
  CHECK(report["heldout_recon_per_client"].size() == 2);
  const auto& d = report["disentanglement"];
  for (const char* key : {"separation_ratio_c", "separation_ratio_z", "constraint_estimate_per_client",
                          "constraint_std_error_per_client", "xi_per_client", "fraction_constraint_met"}) {
    CHECK_MESSAGE(d.contains(key), key);
  }
  const std::string r1 = slurp(dir / "eval/report.json");
  const std::string e1 = slurp(dir / "eval/embeddings.csv");
  const std::string p1 = slurp(dir / "eval/traversal_client_0.pgm");
  REQUIRE(cmd_eval(dir, log) == 0);
  CHECK(slurp(dir / "eval/report.json") == r1);
  CHECK(slurp(dir / "eval/embeddings.csv") == e1);
  CHECK(slurp(dir / "eval/traversal_client_0.pgm") == p1);
  CHECK(p1.rfind("P5", 0) == 0);
}

TEST_CASE("an untrained classifier checkpoint scores chance accuracy") {
  const fs::path dir = fresh_dir("chance");
  ExperimentConfig c = tiny(dir);
  c.task = Task::kClassify;
  c.rounds = 0;
  c.samples_per_class = 100;
  c.holdout_fraction = 0.5;
  std::ostringstream log;
  REQUIRE(cmd_train(c, log) == 0);
  REQUIRE(cmd_eval(dir, log) == 0);
  const auto report = nlohmann::json::parse(slurp(dir / "eval/report.json"));
  const double mean = report["accuracy"]["mean"];
  // 2 clients x 100 held-out samples, 4 balanced classes.
  CHECK(std::abs(mean - 0.25) < 3 * std::sqrt(0.25 * 0.75 / 200));
  CHECK(lines(dir / "eval/accuracy.csv").size() == 3);
}

TEST_CASE("FedAvg and fine-tuned FedAvg runs evaluate from their checkpoints") {
  for (Method m : {Method::kFedAvg, Method::kFedAvgFinetune}) {
    const fs::path dir = fresh_dir("fedavg_" + to_string(m));
    ExperimentConfig c = tiny(dir);
    c.task = Task::kClassify;
    c.method = m;
    std::ostringstream log;
    REQUIRE(cmd_train(c, log) == 0);
    REQUIRE(cmd_eval(dir, log) == 0);
    const auto report = nlohmann::json::parse(slurp(dir / "eval/report.json"));
    const auto metrics = nlohmann::json::parse(slurp(dir / "final_metrics.json"));
    CHECK(report["accuracy"]["per_client"] == metrics["final_accuracy"]["per_client"]);
  }
}

TEST_CASE("eval fails on missing or corrupt checkpoints") {
  std::ostringstream log;
  CHECK(cmd_eval(fresh_dir("missing"), log) != 0);
  const fs::path dir = fresh_dir("corrupt");
  REQUIRE(cmd_train(tiny(dir), log) == 0);
  std::ofstream(dir / "checkpoints/r3/theta.ckpt", std::ios::trunc) << "garbage";
  std::ostringstream err;
  CHECK(cmd_eval(dir, err) != 0);
  CHECK(err.str().rfind("error:", 0) == 0);
}

TEST_CASE("the output directory can be overridden from the environment") {
  const fs::path dir = fresh_dir("env");
  ExperimentConfig c = tiny("ignored-dir");
  ::setenv("FEDDVA_OUTPUT_DIR", dir.c_str(), 1);
  std::ostringstream log;
  const int rc = cmd_train(c, log);
  ::unsetenv("FEDDVA_OUTPUT_DIR");
  REQUIRE(rc == 0);
  CHECK(fs::exists(dir / "history.jsonl"));
  CHECK_FALSE(fs::exists("ignored-dir"));
}

TEST_CASE("selftest lists every property and passes") {
  std::ostringstream out;
  CHECK(cmd_selftest(out) == 0);
  const std::string s = out.str();
  CHECK(s.find("FAIL") == std::string::npos);
  CHECK(s.find("PASS autodiff") != std::string::npos);
  CHECK(s.find("PASS formats") != std::string::npos);
}

TEST_CASE("selftest catches a corrupted KL formula") {
  ::setenv("FEDDVA_SELFTEST_MUTATE", "kl", 1);
  std::ostringstream out;
  const int rc = cmd_selftest(out);
  ::unsetenv("FEDDVA_SELFTEST_MUTATE");
  CHECK(rc != 0);
  CHECK(out.str().find("FAIL gaussian: KL to N(0,I)") != std::string::npos);
}

TEST_CASE("the command-line tool reports errors through its exit status") {
  CHECK(run_binary("selftest") == 0);
  CHECK(run_binary("train --bogus 1") != 0);
  CHECK(run_binary("train --lr_eta -1") != 0);
  CHECK(run_binary("eval --run-dir " + fresh_dir("nothing").string()) != 0);
  const fs::path dir = fresh_dir("binary");
  CHECK(run_binary("train --K 2 --m 2 --rounds 1 --samples_per_class 5 --image_size 8 --hidden 8 --batch_size 8 "
                   "--epochs_per_phase 1 --output_dir " + dir.string()) == 0);
  CHECK(lines(dir / "history.jsonl").size() == 1);
  CHECK(run_binary("--version") == 0);
}
