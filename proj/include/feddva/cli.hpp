#pragma once

#include <filesystem>
#include <ostream>
#include <string>

#include "feddva/experiment.hpp"

namespace feddva {

// Build-time `git describe` string, or "unknown".
std::string version_string();

// FEDDVA_OUTPUT_DIR, when set and non-empty, replaces cfg.output_dir.
std::filesystem::path resolve_output_dir(const ExperimentConfig& cfg);

// Run directory layout:
//   config.txt, manifest.json, history.jsonl, final_metrics.json,
//   checkpoints/{state.txt, theta.ckpt, client_<k>.ckpt}
// With `resume`, continues from checkpoints/ and truncates history.jsonl to
// the checkpointed round. Only `rounds` and `output_dir` may differ from the
// stored config.
int cmd_train(const ExperimentConfig& cfg, std::ostream& log, bool resume = false);

// Reads config.txt and checkpoints from `run_dir` and writes report.json,
// accuracy.csv (classification), embeddings.csv and traversal PGMs (dual
// models) into `run_dir`/eval.
int cmd_eval(const std::filesystem::path& run_dir, std::ostream& log);

// Fast invariant suite; prints one PASS/FAIL line per property.
int cmd_selftest(std::ostream& out);

}  // namespace feddva
