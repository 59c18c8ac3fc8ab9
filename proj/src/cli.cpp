#include "feddva/cli.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "feddva/metrics.hpp"

#ifndef FEDDVA_VERSION
#define FEDDVA_VERSION "unknown"
#endif

namespace feddva {

namespace fs = std::filesystem;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + tmp.string());
    os << text;
    if (!os) throw std::runtime_error("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string read_text(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::string ckpt_header(const ArchitectureConfig& arch, const std::string& kind, std::size_t round) {
  return arch.canonical_text() + "kind=" + kind + "\nround=" + std::to_string(round) + "\n";
}

fs::path round_dir(const fs::path& run_dir, std::size_t round) {
  return run_dir / "checkpoints" / ("r" + std::to_string(round));
}

Checkpoint read_expected(const fs::path& path, const std::string& kind, std::size_t round) {
  Checkpoint c = read_checkpoint(path);
  if (header_value(c.header, "kind") != kind || header_value(c.header, "round") != std::to_string(round)) {
    throw std::runtime_error("checkpoint " + path.string() + " does not hold " + kind + " for round " +
                             std::to_string(round));
  }
  return c;
}

std::size_t checkpoint_round(const fs::path& run_dir) {
  const fs::path state = run_dir / "checkpoints" / "state.txt";
  if (!fs::exists(state)) throw std::runtime_error("no checkpoint found in " + run_dir.string());
  const auto round = header_value(read_text(state), "round");
  if (!round) throw std::runtime_error("corrupt checkpoint state in " + state.string());
  return std::stoul(*round);
}

// Writes every file for `round` into its own directory, then flips state.txt.
void save_checkpoints(const fs::path& run_dir, const ExperimentConfig& cfg, const ServerState& state,
                      const std::vector<ClientShard>& shards, const ArchitectureConfig& arch) {
  const fs::path dir = round_dir(run_dir, state.round);
  fs::create_directories(dir);
  write_checkpoint(dir / "theta.ckpt", {ckpt_header(arch, "theta", state.round), state.theta});
  if (cfg.method == Method::kFedDva || cfg.method == Method::kVanillaVae) {
    for (const auto& s : shards) {
      write_checkpoint(dir / ("client_" + std::to_string(s.id) + ".ckpt"),
                       {ckpt_header(arch, "client", state.round), s.model->flatten_local()});
    }
  }
  write_text(run_dir / "checkpoints" / "state.txt", "round=" + std::to_string(state.round) + "\n");
  for (const auto& entry : fs::directory_iterator(run_dir / "checkpoints")) {
    if (entry.is_directory() && entry.path() != dir) fs::remove_all(entry.path());
  }
}

void truncate_lines(const fs::path& path, std::size_t keep) {
  std::string out;
  if (fs::exists(path)) {
    std::istringstream is(read_text(path));
    std::string line;
    for (std::size_t i = 0; i < keep && std::getline(is, line); ++i) out += line + "\n";
  }
  write_text(path, out);
}

// Models for a FedDVA-style run restored from `round`.
void load_dva_clients(const fs::path& run_dir, std::size_t round, std::vector<ClientShard>& shards,
                      std::vector<double>& theta) {
  const fs::path dir = round_dir(run_dir, round);
  theta = read_expected(dir / "theta.ckpt", "theta", round).values;
  for (auto& s : shards) {
    const Checkpoint c = read_expected(dir / ("client_" + std::to_string(s.id) + ".ckpt"), "client", round);
    s.model->load_local(c.values);
    s.model->load_shared(theta);
  }
}

double heldout_recon(const DvaModel& model, const Dataset& ds) {
  if (ds.size() == 0) return 0.0;
  const ad::Tensor x = batch_tensor(ds, 0, ds.size());
  const PosteriorMeans m = posterior_means(model, x);
  const ad::Tensor logits = model.arch().variant == ModelVariant::kDual ? model.decode_logits(m.z, m.c)
                                                                        : model.decode_z_logits(m.z);
  return ad::bce_with_logits(logits, x.data()).item();
}

nlohmann::json accuracy_json(const AccuracySummary& s) {
  return {{"per_client", s.per_client}, {"mean", s.mean}, {"stddev", s.stddev}};
}

}  // namespace

std::string version_string() { return FEDDVA_VERSION; }

fs::path resolve_output_dir(const ExperimentConfig& cfg) {
  const char* env = std::getenv("FEDDVA_OUTPUT_DIR");
  if (env && *env) return fs::path(env);
  return fs::path(cfg.output_dir);
}

int cmd_train(const ExperimentConfig& cfg, std::ostream& log, bool resume) {
  try {
    cfg.validate();
    const fs::path dir = resolve_output_dir(cfg);
    fs::create_directories(dir / "checkpoints");
    ExperimentData data = build_experiment_data(cfg);
    const FederationConfig fc = federation_config_for(cfg, data.input_dim);

    const std::string config_text = format_config(cfg);
    if (resume) {
      // Only the round budget and output location may change between legs.
      ExperimentConfig stored = load_config(dir / "config.txt");
      stored.rounds = cfg.rounds;
      stored.output_dir = cfg.output_dir;
      if (stored != cfg) throw std::runtime_error("resume: config differs from the one stored in " + dir.string());
      write_text(dir / "config.txt", config_text);
    } else {
      write_text(dir / "config.txt", config_text);
      nlohmann::json manifest{{"version", version_string()},
                              {"seed", cfg.seed},
                              {"method", to_string(cfg.method)},
                              {"task", to_string(cfg.task)},
                              {"config", config_text},
                              {"replay", "feddva train --config config.txt"}};
      write_text(dir / "manifest.json", manifest.dump(2) + "\n");
      write_text(dir / "partition.json", to_json(data.plan).dump() + "\n");
    }

    ServerState start;
    const bool dva = cfg.method == Method::kFedDva || cfg.method == Method::kVanillaVae;
    if (dva) start = init_feddva(fc, data.shards);
    if (resume) {
      const std::size_t round = checkpoint_round(dir);
      if (dva) {
        load_dva_clients(dir, round, data.shards, start.theta);
      } else {
        start.seed = cfg.seed;
        start.theta = read_expected(round_dir(dir, round) / "theta.ckpt", "theta", round).values;
      }
      start.round = round;
      truncate_lines(dir / "history.jsonl", round);
      log << "resuming at round " << round << "\n";
    } else {
      truncate_lines(dir / "history.jsonl", 0);
    }

    std::ofstream history(dir / "history.jsonl", std::ios::app);
    if (!history) throw std::runtime_error("cannot append to history.jsonl");
    const ArchitectureConfig arch = fc.arch;
    RoundObserver observer = [&](const ServerState& s, const std::vector<ClientShard>& shards) {
      const RoundRecord& rec = s.history.back();
      history << to_json(rec).dump() << "\n";
      history.flush();
      log << "round " << s.round << "/" << cfg.rounds << " loss " << rec.mean_total;
      if (!rec.accuracy.empty()) log << " acc " << rec.accuracy_mean << " +- " << rec.accuracy_std;
      log << "\n";
      if (s.round == cfg.rounds || (cfg.checkpoint_every && s.round % cfg.checkpoint_every == 0)) {
        save_checkpoints(dir, cfg, s, shards, arch);
      }
    };

    ServerState final;
    std::vector<MlpClassifier> tuned;
    switch (cfg.method) {
      case Method::kFedDva:
      case Method::kVanillaVae: final = run_feddva(fc, data.shards, observer, std::move(start)); break;
      case Method::kFedAvg: final = run_fedavg_baseline(fc, data.shards, observer, std::move(start)); break;
      case Method::kFedAvgFinetune:
        final = run_fedavg_finetune(fc, data.shards, cfg.ft_epochs, observer, std::move(start), &tuned);
        break;
    }
    if (final.history.empty() && !resume) save_checkpoints(dir, cfg, final, data.shards, arch);
    if (!tuned.empty()) {
      for (std::size_t k = 0; k < tuned.size(); ++k) {
        write_checkpoint(round_dir(dir, final.round) / ("finetuned_" + std::to_string(k) + ".ckpt"),
                         {ckpt_header(arch, "finetuned", final.round), tuned[k].flatten()});
      }
    }

    nlohmann::json metrics{{"rounds", final.round}, {"method", to_string(cfg.method)}};
    if (!final.history.empty()) metrics["final_mean_total"] = final.history.back().mean_total;
    if (!final.final_accuracy.empty()) {
      metrics["final_accuracy"] = accuracy_json(summarize_accuracy(final.final_accuracy));
    }
    write_text(dir / "final_metrics.json", metrics.dump(2) + "\n");
    log << "wrote " << dir.string() << "\n";
    return 0;
  } catch (const std::exception& e) {
    log << "error: " << e.what() << "\n";
    return 1;
  }
}

int cmd_eval(const fs::path& run_dir, std::ostream& log) {
  try {
    const ExperimentConfig cfg = load_config(run_dir / "config.txt");
    ExperimentData data = build_experiment_data(cfg);
    const FederationConfig fc = federation_config_for(cfg, data.input_dim);
    const std::size_t round = checkpoint_round(run_dir);
    const fs::path out = run_dir / "eval";
    fs::create_directories(out);

    nlohmann::json report{{"method", to_string(cfg.method)}, {"task", to_string(cfg.task)}, {"round", round}};
    std::optional<AccuracySummary> acc;

    if (cfg.method == Method::kFedDva || cfg.method == Method::kVanillaVae) {
      ServerState st = init_feddva(fc, data.shards);
      load_dva_clients(run_dir, round, data.shards, st.theta);
      std::vector<double> recon;
      for (const auto& s : data.shards) recon.push_back(heldout_recon(*s.model, s.heldout));
      report["heldout_recon_per_client"] = recon;
      if (cfg.method == Method::kFedDva) {
        if (data.shards.size() >= 2) {
          report["disentanglement"] = to_json(clustering_report(data.shards, Split::kHeldout));
        }
        std::vector<ClientEmbedding> emb;
        for (const auto& s : data.shards) {
          emb.push_back(embed(*s.model, s.heldout, s.id));
          export_grid_image(latent_traversal(*s.model, s.train, 0, {}),
                            out / ("traversal_client_" + std::to_string(s.id) + ".pgm"));
        }
        write_embeddings_csv(out / "embeddings.csv", emb);
        if (cfg.task == Task::kClassify) acc = accuracy_per_client(data.shards, Split::kHeldout);
      }
    } else {
      MlpClassifier global = make_baseline_classifier(fc);
      global.load(read_expected(round_dir(run_dir, round) / "theta.ckpt", "theta", round).values);
      if (cfg.method == Method::kFedAvgFinetune) {
        std::vector<MlpClassifier> tuned;
        for (std::size_t k = 0; k < data.shards.size(); ++k) {
          MlpClassifier m = global.clone();
          m.load(read_expected(round_dir(run_dir, round) / ("finetuned_" + std::to_string(k) + ".ckpt"),
                               "finetuned", round)
                     .values);
          tuned.push_back(std::move(m));
        }
        acc = accuracy_per_client(tuned, data.shards, Split::kHeldout);
      } else {
        acc = accuracy_per_client(global, data.shards, Split::kHeldout);
      }
    }

    if (acc) {
      report["accuracy"] = accuracy_json(*acc);
      std::ostringstream csv;
      csv.precision(17);
      csv << "client,accuracy\n";
      for (std::size_t k = 0; k < acc->per_client.size(); ++k) csv << k << ',' << acc->per_client[k] << '\n';
      write_text(out / "accuracy.csv", csv.str());
    }
    write_text(out / "report.json", report.dump(2) + "\n");
    log << "wrote " << out.string() << "\n";
    return 0;
  } catch (const std::exception& e) {
    log << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace feddva
