#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include <json.hpp>

#include "feddva/data.hpp"
#include "feddva/model.hpp"
#include "feddva/objective.hpp"

namespace feddva {

enum class Task { kReconstruct, kClassify };

std::string to_string(Task t);
Task task_from_string(const std::string& s);

struct ClientShard {
  std::size_t id = 0;
  Dataset train;
  Dataset heldout;
  double weight = 0.0;  // |D_k| / sum_j |D_j|
  double xi = 32.0;
  // Persistent decoder (and head). The shared slot is overwritten with the
  // incoming theta at the start of every update.
  std::optional<DvaModel> model;
};

// One shard per client dataset, weights proportional to training-set size.
std::vector<ClientShard> make_client_shards(std::vector<Dataset> train, std::vector<Dataset> heldout,
                                            double xi);

struct LocalOptions {
  std::size_t epochs = 1;
  std::size_t batch_size = 64;
  double lr_eta = 1e-3;     // decoder (and head) step
  double lr_lambda = 1e-3;  // shared encoder step
  ObjectiveWeights weights;
  Task task = Task::kReconstruct;
  bool swap_phase_order = false;  // only for demonstrating that order matters
};

struct PhaseStats {
  LossBreakdown mean;
  std::size_t batches = 0;
  std::vector<double> constraint_gaps;  // kl_c_to_qc - kl_c_to_mixture, one per batch
};

struct ClientRoundStats {
  std::size_t client = 0;
  PhaseStats phase1;  // decoder step
  PhaseStats phase2;  // encoder step
};

struct RoundRecord {
  std::size_t round = 0;
  std::vector<std::size_t> sampled;
  std::vector<ClientRoundStats> clients;
  std::vector<double> accuracy;  // held-out, every client; empty outside classification
  double accuracy_mean = 0.0;
  double accuracy_std = 0.0;
  double mean_total = 0.0;  // client average of the per-batch total loss, both phases
  double wall_seconds = 0.0;
};

nlohmann::json to_json(const RoundRecord& r);

struct ServerState {
  std::vector<double> theta;  // FedDVA: shared encoders. FedAvg: the whole classifier.
  std::size_t round = 0;
  std::uint64_t seed = 0;
  std::vector<RoundRecord> history;
  std::vector<double> final_accuracy;  // per client, classification only
};

struct FederationConfig {
  std::size_t clients_per_round = 4;  // m
  std::size_t rounds = 30;
  LocalOptions local;
  std::uint64_t seed = 1;
  std::size_t threads = 1;
  std::size_t ft_epochs = 0;
  ArchitectureConfig arch;

  void validate(std::size_t num_clients) const;
};

// Uniform sample of m distinct ids from [0, K), sorted; depends only on (seed, round).
std::vector<std::size_t> sample_clients(std::size_t num_clients, std::size_t m, std::uint64_t seed,
                                        std::size_t round);

// Weighted average with weights renormalized over the keys of `updates`.
std::vector<double> aggregate(const std::map<std::size_t, std::vector<double>>& updates,
                              const std::map<std::size_t, double>& weights);

// Loss over one minibatch given by sample indices into the client's data.
using BatchLoss = std::function<LossResult(std::span<const std::size_t> batch, Rng& rng)>;

// Phase 1 steps `local` (lr_eta) with `shared` frozen, then Phase 2 steps
// `shared` (lr_lambda) with `local` frozen, each for opts.epochs passes over
// n samples. Trainability of every tensor is restored afterwards.
ClientRoundStats two_phase_update(std::vector<ad::Tensor> local, std::vector<ad::Tensor> shared,
                                  std::size_t n, const LocalOptions& opts, Rng& rng,
                                  const BatchLoss& loss);

// Loads theta into the shard's model, runs the two-phase update, and returns
// the updated shared parameters. The shard keeps the new decoder.
std::vector<double> client_update(ClientShard& shard, std::span<const double> theta,
                                  const LocalOptions& opts, Rng& rng, ClientRoundStats* stats = nullptr);

// Creates any missing client models and an initial theta.
ServerState init_feddva(const FederationConfig& cfg, std::vector<ClientShard>& shards);

using RoundObserver = std::function<void(const ServerState&, const std::vector<ClientShard>&)>;

// Runs rounds [start.round, cfg.rounds). An empty start.theta means a fresh run.
ServerState run_feddva(const FederationConfig& cfg, std::vector<ClientShard>& shards,
                       const RoundObserver& observer = {}, ServerState start = {});

// FedAvg over a whole MlpClassifier (all parameters aggregated).
MlpClassifier make_baseline_classifier(const FederationConfig& cfg);
ServerState run_fedavg_baseline(const FederationConfig& cfg, const std::vector<ClientShard>& shards,
                                const RoundObserver& observer = {}, ServerState start = {});
// As above, then every client fine-tunes the final model for ft_epochs local
// epochs (lr_eta) before evaluation.
ServerState run_fedavg_finetune(const FederationConfig& cfg, const std::vector<ClientShard>& shards,
                                std::size_t ft_epochs, const RoundObserver& observer = {},
                                ServerState start = {}, std::vector<MlpClassifier>* tuned = nullptr);

// Minibatch index lists for one epoch: shuffled, a trailing batch of one dropped.
std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch_size, Rng& rng);

}  // namespace feddva
