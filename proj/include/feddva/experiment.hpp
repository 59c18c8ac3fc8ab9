#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "feddva/data.hpp"
#include "feddva/federation.hpp"

namespace feddva {

enum class Method { kFedDva, kFedAvg, kFedAvgFinetune, kVanillaVae };

std::string to_string(Method m);
Method method_from_string(const std::string& s);

// Flat `key = value` experiment description. Unset optional keys resolve
// from the task (latent sizes) or from other keys (xi).
struct ExperimentConfig {
  Task task = Task::kReconstruct;
  Method method = Method::kFedDva;
  std::size_t K = 4;
  std::size_t m = 4;
  std::size_t rounds = 200;
  std::size_t epochs_per_phase = 5;
  std::size_t batch_size = 256;
  double lr_eta = 0.001;
  double lr_lambda = 0.001;
  std::optional<std::size_t> d_z;
  std::optional<std::size_t> d_c;
  double alpha = 1.0;
  double beta = 0.75;
  double gamma = 1.0;
  double xi_per_dim = 8.0;
  double xi_scale = 1.0;
  std::uint64_t seed = 1;
  std::string dataset = "toy";  // "toy" or a directory holding IDX files
  std::string partition = "marked";  // marked | label-skew
  double concentration = 0.3;
  std::string output_dir = "runs/default";
  std::vector<std::size_t> hidden{256, 256};
  std::size_t head_hidden = 64;
  std::string activation = "relu";
  std::size_t n_classes = 10;
  std::size_t samples_per_class = 200;
  std::size_t image_size = 16;
  double holdout_fraction = 0.2;
  std::size_t samples = 1;
  std::size_t threads = 1;
  std::size_t ft_epochs = 1;
  bool frozen_representation = false;
  std::string classifier_input = "both";  // both | z | c
  std::size_t checkpoint_every = 10;

  std::size_t resolved_d_z() const;
  std::size_t resolved_d_c() const;
  double xi() const { return xi_per_dim * static_cast<double>(resolved_d_c()) * xi_scale; }

  void validate() const;
  bool operator==(const ExperimentConfig&) const = default;
};

// Every known key, in file order.
const std::vector<std::string>& config_keys();

// Sets one key from its text form; errors name the key.
void set_config_value(ExperimentConfig& cfg, const std::string& key, const std::string& value);
std::string get_config_value(const ExperimentConfig& cfg, const std::string& key);

ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);
std::string format_config(const ExperimentConfig& cfg);
void save_config(const std::filesystem::path& path, const ExperimentConfig& cfg);

ArchitectureConfig architecture_for(const ExperimentConfig& cfg, std::size_t input_dim);
FederationConfig federation_config_for(const ExperimentConfig& cfg, std::size_t input_dim);

struct ExperimentData {
  PartitionPlan plan;
  std::vector<ClientShard> shards;
  std::size_t input_dim = 0;
};

// Loads or synthesizes the dataset, partitions it, applies marks and splits
// each client into train and held-out parts. Deterministic in the config.
ExperimentData build_experiment_data(const ExperimentConfig& cfg);

}  // namespace feddva
