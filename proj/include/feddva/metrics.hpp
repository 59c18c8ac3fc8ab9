#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <json.hpp>

#include "feddva/data.hpp"
#include "feddva/federation.hpp"
#include "feddva/model.hpp"

namespace feddva {

enum class Split { kTrain, kHeldout };

const Dataset& split_of(const ClientShard& shard, Split split);

// Row-major [n, H*W] constant tensor for images [begin, end) of `ds`.
ad::Tensor batch_tensor(const Dataset& ds, std::size_t begin, std::size_t end);

// Argmax of the head on posterior means; no sampling.
std::vector<int> predict(const DvaModel& model, const Dataset& ds);
std::vector<int> predict(const MlpClassifier& model, const Dataset& ds);
double accuracy(std::span<const int> predicted, std::span<const int> labels);

struct AccuracySummary {
  std::vector<double> per_client;
  double mean = 0.0;
  double stddev = 0.0;  // population, across clients
};

AccuracySummary summarize_accuracy(std::vector<double> per_client);
// Each shard evaluated with its own model.
AccuracySummary accuracy_per_client(const std::vector<ClientShard>& shards, Split split);
AccuracySummary accuracy_per_client(const MlpClassifier& model, const std::vector<ClientShard>& shards,
                                    Split split);
AccuracySummary accuracy_per_client(const std::vector<MlpClassifier>& models,
                                    const std::vector<ClientShard>& shards, Split split);

// Posterior means and log-variances for one client.
struct ClientEmbedding {
  std::size_t client = 0;
  std::size_t n = 0;
  std::size_t d_z = 0;
  std::size_t d_c = 0;
  std::vector<double> z_mu, c_mu, c_log_var;  // row-major [n, d]
};

ClientEmbedding embed(const DvaModel& model, const Dataset& ds, std::size_t client,
                      std::size_t max_samples = 0);

// mean pairwise centroid distance / mean within-client distance to centroid.
// `points[k]` is row-major [n_k, dim]. 0 when there is no inter-client spread;
// +inf when clients are separated but collapsed to points.
double separation_ratio(const std::vector<std::vector<double>>& points, std::size_t dim);

struct McEstimate {
  double value = 0.0;
  double std_error = 0.0;
};

// Monte-Carlo KL(uniform mixture of N(mu_i, exp(lv_i)) || N(0, I)).
McEstimate mixture_kl_to_standard(std::span<const double> mu, std::span<const double> log_var,
                                  std::size_t dim, std::size_t samples, std::uint64_t seed);

struct DisentanglementReport {
  double separation_ratio_c = 0.0;
  double separation_ratio_z = 0.0;
  std::vector<double> constraint_estimate;  // per client
  std::vector<double> constraint_std_error;
  std::vector<double> xi;
  double fraction_constraint_met = 0.0;
};

nlohmann::json to_json(const DisentanglementReport& r);

struct ClusteringOptions {
  std::size_t mc_samples = 10000;
  std::uint64_t seed = 0x5eed;
  std::size_t max_per_client = 512;
};

DisentanglementReport clustering_report(const std::vector<ClientShard>& shards, Split split,
                                        const ClusteringOptions& opts = {});

struct TraversalOptions {
  std::size_t steps = 7;
  double span = 2.0;       // half-width of the sweep, in standard deviations
  bool raw_axis = false;   // sweep coordinate `axis` instead of the principal axis
  std::size_t axis = 0;
};

struct TraversalGrid {
  std::size_t steps = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t anchor = 0;
  std::vector<double> pixels;  // [steps(z), steps(c), H, W]

  std::span<const double> cell(std::size_t r, std::size_t c) const;
};

// Rows sweep z, columns sweep c, both through the anchor's posterior means.
TraversalGrid latent_traversal(const DvaModel& model, const Dataset& ds, std::size_t anchor,
                               const TraversalOptions& opts);

// Top principal axis of row-major [n, dim] points and the stddev along it.
std::pair<std::vector<double>, double> principal_axis(std::span<const double> points, std::size_t dim);

struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;
};

std::uint8_t quantize(double v);
GrayImage tile_grid(const TraversalGrid& grid);
void write_pgm(const std::filesystem::path& path, const GrayImage& image);
GrayImage read_pgm(const std::filesystem::path& path);
void export_grid_image(const TraversalGrid& grid, const std::filesystem::path& path);

// client_id,sample_id,z_0..,c_0..
void write_embeddings_csv(const std::filesystem::path& path, const std::vector<ClientEmbedding>& rows);

}  // namespace feddva
