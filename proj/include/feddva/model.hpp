#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "feddva/autodiff.hpp"
#include "feddva/gaussian.hpp"

namespace feddva {

enum class Activation { kRelu, kTanh };
// kDual: f(x) -> z, h(x,z) -> c, g(z,c) -> x. kVanilla: f(x) -> z, g(z) -> x.
enum class ModelVariant { kDual, kVanilla };
enum class ClassifierInput { kBoth, kZOnly, kCOnly };

struct ArchitectureConfig {
  std::size_t input_dim = 256;
  std::vector<std::size_t> hidden_dims{256, 256};
  std::size_t d_z = 4;
  std::size_t d_c = 4;
  Activation activation = Activation::kRelu;
  ModelVariant variant = ModelVariant::kDual;
  std::size_t n_classes = 0;  // 0: no classification head
  std::size_t head_hidden = 64;
  ClassifierInput classifier_input = ClassifierInput::kBoth;

  void validate() const;
  std::size_t c_encoder_input() const { return input_dim + d_z; }
  std::size_t decoder_input() const { return variant == ModelVariant::kDual ? d_z + d_c : d_z; }
  std::size_t head_input() const;

  // One `key=value` per line, fixed key order.
  std::string canonical_text() const;
  static ArchitectureConfig from_canonical_text(const std::string& text);
  bool operator==(const ArchitectureConfig&) const = default;
};

std::string to_string(Activation a);
std::string to_string(ModelVariant v);
std::string to_string(ClassifierInput c);

struct Linear {
  ad::Tensor weight;  // [in, out]
  ad::Tensor bias;    // [out]

  static Linear init(std::size_t in, std::size_t out, Rng& rng);
  ad::Tensor forward(const ad::Tensor& x) const;
  void zero();
};

// Dense layers with the activation between them (none after the last).
struct Mlp {
  std::vector<Linear> layers;
  Activation activation = Activation::kRelu;

  static Mlp init(std::size_t in, const std::vector<std::size_t>& hidden, std::size_t out,
                  Activation act, Rng& rng);
  ad::Tensor forward(const ad::Tensor& x) const;
  std::vector<ad::Tensor> params() const;
};

// Hidden trunk (activation after every layer) and two linear heads.
struct GaussianEncoder {
  std::vector<Linear> trunk;
  Linear mu_head;
  Linear log_var_head;
  Activation activation = Activation::kRelu;

  static GaussianEncoder init(std::size_t in, const std::vector<std::size_t>& hidden,
                              std::size_t latent, Activation act, Rng& rng);
  DiagGaussian forward(const ad::Tensor& x) const;
  std::vector<ad::Tensor> params() const;
};

// theta_z and theta_c are the shared encoders; phi is this client's decoder;
// head is the optional classifier, kept local like phi.
struct DvaParams {
  GaussianEncoder theta_z;
  std::optional<GaussianEncoder> theta_c;
  Mlp phi;
  std::optional<Mlp> head;
};

class DvaModel {
 public:
  DvaModel(ArchitectureConfig arch, std::uint64_t seed);
  DvaModel(DvaModel&&) = default;
  DvaModel& operator=(DvaModel&&) = default;
  DvaModel(const DvaModel&) = delete;
  DvaModel& operator=(const DvaModel&) = delete;

  // Deep copy; the clone shares no parameter storage.
  DvaModel clone() const;

  const ArchitectureConfig& arch() const { return arch_; }
  const DvaParams& params() const { return params_; }
  DvaParams& params() { return params_; }

  DiagGaussian encode_z(const ad::Tensor& x) const;
  DiagGaussian encode_c(const ad::Tensor& x, const ad::Tensor& z) const;
  ad::Tensor decode_logits(const ad::Tensor& z, const ad::Tensor& c) const;
  ad::Tensor decode(const ad::Tensor& z, const ad::Tensor& c) const;
  // Vanilla variant: decoder sees z only.
  ad::Tensor decode_z_logits(const ad::Tensor& z) const;
  ad::Tensor classify(const ad::Tensor& z_mu, const ad::Tensor& c_mu) const;

  std::vector<ad::Tensor> shared_params() const;
  std::vector<ad::Tensor> decoder_params() const;
  std::vector<ad::Tensor> head_params() const;
  std::vector<ad::Tensor> local_params() const;  // decoder + head

  std::size_t shared_size() const;
  std::vector<double> flatten_shared() const;
  void load_shared(std::span<const double> flat);
  std::vector<double> flatten_local() const;
  void load_local(std::span<const double> flat);

  void set_shared_trainable(bool on);
  void set_local_trainable(bool on);

  // Zeroes the final linear heads of both encoders.
  void zero_encoder_heads();

 private:
  DvaModel(ArchitectureConfig arch, DvaParams params)
      : arch_(std::move(arch)), params_(std::move(params)) {}
  void check_input(const std::string& op, const ad::Tensor& x) const;

  ArchitectureConfig arch_;
  DvaParams params_;
};

// Whole-model classifier used by the FedAvg baselines; every parameter is shared.
class MlpClassifier {
 public:
  MlpClassifier(std::size_t input_dim, const std::vector<std::size_t>& hidden,
                std::size_t n_classes, Activation act, std::uint64_t seed);
  MlpClassifier clone() const;

  ad::Tensor logits(const ad::Tensor& x) const { return net_.forward(x); }
  std::vector<ad::Tensor> params() const { return net_.params(); }
  std::vector<double> flatten() const;
  void load(std::span<const double> flat);
  std::size_t input_dim() const { return input_dim_; }
  std::size_t n_classes() const { return n_classes_; }

 private:
  MlpClassifier() = default;
  Mlp net_;
  std::size_t input_dim_ = 0;
  std::size_t n_classes_ = 0;
};

std::vector<double> flatten_params(std::span<const ad::Tensor> params);
void load_params(std::span<ad::Tensor> params, std::span<const double> flat);
std::size_t count_params(std::span<const ad::Tensor> params);

// Checkpoint: "FEDDVACK", u32 version, u32 header length, header text,
// u64 count, count little-endian float64 values.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;
  std::string header;  // canonical key=value lines
  std::vector<double> values;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

// Value of `key` in a key=value header, if present.
std::optional<std::string> header_value(const std::string& header, const std::string& key);

}  // namespace feddva
