#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "feddva/rng.hpp"

namespace feddva {

struct Dataset {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t n_classes = 0;
  std::vector<double> pixels;  // n * height * width, row-major, in [0,1]
  std::vector<int> labels;
  std::string meta;

  std::size_t size() const { return labels.size(); }
  std::size_t pixels_per_image() const { return height * width; }
  std::span<const double> image(std::size_t i) const;
  std::span<double> image(std::size_t i);

  Dataset subset(std::span<const std::size_t> indices) const;
  // Row-major [indices.size(), H*W] buffer.
  std::vector<double> gather(std::span<const std::size_t> indices) const;
  std::vector<int> gather_labels(std::span<const std::size_t> indices) const;
  std::vector<std::size_t> class_counts() const;
  void validate() const;
};

// ---- IDX (MNIST distribution format) -------------------------------------

struct IdxArray {
  std::uint8_t type_code = 0x08;  // 0x08 = unsigned byte
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> data;
};

IdxArray parse_idx(const std::filesystem::path& path);
IdxArray parse_idx_bytes(std::span<const std::uint8_t> bytes);
void write_idx(const std::filesystem::path& path, const IdxArray& array);
std::vector<std::uint8_t> encode_idx(const IdxArray& array);

// Images (magic 0x00000803) and labels (0x00000801) into a Dataset, pixels / 255.
Dataset load_idx_dataset(const std::filesystem::path& images, const std::filesystem::path& labels,
                         std::size_t n_classes = 10);

// ---- Client-specific marks -----------------------------------------------

enum class MarkKind { kHorizontalSinusoid, kEllipse, kVerticalSinusoid, kPlain };

std::string to_string(MarkKind kind);
MarkKind mark_kind_from_string(const std::string& s);

struct MarkSpec {
  MarkKind kind = MarkKind::kPlain;
  double amplitude = 4.0;   // pixels (sinusoid)
  double frequency = 2.0;   // cycles per image width (or height)
  double phase = 0.0;       // radians
  double thickness = 1.0;   // band width in pixels
  double intensity = 1.0;   // value composited with max()
  double radius_x = 6.4;    // ellipse semi-axes, pixels
  double radius_y = 4.8;

  // Defaults scaled to an H x W image.
  static MarkSpec defaults(MarkKind kind, std::size_t height, std::size_t width);
};

// Max-composites the mark over `image` ([H*W] row-major); result is clamped to [0,1].
void apply_mark(std::span<double> image, std::size_t height, std::size_t width, const MarkSpec& spec);

// ---- Federation partitions -----------------------------------------------

enum class PartitionScheme { kUniformMarked, kLabelSkew };

struct PartitionPlan {
  PartitionScheme scheme = PartitionScheme::kUniformMarked;
  std::vector<std::vector<std::size_t>> clients;  // sample indices per client
  std::vector<std::vector<double>> class_fractions;  // [class][client], label-skew only
  std::vector<MarkSpec> marks;                       // per client, marked scheme only

  std::size_t num_clients() const { return clients.size(); }
  // Disjoint, covering [0, n), every client nonempty.
  bool is_partition_of(std::size_t n) const;
};

nlohmann::json to_json(const PartitionPlan& plan);
PartitionPlan partition_plan_from_json(const nlohmann::json& j);

// Marks cycle horizontal sinusoid, ellipse, vertical sinusoid, plain.
std::vector<MarkSpec> default_client_marks(std::size_t k, std::size_t height, std::size_t width);

PartitionPlan partition_uniform_marked(const Dataset& ds, std::size_t k,
                                       std::vector<MarkSpec> marks, std::uint64_t seed);

PartitionPlan partition_label_skew(const Dataset& ds, std::size_t k, double concentration,
                                   std::uint64_t seed, std::size_t min_per_client = 2);

std::vector<double> dirichlet_sample(std::size_t k, double concentration, Rng& rng);

// One dataset per client; marks (if any) are applied to the copied images.
std::vector<Dataset> materialize(const Dataset& ds, const PartitionPlan& plan);

// Deterministic split of a client dataset into train and held-out parts.
std::pair<Dataset, Dataset> split_holdout(const Dataset& ds, double holdout_fraction,
                                          std::uint64_t seed);

// Seven-segment style glyphs, one per class, with random shift, scale, slant
// and stroke-width jitter.
Dataset make_toy_digits(std::size_t n_per_class, std::size_t n_classes, std::size_t height,
                        std::size_t width, std::uint64_t seed);

}  // namespace feddva
