#include "feddva/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <stdexcept>

namespace feddva {

namespace {

[[noreturn]] void idx_error(const std::string& what, std::size_t offset) {
  throw std::runtime_error("idx: " + what + " at byte offset " + std::to_string(offset));
}

void check_mark(const MarkSpec& s, std::size_t height, std::size_t width) {
  auto finite = [](double v) { return std::isfinite(v); };
  if (!finite(s.amplitude) || !finite(s.frequency) || !finite(s.phase) || !finite(s.thickness) ||
      !finite(s.intensity) || !finite(s.radius_x) || !finite(s.radius_y)) {
    throw std::invalid_argument("apply_mark: non-finite mark parameter");
  }
  if (s.intensity < 0.0 || s.intensity > 1.0) {
    throw std::invalid_argument("apply_mark: intensity must lie in [0,1]");
  }
  if (s.kind == MarkKind::kPlain) return;
  if (s.thickness <= 0.0) throw std::invalid_argument("apply_mark: thickness must be positive");
  switch (s.kind) {
    case MarkKind::kHorizontalSinusoid:
      if (s.amplitude < 0.0 || s.amplitude > static_cast<double>(height)) {
        throw std::invalid_argument("apply_mark: amplitude " + std::to_string(s.amplitude) +
                                    " exceeds image height " + std::to_string(height));
      }
      if (s.frequency < 0.0) throw std::invalid_argument("apply_mark: negative frequency");
      break;
    case MarkKind::kVerticalSinusoid:
      if (s.amplitude < 0.0 || s.amplitude > static_cast<double>(width)) {
        throw std::invalid_argument("apply_mark: amplitude " + std::to_string(s.amplitude) +
                                    " exceeds image width " + std::to_string(width));
      }
      if (s.frequency < 0.0) throw std::invalid_argument("apply_mark: negative frequency");
      break;
    case MarkKind::kEllipse:
      if (s.radius_x <= 0.0 || s.radius_y <= 0.0 || s.radius_x > static_cast<double>(width) ||
          s.radius_y > static_cast<double>(height)) {
        throw std::invalid_argument("apply_mark: ellipse radii must be positive and fit the image");
      }
      break;
    case MarkKind::kPlain: break;
  }
}

void composite(std::span<double> image, std::size_t idx, double intensity) {
  image[idx] = std::clamp(std::max(image[idx], intensity), 0.0, 1.0);
}

// Rasterizes one axis-aligned sinusoid: for each position `u` along the
// curve's axis, the band of cross-axis pixels within thickness/2 of the curve.
void rasterize_sinusoid(std::span<double> image, std::size_t height, std::size_t width,
                        const MarkSpec& s, bool horizontal) {
  const std::size_t along = horizontal ? width : height;
  const std::size_t across = horizontal ? height : width;
  const double center = (static_cast<double>(across) - 1.0) / 2.0;
  const double half = s.thickness / 2.0;
  for (std::size_t u = 0; u < along; ++u) {
    const double y = center + s.amplitude * std::sin(2.0 * std::numbers::pi * s.frequency *
                                                         static_cast<double>(u) /
                                                         static_cast<double>(along) +
                                                     s.phase);
    const double lo = std::max(0.0, std::ceil(y - half));
    const double hi = std::min(static_cast<double>(across) - 1.0, std::floor(y + half));
    for (double v = lo; v <= hi; v += 1.0) {
      const auto vi = static_cast<std::size_t>(v);
      const std::size_t idx = horizontal ? vi * width + u : u * width + vi;
      composite(image, idx, s.intensity);
    }
  }
}

// Ellipse band between the (r - t/2) and (r + t/2) ellipses, scanned row by row.
void rasterize_ellipse(std::span<double> image, std::size_t height, std::size_t width,
                       const MarkSpec& s) {
  const double cy = (static_cast<double>(height) - 1.0) / 2.0;
  const double cx = (static_cast<double>(width) - 1.0) / 2.0;
  const double half = s.thickness / 2.0;
  const double oy = s.radius_y + half;
  const double ox = s.radius_x + half;
  const double iy = s.radius_y - half;
  const double ix = s.radius_x - half;
  for (std::size_t r = 0; r < height; ++r) {
    const double dr = static_cast<double>(r) - cy;
    if (std::abs(dr) > oy) continue;
    const double outer = ox * std::sqrt(std::max(0.0, 1.0 - (dr / oy) * (dr / oy)));
    double inner = -1.0;
    if (iy > 0.0 && ix > 0.0 && std::abs(dr) < iy) {
      inner = ix * std::sqrt(1.0 - (dr / iy) * (dr / iy));
    }
    for (std::size_t c = 0; c < width; ++c) {
      const double dc = std::abs(static_cast<double>(c) - cx);
      if (dc <= outer && !(dc < inner)) composite(image, r * width + c, s.intensity);
    }
  }
}

// Seven-segment layout: endpoints in a unit glyph box, y pointing down.
struct Segment {
  double x0, y0, x1, y1;
};
constexpr std::array<Segment, 7> kSegments{{
    {0, 0, 1, 0},      // a top
    {1, 0, 1, 0.5},    // b upper right
    {1, 0.5, 1, 1},    // c lower right
    {0, 1, 1, 1},      // d bottom
    {0, 0.5, 0, 1},    // e lower left
    {0, 0, 0, 0.5},    // f upper left
    {0, 0.5, 1, 0.5},  // g middle
}};
// Bit i set -> segment i lit.
constexpr std::array<unsigned, 10> kDigitSegments{
    0b0111111,  // 0: abcdef
    0b0000110,  // 1: bc
    0b1011011,  // 2: abdeg
    0b1001111,  // 3: abcdg
    0b1100110,  // 4: bcfg
    0b1101101,  // 5: acdfg
    0b1111101,  // 6: acdefg
    0b0000111,  // 7: abc
    0b1111111,  // 8
    0b1101111,  // 9: abcdfg
};

double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
  const double vx = bx - ax;
  const double vy = by - ay;
  const double len2 = vx * vx + vy * vy;
  double t = len2 > 0 ? ((px - ax) * vx + (py - ay) * vy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double dx = px - (ax + t * vx);
  const double dy = py - (ay + t * vy);
  return std::sqrt(dx * dx + dy * dy);
}

}  // namespace

// ---- Dataset ----------------------------------------------------------------

std::span<const double> Dataset::image(std::size_t i) const {
  return std::span<const double>(pixels).subspan(i * pixels_per_image(), pixels_per_image());
}

std::span<double> Dataset::image(std::size_t i) {
  return std::span<double>(pixels).subspan(i * pixels_per_image(), pixels_per_image());
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out;
  out.height = height;
  out.width = width;
  out.n_classes = n_classes;
  out.meta = meta;
  out.pixels = gather(indices);
  out.labels = gather_labels(indices);
  return out;
}

std::vector<double> Dataset::gather(std::span<const std::size_t> indices) const {
  const std::size_t p = pixels_per_image();
  std::vector<double> out(indices.size() * p);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= size()) throw std::out_of_range("Dataset::gather: index out of range");
    const auto src = image(indices[i]);
    std::copy(src.begin(), src.end(), out.begin() + i * p);
  }
  return out;
}

std::vector<int> Dataset::gather_labels(std::span<const std::size_t> indices) const {
  std::vector<int> out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) out[i] = labels.at(indices[i]);
  return out;
}

std::vector<std::size_t> Dataset::class_counts() const {
  std::vector<std::size_t> counts(n_classes, 0);
  for (int l : labels) ++counts.at(static_cast<std::size_t>(l));
  return counts;
}

void Dataset::validate() const {
  if (pixels.size() != labels.size() * pixels_per_image()) {
    throw std::invalid_argument("Dataset: pixel buffer does not match label count");
  }
  for (double v : pixels) {
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("Dataset: pixel outside [0,1]");
  }
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= n_classes) {
      throw std::invalid_argument("Dataset: label " + std::to_string(l) + " outside [0," +
                                  std::to_string(n_classes) + ")");
    }
  }
}

// ---- IDX ------------------------------------------------------------------

IdxArray parse_idx_bytes(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4) idx_error("truncated magic number", bytes.size());
  if (bytes[0] != 0 || bytes[1] != 0) idx_error("bad magic (leading bytes must be zero)", 0);
  IdxArray out;
  out.type_code = bytes[2];
  if (out.type_code != 0x08) idx_error("unsupported element type " + std::to_string(bytes[2]), 2);
  const std::size_t ndims = bytes[3];
  if (ndims == 0) idx_error("zero dimensions", 3);
  if (bytes.size() < 4 + 4 * ndims) idx_error("truncated dimension header", bytes.size());
  std::size_t count = 1;
  for (std::size_t d = 0; d < ndims; ++d) {
    const std::size_t o = 4 + 4 * d;
    const std::uint32_t dim = (std::uint32_t{bytes[o]} << 24) | (std::uint32_t{bytes[o + 1]} << 16) |
                              (std::uint32_t{bytes[o + 2]} << 8) | std::uint32_t{bytes[o + 3]};
    out.dims.push_back(dim);
    count *= dim;
  }
  const std::size_t header = 4 + 4 * ndims;
  if (bytes.size() < header + count) {
    idx_error("truncated payload (expected " + std::to_string(count) + " bytes)", bytes.size());
  }
  if (bytes.size() > header + count) idx_error("trailing bytes after payload", header + count);
  out.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(header), bytes.end());
  return out;
}

IdxArray parse_idx(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("idx: cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  try {
    return parse_idx_bytes(bytes);
  } catch (const std::runtime_error& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

std::vector<std::uint8_t> encode_idx(const IdxArray& array) {
  std::size_t count = 1;
  for (auto d : array.dims) count *= d;
  if (array.dims.empty() || array.dims.size() > 255 || count != array.data.size()) {
    throw std::invalid_argument("encode_idx: dims do not match payload");
  }
  std::vector<std::uint8_t> out{0, 0, array.type_code, static_cast<std::uint8_t>(array.dims.size())};
  for (auto d : array.dims) {
    out.push_back(static_cast<std::uint8_t>(d >> 24));
    out.push_back(static_cast<std::uint8_t>(d >> 16));
    out.push_back(static_cast<std::uint8_t>(d >> 8));
    out.push_back(static_cast<std::uint8_t>(d));
  }
  out.insert(out.end(), array.data.begin(), array.data.end());
  return out;
}

void write_idx(const std::filesystem::path& path, const IdxArray& array) {
  const auto bytes = encode_idx(array);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("idx: cannot write " + path.string());
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Dataset load_idx_dataset(const std::filesystem::path& images, const std::filesystem::path& labels,
                         std::size_t n_classes) {
  const IdxArray img = parse_idx(images);
  const IdxArray lab = parse_idx(labels);
  if (img.dims.size() != 3) throw std::runtime_error("idx: image file must be 3-D (magic 0x00000803)");
  if (lab.dims.size() != 1) throw std::runtime_error("idx: label file must be 1-D (magic 0x00000801)");
  if (img.dims[0] != lab.dims[0]) throw std::runtime_error("idx: image and label counts differ");
  Dataset ds;
  ds.height = img.dims[1];
  ds.width = img.dims[2];
  ds.n_classes = n_classes;
  ds.meta = "idx:" + images.string();
  ds.pixels.resize(img.data.size());
  std::transform(img.data.begin(), img.data.end(), ds.pixels.begin(),
                 [](std::uint8_t b) { return static_cast<double>(b) / 255.0; });
  ds.labels.assign(lab.data.begin(), lab.data.end());
  ds.validate();
  return ds;
}

// ---- Marks ----------------------------------------------------------------

std::string to_string(MarkKind kind) {
  switch (kind) {
    case MarkKind::kHorizontalSinusoid: return "horizontal-sinusoid";
    case MarkKind::kEllipse: return "ellipse";
    case MarkKind::kVerticalSinusoid: return "vertical-sinusoid";
    case MarkKind::kPlain: return "plain";
  }
  return "plain";
}

MarkKind mark_kind_from_string(const std::string& s) {
  if (s == "horizontal-sinusoid") return MarkKind::kHorizontalSinusoid;
  if (s == "ellipse") return MarkKind::kEllipse;
  if (s == "vertical-sinusoid") return MarkKind::kVerticalSinusoid;
  if (s == "plain") return MarkKind::kPlain;
  throw std::invalid_argument("unknown mark kind: " + s);
}

MarkSpec MarkSpec::defaults(MarkKind kind, std::size_t height, std::size_t width) {
  MarkSpec s;
  s.kind = kind;
  const double h = static_cast<double>(height);
  const double w = static_cast<double>(width);
  s.amplitude = kind == MarkKind::kVerticalSinusoid ? w / 4.0 : h / 4.0;
  s.frequency = 2.0;
  s.phase = 0.0;
  s.thickness = 1.0;
  s.intensity = 1.0;
  s.radius_x = 0.4 * w;
  s.radius_y = 0.3 * h;
  return s;
}

void apply_mark(std::span<double> image, std::size_t height, std::size_t width, const MarkSpec& spec) {
  if (image.size() != height * width) throw std::invalid_argument("apply_mark: image size mismatch");
  check_mark(spec, height, width);
  switch (spec.kind) {
    case MarkKind::kPlain: return;
    case MarkKind::kHorizontalSinusoid: rasterize_sinusoid(image, height, width, spec, true); break;
    case MarkKind::kVerticalSinusoid: rasterize_sinusoid(image, height, width, spec, false); break;
    case MarkKind::kEllipse: rasterize_ellipse(image, height, width, spec); break;
  }
}

// ---- Partitions -------------------------------------------------------------

bool PartitionPlan::is_partition_of(std::size_t n) const {
  std::vector<char> seen(n, 0);
  std::size_t total = 0;
  for (const auto& c : clients) {
    if (c.empty()) return false;
    for (auto i : c) {
      if (i >= n || seen[i]) return false;
      seen[i] = 1;
      ++total;
    }
  }
  return total == n;
}

nlohmann::json to_json(const PartitionPlan& plan) {
  nlohmann::json j;
  j["scheme"] = plan.scheme == PartitionScheme::kUniformMarked ? "uniform-with-marks" : "label-skew";
  j["clients"] = plan.clients;
  j["class_fractions"] = plan.class_fractions;
  nlohmann::json marks = nlohmann::json::array();
  for (const auto& m : plan.marks) {
    marks.push_back({{"kind", to_string(m.kind)},
                     {"amplitude", m.amplitude},
                     {"frequency", m.frequency},
                     {"phase", m.phase},
                     {"thickness", m.thickness},
                     {"intensity", m.intensity},
                     {"radius_x", m.radius_x},
                     {"radius_y", m.radius_y}});
  }
  j["marks"] = marks;
  return j;
}

PartitionPlan partition_plan_from_json(const nlohmann::json& j) {
  PartitionPlan plan;
  const auto scheme = j.at("scheme").get<std::string>();
  if (scheme == "uniform-with-marks") plan.scheme = PartitionScheme::kUniformMarked;
  else if (scheme == "label-skew") plan.scheme = PartitionScheme::kLabelSkew;
  else throw std::invalid_argument("partition plan: unknown scheme " + scheme);
  plan.clients = j.at("clients").get<std::vector<std::vector<std::size_t>>>();
  plan.class_fractions = j.at("class_fractions").get<std::vector<std::vector<double>>>();
  for (const auto& m : j.at("marks")) {
    MarkSpec s;
    s.kind = mark_kind_from_string(m.at("kind").get<std::string>());
    s.amplitude = m.at("amplitude").get<double>();
    s.frequency = m.at("frequency").get<double>();
    s.phase = m.at("phase").get<double>();
    s.thickness = m.at("thickness").get<double>();
    s.intensity = m.at("intensity").get<double>();
    s.radius_x = m.at("radius_x").get<double>();
    s.radius_y = m.at("radius_y").get<double>();
    plan.marks.push_back(s);
  }
  return plan;
}

std::vector<MarkSpec> default_client_marks(std::size_t k, std::size_t height, std::size_t width) {
  constexpr std::array<MarkKind, 4> kCycle{MarkKind::kHorizontalSinusoid, MarkKind::kEllipse,
                                           MarkKind::kVerticalSinusoid, MarkKind::kPlain};
  std::vector<MarkSpec> marks;
  for (std::size_t i = 0; i < k; ++i) marks.push_back(MarkSpec::defaults(kCycle[i % 4], height, width));
  return marks;
}

PartitionPlan partition_uniform_marked(const Dataset& ds, std::size_t k, std::vector<MarkSpec> marks,
                                       std::uint64_t seed) {
  const std::size_t n = ds.size();
  if (k == 0) throw std::invalid_argument("partition_uniform_marked: K must be >= 1");
  if (k > n) {
    throw std::invalid_argument("partition_uniform_marked: K=" + std::to_string(k) + " exceeds " +
                                std::to_string(n) + " samples");
  }
  if (marks.empty()) marks = default_client_marks(k, ds.height, ds.width);
  if (marks.size() != k) throw std::invalid_argument("partition_uniform_marked: need one mark per client");
  for (const auto& m : marks) check_mark(m, ds.height, ds.width);

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, "partition-uniform"));
  rng.shuffle(order.begin(), order.end());

  PartitionPlan plan;
  plan.scheme = PartitionScheme::kUniformMarked;
  plan.marks = std::move(marks);
  std::size_t offset = 0;
  for (std::size_t c = 0; c < k; ++c) {
    const std::size_t take = n / k + (c < n % k ? 1 : 0);
    plan.clients.emplace_back(order.begin() + offset, order.begin() + offset + take);
    offset += take;
  }
  return plan;
}

std::vector<double> dirichlet_sample(std::size_t k, double concentration, Rng& rng) {
  if (!(concentration > 0.0)) throw std::invalid_argument("dirichlet: concentration must be > 0");
  std::vector<double> p(k);
  double total = 0.0;
  for (auto& v : p) {
    v = rng.gamma(concentration);
    total += v;
  }
  if (!(total > 0.0)) {
    // Every gamma draw underflowed; the limit is a point mass on one client.
    std::fill(p.begin(), p.end(), 0.0);
    p[rng.below(k)] = 1.0;
    return p;
  }
  for (auto& v : p) v /= total;
  return p;
}

PartitionPlan partition_label_skew(const Dataset& ds, std::size_t k, double concentration,
                                   std::uint64_t seed, std::size_t min_per_client) {
  const std::size_t n = ds.size();
  if (k == 0) throw std::invalid_argument("partition_label_skew: K must be >= 1");
  if (!(concentration > 0.0)) throw std::invalid_argument("partition_label_skew: concentration must be > 0");
  if (k * std::max<std::size_t>(min_per_client, 1) > n) {
    throw std::invalid_argument("partition_label_skew: infeasible, " + std::to_string(k) +
                                " clients need at least " + std::to_string(min_per_client) +
                                " samples each but the dataset has " + std::to_string(n));
  }
  Rng rng(derive_seed(seed, "partition-label-skew"));
  std::vector<std::vector<std::size_t>> by_class(ds.n_classes);
  for (std::size_t i = 0; i < n; ++i) by_class[static_cast<std::size_t>(ds.labels[i])].push_back(i);

  PartitionPlan plan;
  plan.scheme = PartitionScheme::kLabelSkew;
  plan.clients.assign(k, {});
  for (auto& idx : by_class) {
    rng.shuffle(idx.begin(), idx.end());
    const auto frac = dirichlet_sample(k, concentration, rng);
    plan.class_fractions.push_back(frac);
    double cum = 0.0;
    std::size_t start = 0;
    for (std::size_t c = 0; c < k; ++c) {
      cum += frac[c];
      const std::size_t end =
          c + 1 == k ? idx.size()
                     : std::min(idx.size(), static_cast<std::size_t>(std::llround(cum * static_cast<double>(idx.size()))));
      for (std::size_t i = start; i < end; ++i) plan.clients[c].push_back(idx[i]);
      start = std::max(start, end);
    }
  }
  // Top up starved clients from the currently largest one.
  for (std::size_t c = 0; c < k; ++c) {
    while (plan.clients[c].size() < min_per_client) {
      auto donor = std::max_element(plan.clients.begin(), plan.clients.end(),
                                    [](const auto& a, const auto& b) { return a.size() < b.size(); });
      plan.clients[c].push_back(donor->back());
      donor->pop_back();
    }
  }
  for (auto& c : plan.clients) std::sort(c.begin(), c.end());
  return plan;
}

std::vector<Dataset> materialize(const Dataset& ds, const PartitionPlan& plan) {
  std::vector<Dataset> out;
  for (std::size_t c = 0; c < plan.clients.size(); ++c) {
    Dataset part = ds.subset(plan.clients[c]);
    if (!plan.marks.empty()) {
      for (std::size_t i = 0; i < part.size(); ++i) {
        apply_mark(part.image(i), part.height, part.width, plan.marks.at(c));
      }
      part.meta = ds.meta + " mark=" + to_string(plan.marks.at(c).kind);
    }
    out.push_back(std::move(part));
  }
  return out;
}

std::pair<Dataset, Dataset> split_holdout(const Dataset& ds, double holdout_fraction, std::uint64_t seed) {
  if (holdout_fraction < 0.0 || holdout_fraction >= 1.0) {
    throw std::invalid_argument("split_holdout: fraction must lie in [0,1)");
  }
  const std::size_t n = ds.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, "holdout"));
  rng.shuffle(order.begin(), order.end());
  std::size_t held = static_cast<std::size_t>(std::llround(holdout_fraction * static_cast<double>(n)));
  if (holdout_fraction > 0.0 && held == 0 && n >= 3) held = 1;
  if (n >= 2 && n - held < 2) held = n - 2;
  std::vector<std::size_t> train_idx(order.begin(), order.end() - static_cast<std::ptrdiff_t>(held));
  std::vector<std::size_t> held_idx(order.end() - static_cast<std::ptrdiff_t>(held), order.end());
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(held_idx.begin(), held_idx.end());
  return {ds.subset(train_idx), ds.subset(held_idx)};
}

// ---- Toy digits ---------------------------------------------------------------

Dataset make_toy_digits(std::size_t n_per_class, std::size_t n_classes, std::size_t height,
                        std::size_t width, std::uint64_t seed) {
  if (height < 8 || width < 8) throw std::invalid_argument("make_toy_digits: images must be at least 8x8");
  if (n_classes < 2 || n_classes > kDigitSegments.size()) {
    throw std::invalid_argument("make_toy_digits: n_classes must lie in [2,10]");
  }
  Dataset ds;
  ds.height = height;
  ds.width = width;
  ds.n_classes = n_classes;
  ds.meta = "toy-digits";
  ds.pixels.assign(n_per_class * n_classes * height * width, 0.0);
  ds.labels.reserve(n_per_class * n_classes);

  Rng rng(derive_seed(seed, "toy-digits"));
  const double h = static_cast<double>(height);
  const double w = static_cast<double>(width);
  std::size_t idx = 0;
  for (std::size_t i = 0; i < n_per_class; ++i) {
    for (std::size_t cls = 0; cls < n_classes; ++cls, ++idx) {
      ds.labels.push_back(static_cast<int>(cls));
      const double scale = rng.uniform(0.85, 1.1);
      const double gw = 0.45 * w * scale;
      const double gh = 0.65 * h * scale;
      const double ox = (w - 1.0) / 2.0 - gw / 2.0 + rng.uniform(-1.5, 1.5);
      const double oy = (h - 1.0) / 2.0 - gh / 2.0 + rng.uniform(-1.5, 1.5);
      const double slant = rng.uniform(-0.15, 0.15);
      const double stroke = rng.uniform(1.0, 1.8);
      auto to_px = [&](double gx, double gy, double& px, double& py) {
        px = ox + gx * gw + slant * (gy - 0.5) * gh;
        py = oy + gy * gh;
      };
      std::vector<std::array<double, 4>> lit;
      for (std::size_t s = 0; s < kSegments.size(); ++s) {
        if (!(kDigitSegments[cls] >> s & 1u)) continue;
        std::array<double, 4> seg{};
        to_px(kSegments[s].x0, kSegments[s].y0, seg[0], seg[1]);
        to_px(kSegments[s].x1, kSegments[s].y1, seg[2], seg[3]);
        lit.push_back(seg);
      }
      auto img = ds.image(idx);
      for (std::size_t r = 0; r < height; ++r) {
        for (std::size_t c = 0; c < width; ++c) {
          double best = 1e9;
          for (const auto& seg : lit) {
            best = std::min(best, segment_distance(static_cast<double>(c), static_cast<double>(r),
                                                   seg[0], seg[1], seg[2], seg[3]));
          }
          const double ink = std::clamp(stroke / 2.0 + 0.5 - best, 0.0, 1.0);
          const double noise = 0.03 * rng.normal();
          img[r * width + c] = std::clamp(ink + noise, 0.0, 1.0);
        }
      }
    }
  }
  return ds;
}

}  // namespace feddva
