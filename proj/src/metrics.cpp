#include "feddva/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "feddva/objective.hpp"

namespace feddva {

namespace {

constexpr std::size_t kEvalChunk = 256;
constexpr std::uint8_t kSeparator = 128;

std::vector<double> centroid(std::span<const double> pts, std::size_t dim) {
  const std::size_t n = pts.size() / dim;
  std::vector<double> c(dim, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t d = 0; d < dim; ++d) c[d] += pts[i * dim + d];
  }
  for (auto& v : c) v /= static_cast<double>(n);
  return c;
}

double distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

void require_finite(const DvaModel& model) {
  for (const auto& v : {model.flatten_shared(), model.flatten_local()}) {
    if (std::any_of(v.begin(), v.end(), [](double x) { return !std::isfinite(x); })) {
      throw std::runtime_error("model has non-finite parameters");
    }
  }
}

int argmax_row(std::span<const double> row) {
  return static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
}

template <typename LogitsFn>
std::vector<int> predict_chunks(const Dataset& ds, LogitsFn&& logits_of) {
  std::vector<int> out;
  out.reserve(ds.size());
  for (std::size_t s = 0; s < ds.size(); s += kEvalChunk) {
    const std::size_t e = std::min(ds.size(), s + kEvalChunk);
    const ad::Tensor logits = logits_of(batch_tensor(ds, s, e));
    const std::size_t k = logits.cols();
    for (std::size_t i = 0; i < e - s; ++i) out.push_back(argmax_row(logits.data().subspan(i * k, k)));
  }
  return out;
}

double shard_accuracy(const std::vector<int>& pred, const Dataset& ds) {
  if (ds.size() == 0) throw std::invalid_argument("accuracy_per_client: empty split");
  return accuracy(pred, ds.labels);
}

}  // namespace

const Dataset& split_of(const ClientShard& shard, Split split) {
  return split == Split::kTrain ? shard.train : shard.heldout;
}

ad::Tensor batch_tensor(const Dataset& ds, std::size_t begin, std::size_t end) {
  if (begin >= end || end > ds.size()) throw std::out_of_range("batch_tensor: bad range");
  const std::size_t p = ds.pixels_per_image();
  return ad::Tensor::constant({end - begin, p}, std::vector<double>(ds.pixels.begin() + begin * p,
                                                                    ds.pixels.begin() + end * p));
}

std::vector<int> predict(const DvaModel& model, const Dataset& ds) {
  if (!model.params().head) throw std::logic_error("predict: model has no classification head");
  return predict_chunks(ds, [&](const ad::Tensor& x) {
    const PosteriorMeans m = posterior_means(model, x);
    return model.classify(m.z, m.c);
  });
}

std::vector<int> predict(const MlpClassifier& model, const Dataset& ds) {
  return predict_chunks(ds, [&](const ad::Tensor& x) { return model.logits(x); });
}

double accuracy(std::span<const int> predicted, std::span<const int> labels) {
  if (predicted.size() != labels.size()) throw std::invalid_argument("accuracy: length mismatch");
  if (labels.empty()) throw std::invalid_argument("accuracy: empty split");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += predicted[i] == labels[i] ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

AccuracySummary summarize_accuracy(std::vector<double> per_client) {
  if (per_client.empty()) throw std::invalid_argument("summarize_accuracy: no clients");
  AccuracySummary s;
  const double n = static_cast<double>(per_client.size());
  for (double a : per_client) s.mean += a;
  s.mean /= n;
  double var = 0.0;
  for (double a : per_client) var += (a - s.mean) * (a - s.mean);
  s.stddev = std::sqrt(var / n);
  s.per_client = std::move(per_client);
  return s;
}

AccuracySummary accuracy_per_client(const std::vector<ClientShard>& shards, Split split) {
  std::vector<double> acc;
  for (const auto& shard : shards) {
    if (!shard.model) throw std::logic_error("accuracy_per_client: shard has no model");
    const Dataset& ds = split_of(shard, split);
    acc.push_back(shard_accuracy(ds.size() ? predict(*shard.model, ds) : std::vector<int>{}, ds));
  }
  return summarize_accuracy(std::move(acc));
}

AccuracySummary accuracy_per_client(const MlpClassifier& model, const std::vector<ClientShard>& shards,
                                    Split split) {
  std::vector<double> acc;
  for (const auto& shard : shards) {
    const Dataset& ds = split_of(shard, split);
    acc.push_back(shard_accuracy(ds.size() ? predict(model, ds) : std::vector<int>{}, ds));
  }
  return summarize_accuracy(std::move(acc));
}

AccuracySummary accuracy_per_client(const std::vector<MlpClassifier>& models,
                                    const std::vector<ClientShard>& shards, Split split) {
  if (models.size() != shards.size()) throw std::invalid_argument("accuracy_per_client: one model per client");
  std::vector<double> acc;
  for (std::size_t k = 0; k < shards.size(); ++k) {
    const Dataset& ds = split_of(shards[k], split);
    acc.push_back(shard_accuracy(ds.size() ? predict(models[k], ds) : std::vector<int>{}, ds));
  }
  return summarize_accuracy(std::move(acc));
}

ClientEmbedding embed(const DvaModel& model, const Dataset& ds, std::size_t client, std::size_t max_samples) {
  if (model.arch().variant != ModelVariant::kDual) throw std::logic_error("embed: needs the dual variant");
  ClientEmbedding e;
  e.client = client;
  e.n = max_samples ? std::min(max_samples, ds.size()) : ds.size();
  e.d_z = model.arch().d_z;
  e.d_c = model.arch().d_c;
  for (std::size_t s = 0; s < e.n; s += kEvalChunk) {
    const std::size_t end = std::min(e.n, s + kEvalChunk);
    const ad::Tensor x = batch_tensor(ds, s, end);
    const DiagGaussian qz = model.encode_z(x);
    const DiagGaussian qc = model.encode_c(x, qz.mu);
    e.z_mu.insert(e.z_mu.end(), qz.mu.data().begin(), qz.mu.data().end());
    e.c_mu.insert(e.c_mu.end(), qc.mu.data().begin(), qc.mu.data().end());
    e.c_log_var.insert(e.c_log_var.end(), qc.log_var.data().begin(), qc.log_var.data().end());
  }
  return e;
}

double separation_ratio(const std::vector<std::vector<double>>& points, std::size_t dim) {
  if (points.size() < 2) throw std::invalid_argument("separation_ratio: needs at least 2 clients");
  if (dim == 0) throw std::invalid_argument("separation_ratio: zero dimension");
  std::vector<std::vector<double>> centroids;
  double within = 0.0;
  for (const auto& p : points) {
    if (p.empty() || p.size() % dim != 0) throw std::invalid_argument("separation_ratio: bad point block");
    centroids.push_back(centroid(p, dim));
    const std::size_t n = p.size() / dim;
    double w = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      w += distance(std::span<const double>(p).subspan(i * dim, dim), centroids.back());
    }
    within += w / static_cast<double>(n);
  }
  within /= static_cast<double>(points.size());
  double inter = 0.0;
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < centroids.size(); ++a) {
    for (std::size_t b = a + 1; b < centroids.size(); ++b, ++pairs) inter += distance(centroids[a], centroids[b]);
  }
  inter /= static_cast<double>(pairs);
  if (inter == 0.0) return 0.0;
  if (within == 0.0) return std::numeric_limits<double>::infinity();
  return inter / within;
}

McEstimate mixture_kl_to_standard(std::span<const double> mu, std::span<const double> log_var,
                                  std::size_t dim, std::size_t samples, std::uint64_t seed) {
  if (dim == 0 || mu.empty() || mu.size() % dim != 0 || mu.size() != log_var.size()) {
    throw std::invalid_argument("mixture_kl_to_standard: bad posterior block");
  }
  if (samples < 2) throw std::invalid_argument("mixture_kl_to_standard: needs at least 2 samples");
  const std::size_t n = mu.size() / dim;
  const std::vector<double> zero(dim, 0.0);
  Rng rng(seed);
  std::vector<double> x(dim), logs(n);
  double sum = 0.0, sum2 = 0.0;
  for (std::size_t s = 0; s < samples; ++s) {
    const std::size_t i = rng.below(n);
    for (std::size_t d = 0; d < dim; ++d) {
      x[d] = mu[i * dim + d] + std::exp(0.5 * log_var[i * dim + d]) * rng.normal();
    }
    double top = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      logs[j] = diag_log_density(x, mu.subspan(j * dim, dim), log_var.subspan(j * dim, dim));
      top = std::max(top, logs[j]);
    }
    double acc = 0.0;
    for (double l : logs) acc += std::exp(l - top);
    const double log_mix = top + std::log(acc) - std::log(static_cast<double>(n));
    const double v = log_mix - diag_log_density(x, zero, zero);
    sum += v;
    sum2 += v * v;
  }
  const double m = sum / static_cast<double>(samples);
  const double var = std::max(0.0, (sum2 - sum * m) / static_cast<double>(samples - 1));
  return {m, std::sqrt(var / static_cast<double>(samples))};
}

nlohmann::json to_json(const DisentanglementReport& r) {
  auto num = [](double v) -> nlohmann::json {
    if (std::isinf(v)) return "inf";
    return v;
  };
  return {{"separation_ratio_c", num(r.separation_ratio_c)},
          {"separation_ratio_z", num(r.separation_ratio_z)},
          {"constraint_estimate_per_client", r.constraint_estimate},
          {"constraint_std_error_per_client", r.constraint_std_error},
          {"xi_per_client", r.xi},
          {"fraction_constraint_met", r.fraction_constraint_met}};
}

DisentanglementReport clustering_report(const std::vector<ClientShard>& shards, Split split,
                                        const ClusteringOptions& opts) {
  if (shards.size() < 2) throw std::invalid_argument("clustering_report: needs at least 2 clients");
  DisentanglementReport rep;
  std::vector<std::vector<double>> zs, cs;
  std::size_t d_z = 0, d_c = 0, met = 0;
  for (const auto& shard : shards) {
    if (!shard.model) throw std::logic_error("clustering_report: shard has no model");
    require_finite(*shard.model);
    const Dataset& ds = split_of(shard, split);
    if (ds.size() < 2) throw std::invalid_argument("clustering_report: every client needs >= 2 samples");
    ClientEmbedding e = embed(*shard.model, ds, shard.id, opts.max_per_client);
    d_z = e.d_z;
    d_c = e.d_c;
    const McEstimate kl = mixture_kl_to_standard(e.c_mu, e.c_log_var, e.d_c, opts.mc_samples,
                                                 derive_seed(opts.seed, "constraint-mc", shard.id));
    rep.constraint_estimate.push_back(kl.value);
    rep.constraint_std_error.push_back(kl.std_error);
    rep.xi.push_back(shard.xi);
    met += kl.value >= shard.xi ? 1 : 0;
    zs.push_back(std::move(e.z_mu));
    cs.push_back(std::move(e.c_mu));
  }
  rep.separation_ratio_z = separation_ratio(zs, d_z);
  rep.separation_ratio_c = separation_ratio(cs, d_c);
  rep.fraction_constraint_met = static_cast<double>(met) / static_cast<double>(shards.size());
  return rep;
}

std::pair<std::vector<double>, double> principal_axis(std::span<const double> points, std::size_t dim) {
  if (dim == 0 || points.empty() || points.size() % dim != 0) {
    throw std::invalid_argument("principal_axis: bad point block");
  }
  const std::size_t n = points.size() / dim;
  const auto c = centroid(points, dim);
  std::vector<double> cov(dim * dim, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t a = 0; a < dim; ++a) {
      const double da = points[i * dim + a] - c[a];
      for (std::size_t b = 0; b < dim; ++b) cov[a * dim + b] += da * (points[i * dim + b] - c[b]);
    }
  }
  for (auto& v : cov) v /= static_cast<double>(n);

  // Start from the covariance column with the largest diagonal entry, which
  // cannot be orthogonal to the top eigenvector unless the matrix is zero.
  std::size_t start = 0;
  for (std::size_t a = 1; a < dim; ++a) {
    if (cov[a * dim + a] > cov[start * dim + start]) start = a;
  }
  std::vector<double> v(dim, 0.0);
  if (cov[start * dim + start] <= 0.0) {
    v[0] = 1.0;
    return {v, 0.0};
  }
  for (std::size_t a = 0; a < dim; ++a) v[a] = cov[a * dim + start];
  std::vector<double> next(dim);
  for (int it = 0; it < 500; ++it) {
    double norm = 0.0;
    for (std::size_t a = 0; a < dim; ++a) {
      next[a] = 0.0;
      for (std::size_t b = 0; b < dim; ++b) next[a] += cov[a * dim + b] * v[b];
      norm += next[a] * next[a];
    }
    norm = std::sqrt(norm);
    for (std::size_t a = 0; a < dim; ++a) v[a] = next[a] / norm;
  }
  const auto big = std::max_element(v.begin(), v.end(), [](double a, double b) { return std::abs(a) < std::abs(b); });
  if (*big < 0.0) {
    for (auto& x : v) x = -x;
  }
  double var = 0.0;
  for (std::size_t a = 0; a < dim; ++a) {
    for (std::size_t b = 0; b < dim; ++b) var += v[a] * cov[a * dim + b] * v[b];
  }
  return {v, std::sqrt(std::max(0.0, var))};
}

std::span<const double> TraversalGrid::cell(std::size_t r, std::size_t c) const {
  const std::size_t p = height * width;
  return std::span<const double>(pixels).subspan((r * steps + c) * p, p);
}

TraversalGrid latent_traversal(const DvaModel& model, const Dataset& ds, std::size_t anchor,
                               const TraversalOptions& opts) {
  if (model.arch().variant != ModelVariant::kDual) throw std::logic_error("latent_traversal: needs the dual variant");
  if (anchor >= ds.size()) throw std::out_of_range("latent_traversal: anchor outside the dataset");
  if (opts.steps == 0) throw std::invalid_argument("latent_traversal: steps must be >= 1");
  if (!(opts.span >= 0.0) || !std::isfinite(opts.span)) throw std::invalid_argument("latent_traversal: bad span");
  require_finite(model);

  const ClientEmbedding e = embed(model, ds, 0, 512);
  auto axis_for = [&](const std::vector<double>& pts, std::size_t dim) -> std::pair<std::vector<double>, double> {
    if (!opts.raw_axis) return principal_axis(pts, dim);
    if (opts.axis >= dim) throw std::out_of_range("latent_traversal: raw axis out of range");
    std::vector<double> a(dim, 0.0);
    a[opts.axis] = 1.0;
    const auto c = centroid(pts, dim);
    double var = 0.0;
    const std::size_t n = pts.size() / dim;
    for (std::size_t i = 0; i < n; ++i) var += std::pow(pts[i * dim + opts.axis] - c[opts.axis], 2);
    return {a, std::sqrt(var / static_cast<double>(n))};
  };
  const auto [az, sz] = axis_for(e.z_mu, e.d_z);
  const auto [ac, sc] = axis_for(e.c_mu, e.d_c);

  const ad::Tensor x = batch_tensor(ds, anchor, anchor + 1);
  const PosteriorMeans m = posterior_means(model, x);
  const std::vector<double> z0(m.z.data().begin(), m.z.data().end());
  const std::vector<double> c0(m.c.data().begin(), m.c.data().end());

  const std::size_t s = opts.steps;
  auto offset = [&](std::size_t i) {
    if (s == 1) return 0.0;
    return opts.span * (2.0 * static_cast<double>(i) / static_cast<double>(s - 1) - 1.0);
  };
  std::vector<double> zs, cs;
  for (std::size_t r = 0; r < s; ++r) {
    for (std::size_t c = 0; c < s; ++c) {
      for (std::size_t d = 0; d < e.d_z; ++d) zs.push_back(z0[d] + offset(r) * sz * az[d]);
      for (std::size_t d = 0; d < e.d_c; ++d) cs.push_back(c0[d] + offset(c) * sc * ac[d]);
    }
  }
  const ad::Tensor img = model.decode(ad::Tensor::constant({s * s, e.d_z}, zs),
                                      ad::Tensor::constant({s * s, e.d_c}, cs));
  TraversalGrid grid;
  grid.steps = s;
  grid.height = ds.height;
  grid.width = ds.width;
  grid.anchor = anchor;
  grid.pixels.assign(img.data().begin(), img.data().end());
  return grid;
}

std::uint8_t quantize(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

GrayImage tile_grid(const TraversalGrid& grid) {
  GrayImage img;
  img.width = grid.steps * grid.width + (grid.steps - 1);
  img.height = grid.steps * grid.height + (grid.steps - 1);
  img.pixels.assign(img.width * img.height, kSeparator);
  for (std::size_t r = 0; r < grid.steps; ++r) {
    for (std::size_t c = 0; c < grid.steps; ++c) {
      const auto cell = grid.cell(r, c);
      for (std::size_t y = 0; y < grid.height; ++y) {
        for (std::size_t x = 0; x < grid.width; ++x) {
          const std::size_t py = r * (grid.height + 1) + y;
          const std::size_t px = c * (grid.width + 1) + x;
          img.pixels[py * img.width + px] = quantize(cell[y * grid.width + x]);
        }
      }
    }
  }
  return img;
}

void write_pgm(const std::filesystem::path& path, const GrayImage& image) {
  if (image.pixels.size() != image.width * image.height) throw std::invalid_argument("write_pgm: size mismatch");
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("write_pgm: cannot write " + path.string());
  os << "P5\n" << image.width << ' ' << image.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
  if (!os) throw std::runtime_error("write_pgm: write failed for " + path.string());
}

GrayImage read_pgm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("read_pgm: cannot open " + path.string());
  auto token = [&]() {
    std::string t;
    while (is) {
      const int ch = is.peek();
      if (ch == '#') {
        std::string skip;
        std::getline(is, skip);
      } else if (std::isspace(ch)) {
        is.get();
      } else {
        break;
      }
    }
    is >> t;
    return t;
  };
  if (token() != "P5") throw std::runtime_error("read_pgm: not a P5 file");
  GrayImage img;
  img.width = std::stoul(token());
  img.height = std::stoul(token());
  if (token() != "255") throw std::runtime_error("read_pgm: only maxval 255 is supported");
  is.get();
  img.pixels.resize(img.width * img.height);
  is.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (is.gcount() != static_cast<std::streamsize>(img.pixels.size())) {
    throw std::runtime_error("read_pgm: truncated pixel data");
  }
  return img;
}

void export_grid_image(const TraversalGrid& grid, const std::filesystem::path& path) {
  write_pgm(path, tile_grid(grid));
}

void write_embeddings_csv(const std::filesystem::path& path, const std::vector<ClientEmbedding>& rows) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("write_embeddings_csv: cannot write " + path.string());
  const std::size_t d_z = rows.empty() ? 0 : rows.front().d_z;
  const std::size_t d_c = rows.empty() ? 0 : rows.front().d_c;
  os << "client_id,sample_id";
  for (std::size_t d = 0; d < d_z; ++d) os << ",z_" << d;
  for (std::size_t d = 0; d < d_c; ++d) os << ",c_" << d;
  os << '\n';
  os.precision(17);
  for (const auto& e : rows) {
    for (std::size_t i = 0; i < e.n; ++i) {
      os << e.client << ',' << i;
      for (std::size_t d = 0; d < e.d_z; ++d) os << ',' << e.z_mu[i * e.d_z + d];
      for (std::size_t d = 0; d < e.d_c; ++d) os << ',' << e.c_mu[i * e.d_c + d];
      os << '\n';
    }
  }
}

}  // namespace feddva
