#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <sstream>

#include <unistd.h>

#include "feddva/cli.hpp"
#include "feddva/gaussian.hpp"
#include "feddva/gradcheck.hpp"
#include "feddva/metrics.hpp"
#include "feddva/mutation.hpp"
#include "feddva/objective.hpp"

namespace feddva {

namespace {

namespace fs = std::filesystem;
using ad::Tensor;

struct Suite {
  std::ostream& out;
  int failures = 0;

  void run(const std::string& name, const std::function<std::string()>& body) {
    std::string why;
    try {
      why = body();
    } catch (const std::exception& e) {
      why = std::string("threw: ") + e.what();
    }
    out << (why.empty() ? "PASS " : "FAIL ") << name;
    if (!why.empty()) out << ": " << why;
    out << "\n";
    failures += why.empty() ? 0 : 1;
  }
};

std::vector<double> random_values(std::size_t n, Rng& rng, double lo, double hi) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

// Values kept away from relu/max kinks.
std::vector<double> away_from_zero(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (auto& x : v) x = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.1, 1.5);
  return v;
}

std::string gradcheck_ops(Rng& rng) {
  using Op = std::function<Tensor(const std::vector<Tensor>&)>;
  struct Case {
    const char* name;
    std::vector<ad::Shape> shapes;
    bool positive;
    Op op;
  };
  const std::vector<int> labels{0, 2};
  const std::vector<double> targets{0.2, 0.9, 0.5, 0.0, 1.0, 0.3};
  const std::vector<Case> cases{
      {"matmul", {{2, 3}, {3, 2}}, false, [](auto& t) { return ad::matmul(t[0], t[1]); }},
      {"add", {{2, 3}, {2, 3}}, false, [](auto& t) { return ad::add(t[0], t[1]); }},
      {"sub", {{2, 3}, {3}}, false, [](auto& t) { return ad::sub(t[0], t[1]); }},
      {"mul", {{2, 3}, {2, 3}}, false, [](auto& t) { return ad::mul(t[0], t[1]); }},
      {"add_row", {{2, 3}, {3}}, false, [](auto& t) { return ad::add_row(t[0], t[1]); }},
      {"relu", {{2, 3}}, false, [](auto& t) { return ad::relu(t[0]); }},
      {"tanh", {{2, 3}}, false, [](auto& t) { return ad::tanh(t[0]); }},
      {"sigmoid", {{2, 3}}, false, [](auto& t) { return ad::sigmoid(t[0]); }},
      {"exp", {{2, 3}}, false, [](auto& t) { return ad::exp(t[0]); }},
      {"log", {{2, 3}}, true, [](auto& t) { return ad::log(t[0]); }},
      {"square", {{2, 3}}, false, [](auto& t) { return ad::square(t[0]); }},
      {"sum", {{2, 3}}, false, [](auto& t) { return ad::sum(t[0]); }},
      {"mean", {{2, 3}}, false, [](auto& t) { return ad::mean(t[0]); }},
      {"concat", {{2, 3}, {2, 2}}, false, [](auto& t) { return ad::concat_last(t[0], t[1]); }},
      {"slice", {{2, 4}}, false, [](auto& t) { return ad::slice_last(t[0], 1, 3); }},
      {"sum_rows", {{2, 3}}, false, [](auto& t) { return ad::sum_rows(t[0]); }},
      {"maximum", {{2, 3}, {2, 3}}, false, [](auto& t) { return ad::maximum(t[0], t[1]); }},
      {"bce", {{2, 3}}, false, [&](auto& t) { return ad::bce_with_logits(t[0], targets); }},
      {"cross_entropy", {{2, 3}}, false, [&](auto& t) { return ad::softmax_cross_entropy(t[0], labels); }},
  };
  for (const auto& c : cases) {
    std::vector<Tensor> leaves;
    for (const auto& s : c.shapes) {
      const std::size_t n = ad::shape_numel(s);
      leaves.push_back(Tensor::parameter(s, c.positive ? random_values(n, rng, 0.5, 2.0) : away_from_zero(n, rng)));
    }
    const Tensor probe = c.op(leaves);
    const Tensor weights = Tensor::constant(probe.shape(), random_values(probe.size(), rng, -1.0, 1.0));
    const auto r = check_gradients([&] { return ad::sum(ad::mul(c.op(leaves), weights)); }, leaves);
    if (r.max_rel_error >= 1e-4) return std::string(c.name) + " " + r.worst;
  }
  return "";
}

std::string gradcheck_loss() {
  ArchitectureConfig arch;
  arch.input_dim = 4;
  arch.hidden_dims = {3};
  arch.d_z = 2;
  arch.d_c = 2;
  arch.activation = Activation::kTanh;
  DvaModel model(arch, 7);
  Rng data_rng(11);
  const Tensor x = Tensor::constant({3, 4}, random_values(12, data_rng, 0.0, 1.0));
  ObjectiveWeights w;
  auto params = model.shared_params();
  for (auto& p : model.local_params()) params.push_back(p);
  const auto r = check_gradients(
      [&] {
        Rng rng(3);
        return loss_feddva(x, model, 0.5, w, rng).total;
      },
      params);
  return r.max_rel_error < 1e-4 ? "" : r.worst;
}

// E_q[log q - log p] by sampling from q.
McEstimate mc_kl(std::span<const double> mu_q, std::span<const double> lv_q, std::span<const double> mu_p,
                 std::span<const double> lv_p, std::size_t samples, Rng& rng) {
  const std::size_t d = mu_q.size();
  std::vector<double> x(d);
  double s = 0.0, s2 = 0.0;
  for (std::size_t i = 0; i < samples; ++i) {
    for (std::size_t k = 0; k < d; ++k) x[k] = mu_q[k] + std::exp(0.5 * lv_q[k]) * rng.normal();
    const double v = diag_log_density(x, mu_q, lv_q) - diag_log_density(x, mu_p, lv_p);
    s += v;
    s2 += v * v;
  }
  const double n = static_cast<double>(samples);
  const double m = s / n;
  return {m, std::sqrt(std::max(0.0, (s2 - s * m) / (n - 1)) / n)};
}

std::string kl_standard_mc(Rng& rng) {
  for (int t = 0; t < 5; ++t) {
    const auto mu = random_values(3, rng, -1.5, 1.5);
    const auto lv = random_values(3, rng, -1.5, 1.0);
    const double closed = kl_to_standard(DiagGaussian(Tensor::constant({1, 3}, mu), Tensor::constant({1, 3}, lv))).item();
    const std::vector<double> zero(3, 0.0);
    const McEstimate mc = mc_kl(mu, lv, zero, zero, 200000, rng);
    if (std::abs(closed - mc.value) > 3.0 * mc.std_error) {
      std::ostringstream os;
      os << "closed form " << closed << " vs MC " << mc.value << " +- " << mc.std_error;
      return os.str();
    }
  }
  return "";
}

std::string kl_pairwise_mc(Rng& rng) {
  for (int t = 0; t < 5; ++t) {
    const auto mi = random_values(3, rng, -1.0, 1.0), li = random_values(3, rng, -1.0, 0.5);
    const auto mj = random_values(3, rng, -1.0, 1.0), lj = random_values(3, rng, -1.0, 0.5);
    const double closed = kl_pairwise(DiagGaussian(Tensor::constant({1, 3}, mi), Tensor::constant({1, 3}, li)),
                                      DiagGaussian(Tensor::constant({1, 3}, mj), Tensor::constant({1, 3}, lj)))
                              .item();
    const McEstimate mc = mc_kl(mi, li, mj, lj, 200000, rng);
    if (std::abs(closed - mc.value) > 3.0 * mc.std_error) {
      std::ostringstream os;
      os << "closed form " << closed << " vs MC " << mc.value << " +- " << mc.std_error;
      return os.str();
    }
  }
  return "";
}

std::string mixture_bound(Rng& rng) {
  const std::size_t n = 4, d = 2;
  for (int t = 0; t < 3; ++t) {
    const auto mu = random_values(n * d, rng, -2.0, 2.0);
    const auto lv = random_values(n * d, rng, -1.0, 0.5);
    const DiagGaussian q(Tensor::constant({n, d}, mu), Tensor::constant({n, d}, lv));
    const Tensor rows = kl_to_batch_mixture_rows(q);
    for (std::size_t i = 0; i < n; ++i) {
      const double composed = kl_to_batch_mixture(q.row(i), q).item();
      if (std::abs(composed - rows.data()[i]) > 1e-10 * std::max(1.0, std::abs(composed))) {
        return "fused and composed bounds differ";
      }
      // MC of KL(q_i || uniform mixture of the batch).
      const std::span<const double> mi(mu.data() + i * d, d), li(lv.data() + i * d, d);
      std::vector<double> x(d);
      double s = 0.0, s2 = 0.0;
      const std::size_t samples = 50000;
      for (std::size_t k = 0; k < samples; ++k) {
        for (std::size_t j = 0; j < d; ++j) x[j] = mi[j] + std::exp(0.5 * li[j]) * rng.normal();
        double mix = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          mix += std::exp(diag_log_density(x, std::span<const double>(mu).subspan(j * d, d),
                                           std::span<const double>(lv).subspan(j * d, d)));
        }
        const double v = diag_log_density(x, mi, li) - std::log(mix / static_cast<double>(n));
        s += v;
        s2 += v * v;
      }
      const double m = s / samples;
      const double se = std::sqrt(std::max(0.0, (s2 - s * m) / (samples - 1)) / samples);
      if (rows.data()[i] < m - 3.0 * se) return "bound below the Monte Carlo mixture KL";
    }
  }
  return "";
}

std::string hinge_cases(Rng& rng) {
  for (int t = 0; t < 1000; ++t) {
    const double xi = rng.uniform(0.0, 5.0), mix = rng.uniform(0.0, 5.0), qc = rng.uniform(0.0, 10.0);
    const double r = hinge_regularizer(Tensor::scalar(mix), Tensor::scalar(qc), xi).item();
    if (r != std::max(xi + mix, qc)) return "hinge value is not the larger branch";
    const double r2 = hinge_regularizer(Tensor::scalar(mix), Tensor::scalar(qc), xi + 0.5).item();
    if (r2 < r) return "hinge decreased when xi grew";
  }
  return "";
}

std::string aggregation_algebra() {
  const auto two = aggregate({{0, {0.0}}, {1, {4.0}}}, {{0, 0.25}, {1, 0.75}});
  if (two[0] != 3.0) return "w=(0.25,0.75) over [0],[4] gave " + std::to_string(two[0]);
  const auto partial = aggregate({{0, {0.0}}, {1, {4.0}}}, {{0, 0.1}, {1, 0.3}});
  if (std::abs(partial[0] - 3.0) > 1e-12) return "sampled weights were not renormalized";
  const std::vector<double> v{1.5, -2.0, 0.25};
  if (aggregate({{2, v}, {5, v}, {7, v}}, {{2, 0.2}, {5, 0.3}, {7, 0.1}}) != v) return "identical updates moved";
  return "";
}

std::string format_round_trips() {
  const fs::path dir = fs::temp_directory_path() / ("feddva-selftest-" + std::to_string(::getpid()));
  fs::create_directories(dir);
  struct Cleanup {
    fs::path p;
    ~Cleanup() { std::error_code ec; fs::remove_all(p, ec); }
  } cleanup{dir};

  IdxArray idx;
  idx.dims = {2, 3, 2};
  for (std::uint8_t i = 0; i < 12; ++i) idx.data.push_back(static_cast<std::uint8_t>(i * 21));
  write_idx(dir / "a.idx", idx);
  const IdxArray back = parse_idx(dir / "a.idx");
  if (back.dims != idx.dims || back.data != idx.data) return "IDX round trip changed data";

  ArchitectureConfig small;
  small.input_dim = 16;
  small.hidden_dims = {8};
  DvaModel model(small, 5);
  Checkpoint c{model.arch().canonical_text(), model.flatten_shared()};
  write_checkpoint(dir / "m.ckpt", c);
  const Checkpoint c2 = read_checkpoint(dir / "m.ckpt");
  if (c2.header != c.header || c2.values != c.values) return "checkpoint round trip changed data";

  ExperimentConfig cfg;
  cfg.d_c = 8;
  cfg.lr_eta = 0.1 + 0.2;
  if (parse_config(format_config(cfg)) != cfg) return "config round trip changed values";

  TraversalGrid grid{2, 3, 3, 0, {}};
  for (int i = 0; i < 36; ++i) grid.pixels.push_back(i / 35.0);
  export_grid_image(grid, dir / "g.pgm");
  const GrayImage img = read_pgm(dir / "g.pgm");
  if (img.width != 7 || img.height != 7 || img.pixels != tile_grid(grid).pixels) return "PGM round trip changed data";
  return "";
}

}  // namespace

int cmd_selftest(std::ostream& out) {
  if (const char* m = std::getenv("FEDDVA_SELFTEST_MUTATE"); m && *m) {
    mutation::set(m);
    out << "mutation active: " << m << "\n";
  }
  Suite suite{out};
  Rng rng(20240601);
  suite.run("autodiff: op gradients match central differences", [&] { return gradcheck_ops(rng); });
  suite.run("autodiff: FedDVA loss gradient matches central differences", gradcheck_loss);
  suite.run("gaussian: KL to N(0,I) matches Monte Carlo", [&] { return kl_standard_mc(rng); });
  suite.run("gaussian: pairwise KL matches Monte Carlo", [&] { return kl_pairwise_mc(rng); });
  suite.run("gaussian: batch-mixture bound dominates Monte Carlo", [&] { return mixture_bound(rng); });
  suite.run("objective: hinge takes the larger branch and grows with xi", [&] { return hinge_cases(rng); });
  suite.run("federation: aggregation algebra", aggregation_algebra);
  suite.run("formats: IDX, checkpoint, config and PGM round trips", format_round_trips);
  out << (suite.failures ? "selftest FAILED (" + std::to_string(suite.failures) + ")" : std::string("selftest passed"))
      << "\n";
  mutation::set("");
  return suite.failures ? 1 : 0;
}

}  // namespace feddva
