#include <doctest.h>

#include <cmath>

#include "feddva/gaussian.hpp"
#include "feddva/mutation.hpp"

using namespace feddva;
using ad::Tensor;

namespace {

// Scalar closed forms, written out independently of the library.
double kl_1d_standard(double mu, double lv) { return 0.5 * (std::exp(lv) + mu * mu - 1.0 - lv); }

double kl_1d(double mi, double li, double mj, double lj) {
  return 0.5 * (lj - li + (std::exp(li) + (mi - mj) * (mi - mj)) / std::exp(lj) - 1.0);
}

DiagGaussian gauss(std::size_t n, std::size_t d, std::vector<double> mu, std::vector<double> lv) {
  return {Tensor::constant({n, d}, std::move(mu)), Tensor::constant({n, d}, std::move(lv))};
}

}  // namespace

TEST_CASE("KL to N(0,I) of N(0,I) is zero") {
  CHECK(kl_to_standard(gauss(1, 3, {0, 0, 0}, {0, 0, 0})).item() == 0.0);
}

TEST_CASE("KL to N(0,I) sums over dims and averages over rows") {
  const DiagGaussian q = gauss(2, 2, {1.0, -0.5, 0.0, 2.0}, {0.3, -1.0, 0.5, 0.0});
  const double row0 = kl_1d_standard(1.0, 0.3) + kl_1d_standard(-0.5, -1.0);
  const double row1 = kl_1d_standard(0.0, 0.5) + kl_1d_standard(2.0, 0.0);
  CHECK(kl_to_standard(q).item() == doctest::Approx((row0 + row1) / 2).epsilon(1e-14));
}

TEST_CASE("unit shift of the mean costs one half nat") {
  CHECK(kl_to_standard(gauss(1, 1, {1.0}, {0.0})).item() == doctest::Approx(0.5));
}

TEST_CASE("pairwise KL matches the scalar closed form and vanishes on identical inputs") {
  const DiagGaussian a = gauss(1, 2, {0.2, -1.0}, {0.1, -0.4});
  const DiagGaussian b = gauss(1, 2, {1.0, 0.5}, {-0.3, 0.7});
  const double expect = kl_1d(0.2, 0.1, 1.0, -0.3) + kl_1d(-1.0, -0.4, 0.5, 0.7);
  CHECK(kl_pairwise(a, b).item() == doctest::Approx(expect).epsilon(1e-14));
  CHECK(kl_pairwise(a, a).item() == doctest::Approx(0.0));
  CHECK(kl_pairwise_value(std::vector<double>{0.2, -1.0}, std::vector<double>{0.1, -0.4},
                          std::vector<double>{1.0, 0.5}, std::vector<double>{-0.3, 0.7}) ==
        doctest::Approx(expect).epsilon(1e-14));
}

TEST_CASE("pairwise KL rejects multi-row inputs") {
  const DiagGaussian two = gauss(2, 1, {0, 1}, {0, 0});
  CHECK_THROWS_AS(kl_pairwise(two, two), std::invalid_argument);
}

TEST_CASE("batch mixture bound of a two-row batch is half the pairwise KL") {
  const DiagGaussian q = gauss(2, 2, {0.0, 1.0, 2.0, -1.0}, {0.0, 0.5, -0.5, 0.2});
  const double k01 = kl_pairwise(q.row(0), q.row(1)).item();
  const double k10 = kl_pairwise(q.row(1), q.row(0)).item();
  const Tensor rows = kl_to_batch_mixture_rows(q);
  CHECK(rows.data()[0] == doctest::Approx(k01 / 2).epsilon(1e-14));
  CHECK(rows.data()[1] == doctest::Approx(k10 / 2).epsilon(1e-14));
  CHECK(kl_to_batch_mixture(q.row(1), q).item() == doctest::Approx(k10 / 2).epsilon(1e-14));
}

TEST_CASE("batch mixture bound is zero when every row is the same posterior") {
  const DiagGaussian q = gauss(3, 2, {1, 2, 1, 2, 1, 2}, {0.5, -0.5, 0.5, -0.5, 0.5, -0.5});
  for (double v : kl_to_batch_mixture_rows(q).data()) CHECK(v == doctest::Approx(0.0));
}

TEST_CASE("fused and composed mixture bounds give the same gradient") {
  Tensor mu = Tensor::parameter({3, 2}, {0.1, 0.2, -0.3, 0.4, 0.5, -0.6});
  Tensor lv = Tensor::parameter({3, 2}, {0.0, -0.2, 0.3, 0.1, -0.4, 0.2});
  const DiagGaussian q(mu, lv);
  ad::backward(ad::sum(kl_to_batch_mixture_rows(q)));
  const std::vector<double> g_fused(mu.grad().begin(), mu.grad().end());
  mu.zero_grad();
  lv.zero_grad();
  Tensor total = kl_to_batch_mixture(q.row(0), q);
  for (std::size_t i = 1; i < 3; ++i) total = ad::add(total, kl_to_batch_mixture(q.row(i), q));
  ad::backward(total);
  for (std::size_t i = 0; i < g_fused.size(); ++i) CHECK(mu.grad()[i] == doctest::Approx(g_fused[i]).epsilon(1e-12));
}

TEST_CASE("reparameterize_with computes mu + sigma * eps") {
  const DiagGaussian q = gauss(1, 2, {1.0, -1.0}, {std::log(4.0), 0.0});
  const Tensor z = reparameterize_with(q, {0.5, -2.0});
  CHECK(z.data()[0] == doctest::Approx(2.0));
  CHECK(z.data()[1] == doctest::Approx(-3.0));
}

TEST_CASE("reparameterize draws have the posterior moments") {
  const DiagGaussian q = gauss(1, 1, {0.7}, {std::log(0.25)});
  Rng rng(5);
  double s = 0, s2 = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const double v = reparameterize(q, rng).item();
    s += v;
    s2 += v * v;
  }
  const double m = s / n;
  CHECK(m == doctest::Approx(0.7).epsilon(0.01));
  CHECK(s2 / n - m * m == doctest::Approx(0.25).epsilon(0.02));
}

TEST_CASE("log density of a standard normal at the origin") {
  const std::vector<double> x{0, 0}, mu{0, 0}, lv{0, 0};
  CHECK(diag_log_density(x, mu, lv) == doctest::Approx(-std::log(2 * M_PI)));
}

TEST_CASE("the kl mutation changes the closed form") {
  const DiagGaussian q = gauss(1, 1, {0.0}, {1.0});
  const double clean = kl_to_standard(q).item();
  mutation::set("kl");
  const double broken = kl_to_standard(q).item();
  mutation::set("");
  CHECK(clean != doctest::Approx(broken));
}

TEST_CASE("latent config validation") {
  LatentConfig c;
  c.d_c = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = {};
  c.xi = -1;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}
