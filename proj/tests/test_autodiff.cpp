#include <doctest.h>

#include <cmath>

#include "feddva/autodiff.hpp"
#include "feddva/gradcheck.hpp"
#include "feddva/rng.hpp"

using namespace feddva;
using ad::Tensor;

TEST_CASE("matmul matches a hand-computed product") {
  const Tensor a = Tensor::constant({2, 3}, {1, 2, 3, 4, 5, 6});
  const Tensor b = Tensor::constant({3, 2}, {7, 8, 9, 10, 11, 12});
  const Tensor c = ad::matmul(a, b);
  CHECK(c.shape() == ad::Shape{2, 2});
  CHECK(c.at(0, 0) == 58);
  CHECK(c.at(0, 1) == 64);
  CHECK(c.at(1, 0) == 139);
  CHECK(c.at(1, 1) == 154);
}

TEST_CASE("bce_with_logits equals the summed Bernoulli NLL averaged over rows") {
  const std::vector<double> logits{0.3, -1.2, 2.0, 0.0};
  const std::vector<double> targets{1.0, 0.0, 0.25, 1.0};
  double expect = 0.0;
  for (std::size_t i = 0; i < 4; ++i) {
    const double p = 1.0 / (1.0 + std::exp(-logits[i]));
    expect -= targets[i] * std::log(p) + (1.0 - targets[i]) * std::log(1.0 - p);
  }
  expect /= 2.0;  // two rows of two pixels
  CHECK(ad::bce_with_logits(Tensor::constant({2, 2}, logits), targets).item() == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("bce_with_logits stays finite for large logits") {
  const std::vector<double> targets{1.0, 0.0};
  const double v = ad::bce_with_logits(Tensor::constant({1, 2}, {800.0, -800.0}), targets).item();
  CHECK(v == doctest::Approx(0.0));
  const double w = ad::bce_with_logits(Tensor::constant({1, 2}, {-800.0, 800.0}), targets).item();
  CHECK(w == doctest::Approx(1600.0));
}

TEST_CASE("softmax_cross_entropy matches log-sum-exp by hand") {
  const std::vector<int> labels{2, 0};
  const Tensor l = Tensor::constant({2, 3}, {1.0, 2.0, 3.0, 0.5, 0.5, -1.0});
  const double r0 = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0)) - 3.0;
  const double r1 = std::log(2 * std::exp(0.5) + std::exp(-1.0)) - 0.5;
  CHECK(ad::softmax_cross_entropy(l, labels).item() == doctest::Approx((r0 + r1) / 2).epsilon(1e-12));
  const std::vector<int> bad{3, 0};
  CHECK_THROWS_AS(ad::softmax_cross_entropy(l, bad), std::out_of_range);
}

TEST_CASE("a reused subexpression accumulates both gradient paths") {
  Tensor x = Tensor::parameter({3}, {0.5, -2.0, 3.0});
  ad::backward(ad::sum(ad::add(ad::mul(x, x), x)));
  for (std::size_t i = 0; i < 3; ++i) CHECK(x.grad()[i] == doctest::Approx(2 * x.data()[i] + 1));
}

TEST_CASE("frozen leaves receive no gradient and the graph stays topological") {
  Tensor w = Tensor::parameter({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::parameter({2}, {0.1, 0.2});
  b.set_requires_grad(false);
  const Tensor x = Tensor::constant({1, 2}, {1, -1});
  const Tensor loss = ad::sum(ad::square(ad::add_row(ad::matmul(x, w), b)));
  CHECK(ad::Graph::trace(loss).is_topological());
  ad::backward(loss);
  CHECK(w.has_grad());
  CHECK_FALSE(b.has_grad());
}

TEST_CASE("sgd_step moves against the gradient and clears it") {
  Tensor p = Tensor::parameter({2}, {1.0, -1.0});
  ad::backward(ad::sum(ad::square(p)));
  std::vector<Tensor> ps{p};
  ad::sgd_step(ps, 0.25);
  CHECK(p.data()[0] == doctest::Approx(0.5));
  CHECK(p.data()[1] == doctest::Approx(-0.5));
  CHECK_THROWS_AS(ad::sgd_step(ps, 0.25), std::logic_error);
}

TEST_CASE("shape errors name the operation") {
  const Tensor a = Tensor::constant({2, 3}, std::vector<double>(6, 1.0));
  const Tensor b = Tensor::constant({2, 2}, std::vector<double>(4, 1.0));
  CHECK_THROWS_WITH_AS(ad::add(a, b), doctest::Contains("shape mismatch"), std::invalid_argument);
  CHECK_THROWS_AS(ad::matmul(a, a), std::invalid_argument);
  CHECK_THROWS_AS(ad::log(Tensor::constant({1}, {-1.0})), std::domain_error);
  CHECK_THROWS_AS(ad::backward(a), std::invalid_argument);
}

TEST_CASE("maximum sends the gradient to the first argument on ties") {
  Tensor a = Tensor::parameter({2}, {1.0, 2.0});
  Tensor b = Tensor::parameter({2}, {1.0, 3.0});
  ad::backward(ad::sum(ad::maximum(a, b)));
  CHECK(a.grad()[0] == 1.0);
  CHECK(b.grad()[0] == 0.0);
  CHECK(a.grad()[1] == 0.0);
  CHECK(b.grad()[1] == 1.0);
}

TEST_CASE("gradient check flags a wrong derivative") {
  // A loss whose graph is correct passes; a perturbed copy does not.
  Tensor x = Tensor::parameter({3}, {0.3, -0.7, 1.1});
  const auto good = check_gradients([&] { return ad::sum(ad::tanh(x)); }, {x});
  CHECK(good.max_rel_error < 1e-6);
  CHECK(good.checked == 3);
  // Derivative of tanh wrongly replaced by 1 via a detached value.
  const auto bad = check_gradients(
      [&] {
        const Tensor t = ad::tanh(x);
        const Tensor t_const = Tensor::constant({3}, std::vector<double>(t.data().begin(), t.data().end()));
        const Tensor x_const = Tensor::constant({3}, std::vector<double>(x.data().begin(), x.data().end()));
        return ad::sum(ad::add(ad::sub(x, x_const), t_const));
      },
      {x});
  CHECK(bad.max_rel_error > 1e-2);
}
