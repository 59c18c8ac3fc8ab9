#include <doctest.h>

#include <cmath>

#include "feddva/objective.hpp"

using namespace feddva;
using ad::Tensor;

namespace {

ArchitectureConfig tiny_arch(std::size_t n_classes = 0) {
  ArchitectureConfig a;
  a.input_dim = 6;
  a.hidden_dims = {5};
  a.d_z = 2;
  a.d_c = 3;
  a.n_classes = n_classes;
  a.head_hidden = 4;
  return a;
}

Tensor tiny_batch(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n * 6);
  for (auto& x : v) x = rng.uniform();
  return Tensor::constant({n, 6}, v);
}

}  // namespace

TEST_CASE("hinge picks the larger branch, first branch on ties") {
  CHECK(hinge_regularizer(Tensor::scalar(1.0), Tensor::scalar(10.0), 2.0).item() == 10.0);
  CHECK(hinge_regularizer(Tensor::scalar(1.0), Tensor::scalar(2.0), 2.0).item() == 3.0);

  Tensor mix = Tensor::parameter({1}, {1.0});
  Tensor qc = Tensor::parameter({1}, {3.0});
  ad::backward(ad::sum(hinge_regularizer(mix, qc, 2.0)));
  CHECK(mix.grad()[0] == 1.0);
  CHECK(qc.grad()[0] == 0.0);
}

TEST_CASE("hinge gradient flows to kl_qc when it dominates") {
  Tensor mix = Tensor::parameter({1}, {0.5});
  Tensor qc = Tensor::parameter({1}, {9.0});
  ad::backward(ad::sum(hinge_regularizer(mix, qc, 2.0)));
  CHECK(mix.grad()[0] == 0.0);
  CHECK(qc.grad()[0] == 1.0);
}

TEST_CASE("loss_feddva total is recon + alpha R_z + beta R_c") {
  const DvaModel model(tiny_arch(), 3);
  ObjectiveWeights w;
  w.alpha = 0.7;
  w.beta = 1.3;
  Rng rng(9);
  const LossResult r = loss_feddva(tiny_batch(4, 1), model, 1.5, w, rng);
  const auto& p = r.parts;
  CHECK(p.total == doctest::Approx(p.recon + 0.7 * p.r_z + 1.3 * p.r_c).epsilon(1e-12));
  CHECK(p.r_c == std::max(1.5 + p.kl_c_to_mixture, p.kl_c_to_qc));
  CHECK(p.constraint_slack == doctest::Approx(p.constraint_gap() - 1.5));
  CHECK(p.recon > 0.0);
  CHECK(p.r_z >= 0.0);
  CHECK(p.kl_c_to_mixture >= 0.0);
}

TEST_CASE("loss_feddva with zero regularizer weights is the reconstruction term") {
  const DvaModel model(tiny_arch(), 3);
  ObjectiveWeights w;
  w.alpha = 0.0;
  w.beta = 0.0;
  Rng rng(9);
  const LossResult r = loss_feddva(tiny_batch(3, 2), model, 1.0, w, rng);
  CHECK(r.parts.total == r.parts.recon);
}

TEST_CASE("loss_feddva is a deterministic function of the rng state") {
  const DvaModel model(tiny_arch(), 3);
  Rng a(4), b(4);
  const Tensor x = tiny_batch(5, 3);
  CHECK(loss_feddva(x, model, 1.0, {}, a).parts.total == loss_feddva(x, model, 1.0, {}, b).parts.total);
}

TEST_CASE("loss_feddva needs at least two rows") {
  const DvaModel model(tiny_arch(), 3);
  Rng rng(1);
  CHECK_THROWS_WITH_AS(loss_feddva(tiny_batch(1, 1), model, 1.0, {}, rng), doctest::Contains("minimum batch of 2"),
                       std::invalid_argument);
}

TEST_CASE("vanilla loss needs the vanilla variant and reports its KL") {
  ArchitectureConfig a = tiny_arch();
  Rng rng(1);
  CHECK_THROWS_AS(loss_vanilla_vae(tiny_batch(2, 1), DvaModel(a, 1), rng), std::logic_error);
  a.variant = ModelVariant::kVanilla;
  const LossResult r = loss_vanilla_vae(tiny_batch(2, 1), DvaModel(a, 1), rng);
  CHECK(r.parts.total == doctest::Approx(r.parts.recon + r.parts.r_z));
}

TEST_CASE("classifier loss adds gamma times cross-entropy") {
  const DvaModel model(tiny_arch(3), 5);
  const std::vector<int> labels{0, 2, 1, 1};
  ObjectiveWeights w;
  w.gamma = 2.5;
  Rng a(8), b(8);
  const Tensor x = tiny_batch(4, 6);
  const LossResult base = loss_feddva(x, model, 1.0, w, a);
  const LossResult cls = loss_classifier(x, labels, model, 1.0, w, b);
  CHECK(cls.parts.total == doctest::Approx(base.parts.total + 2.5 * cls.parts.cross_entropy).epsilon(1e-12));
  CHECK(cls.parts.accuracy >= 0.0);
  CHECK(cls.parts.accuracy <= 1.0);
}

TEST_CASE("frozen representation keeps the classification gradient out of the encoders") {
  const DvaModel model(tiny_arch(3), 5);
  const std::vector<int> labels{0, 2, 1, 1};
  const Tensor x = tiny_batch(4, 6);
  auto encoder_grad = [&](bool frozen, bool with_head) {
    ObjectiveWeights w;
    w.frozen_representation = frozen;
    for (auto p : model.shared_params()) p.zero_grad();
    Rng rng(8);
    const LossResult r = with_head ? loss_classifier(x, labels, model, 1.0, w, rng) : loss_feddva(x, model, 1.0, w, rng);
    ad::backward(r.total);
    std::vector<double> g;
    for (const auto& p : model.shared_params()) g.insert(g.end(), p.grad().begin(), p.grad().end());
    return g;
  };
  const auto plain = encoder_grad(false, false);
  const auto frozen = encoder_grad(true, true);
  const auto joint = encoder_grad(false, true);
  REQUIRE(plain.size() == frozen.size());
  double frozen_diff = 0.0, joint_diff = 0.0;
  for (std::size_t i = 0; i < plain.size(); ++i) {
    frozen_diff = std::max(frozen_diff, std::abs(plain[i] - frozen[i]));
    joint_diff = std::max(joint_diff, std::abs(plain[i] - joint[i]));
  }
  CHECK(frozen_diff < 1e-12);
  CHECK(joint_diff > 1e-8);
}

TEST_CASE("shared and local parameter sets are disjoint and cover the model") {
  const DvaModel model(tiny_arch(3), 5);
  const auto shared = model.shared_params();
  const auto local = model.local_params();
  for (const auto& s : shared) {
    for (const auto& l : local) CHECK(s.node() != l.node());
  }
  CHECK(model.flatten_shared().size() == model.shared_size());
  CHECK(local.size() == model.decoder_params().size() + model.head_params().size());
}

TEST_CASE("clone shares no storage and flatten/load round-trips") {
  const DvaModel model(tiny_arch(), 5);
  DvaModel copy = model.clone();
  auto theta = copy.flatten_shared();
  for (auto& v : theta) v += 1.0;
  copy.load_shared(theta);
  CHECK(copy.flatten_shared() == theta);
  CHECK(model.flatten_shared() != theta);
  CHECK_THROWS_AS(copy.load_shared(std::vector<double>(3, 0.0)), std::invalid_argument);
}

TEST_CASE("architecture canonical text round-trips") {
  ArchitectureConfig a = tiny_arch(4);
  a.activation = Activation::kTanh;
  a.classifier_input = ClassifierInput::kCOnly;
  CHECK(ArchitectureConfig::from_canonical_text(a.canonical_text()) == a);
}

TEST_CASE("classifier ablations change the head input width") {
  ArchitectureConfig a = tiny_arch(3);
  CHECK(a.head_input() == 5);
  a.classifier_input = ClassifierInput::kZOnly;
  CHECK(a.head_input() == 2);
  a.classifier_input = ClassifierInput::kCOnly;
  CHECK(a.head_input() == 3);
}
