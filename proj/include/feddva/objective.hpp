#pragma once

#include <span>
#include <string>

#include <json.hpp>

#include "feddva/autodiff.hpp"
#include "feddva/model.hpp"
#include "feddva/rng.hpp"

namespace feddva {

// Per-batch loss components. Every KL term is a batch mean of per-sample sums
// over latent dimensions; recon is summed over pixels and averaged over rows.
struct LossBreakdown {
  double total = 0.0;
  double recon = 0.0;
  double r_z = 0.0;
  double r_c = 0.0;
  double kl_c_to_qc = 0.0;
  double kl_c_to_mixture = 0.0;
  double constraint_slack = 0.0;  // kl_c_to_qc - kl_c_to_mixture - xi
  double cross_entropy = 0.0;
  double accuracy = 0.0;  // batch accuracy of the head, classifier losses only

  // kl_c_to_qc - kl_c_to_mixture: the per-batch constraint monitor.
  double constraint_gap() const { return kl_c_to_qc - kl_c_to_mixture; }

  LossBreakdown& operator+=(const LossBreakdown& o);
  LossBreakdown scaled(double s) const;
};

nlohmann::json to_json(const LossBreakdown& b);
LossBreakdown loss_breakdown_from_json(const nlohmann::json& j);
std::string loss_breakdown_csv_header();
std::string to_csv_row(const LossBreakdown& b);

struct LossResult {
  ad::Tensor total;
  LossBreakdown parts;
};

struct ObjectiveWeights {
  double alpha = 1.0;
  double beta = 0.75;
  double gamma = 1.0;
  // Reparameterized samples per term; losses are averaged over them.
  std::size_t samples = 1;
  // Classification gradient stops at the posterior means.
  bool frozen_representation = false;
};

// max(xi + kl_mixture, kl_qc); a tie takes the first branch.
ad::Tensor hinge_regularizer(const ad::Tensor& kl_mixture, const ad::Tensor& kl_qc, double xi);

// Bernoulli reconstruction + KL(q(z|x) || N(0,I)). Needs the vanilla variant.
LossResult loss_vanilla_vae(const ad::Tensor& x, const DvaModel& model, Rng& rng);

// recon + alpha * R_z + beta * R_c with R_c the hinge over the batch-mixture
// bound. Needs at least two rows.
LossResult loss_feddva(const ad::Tensor& x, const DvaModel& model, double xi,
                       const ObjectiveWeights& w, Rng& rng);

// loss_feddva + gamma * cross-entropy of the head on the posterior means.
LossResult loss_classifier(const ad::Tensor& x, std::span<const int> labels, const DvaModel& model,
                           double xi, const ObjectiveWeights& w, Rng& rng);

// Deterministic posterior means: mu_z = f(x).mu, mu_c = h(x, mu_z).mu.
struct PosteriorMeans {
  ad::Tensor z;
  ad::Tensor c;  // undefined for the vanilla variant
};
PosteriorMeans posterior_means(const DvaModel& model, const ad::Tensor& x);

// Copies values into a constant (no gradient path).
ad::Tensor detach(const ad::Tensor& t);

}  // namespace feddva
