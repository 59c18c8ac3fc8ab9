#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "feddva/autodiff.hpp"
#include "feddva/rng.hpp"

namespace feddva {

// Diagonal Gaussian posterior for a batch, parameterized by mean and log-variance.
struct DiagGaussian {
  ad::Tensor mu;       // [batch, d]
  ad::Tensor log_var;  // [batch, d]

  DiagGaussian() = default;
  DiagGaussian(ad::Tensor mean, ad::Tensor logvar);

  std::size_t batch() const { return mu.rows(); }
  std::size_t dim() const { return mu.cols(); }
  // Row `i` as a [1, d] posterior (differentiable slice).
  DiagGaussian row(std::size_t i) const;
};

struct LatentConfig {
  std::size_t d_z = 4;
  std::size_t d_c = 4;
  double xi = 32.0;

  void validate() const;
};

// mu + exp(log_var / 2) * eps with eps ~ N(0, I). eps is a constant leaf.
ad::Tensor reparameterize(const DiagGaussian& q, Rng& rng);
ad::Tensor reparameterize_with(const DiagGaussian& q, std::vector<double> eps);

// (1/batch) sum_i KL(q_i || N(0, I)).
ad::Tensor kl_to_standard(const DiagGaussian& q);

// KL(q_i || q_j) for two single-row posteriors, closed form.
ad::Tensor kl_pairwise(const DiagGaussian& q_i, const DiagGaussian& q_j);

// (1/n) sum_j KL(q_i || q_j) over all rows j of `batch` (including i):
// the Jensen upper bound on KL(q_i || uniform mixture of the batch).
ad::Tensor kl_to_batch_mixture(const DiagGaussian& q_i, const DiagGaussian& batch);

// The same bound for every row at once, fused; shape [n].
ad::Tensor kl_to_batch_mixture_rows(const DiagGaussian& batch);

// Plain-value helpers for evaluation code.
double kl_pairwise_value(std::span<const double> mu_i, std::span<const double> lv_i,
                         std::span<const double> mu_j, std::span<const double> lv_j);
// log density of a diagonal Gaussian at x.
double diag_log_density(std::span<const double> x, std::span<const double> mu,
                        std::span<const double> log_var);

}  // namespace feddva
