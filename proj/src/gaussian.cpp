#include "feddva/gaussian.hpp"

#include <cmath>
#include <stdexcept>

#include "feddva/mutation.hpp"

namespace feddva {

using ad::Tensor;

DiagGaussian::DiagGaussian(Tensor mean, Tensor logvar) : mu(std::move(mean)), log_var(std::move(logvar)) {
  if (mu.shape() != log_var.shape() || mu.shape().size() != 2) {
    throw std::invalid_argument("DiagGaussian: mu " + ad::shape_string(mu.shape()) +
                                " and log_var " + ad::shape_string(log_var.shape()) +
                                " must be matching [batch, d]");
  }
}

DiagGaussian DiagGaussian::row(std::size_t i) const {
  if (i >= batch()) throw std::out_of_range("DiagGaussian::row: index out of range");
  // Rows are picked through a one-hot matmul so gradients reach the batch.
  std::vector<double> pick(batch(), 0.0);
  pick[i] = 1.0;
  const Tensor selector = Tensor::constant({1, batch()}, std::move(pick));
  return {ad::matmul(selector, mu), ad::matmul(selector, log_var)};
}

void LatentConfig::validate() const {
  if (d_z < 1) throw std::invalid_argument("LatentConfig: d_z must be >= 1");
  if (d_c < 1) throw std::invalid_argument("LatentConfig: d_c must be >= 1");
  if (!(xi >= 0.0)) throw std::invalid_argument("LatentConfig: xi must be >= 0");
}

Tensor reparameterize_with(const DiagGaussian& q, std::vector<double> eps) {
  const Tensor noise = Tensor::constant(q.mu.shape(), std::move(eps));
  const Tensor sigma = ad::exp(ad::scale(q.log_var, 0.5));
  return ad::add(q.mu, ad::mul(sigma, noise));
}

Tensor reparameterize(const DiagGaussian& q, Rng& rng) {
  std::vector<double> eps(q.mu.size());
  for (auto& e : eps) e = rng.normal();
  return reparameterize_with(q, std::move(eps));
}

Tensor kl_to_standard(const DiagGaussian& q) {
  const double batch = static_cast<double>(q.batch());
  const double d = static_cast<double>(q.dim());
  // 0.5 * sum(mu^2 - log_var + exp(log_var) - 1) / batch
  const Tensor var = mutation::active("kl") ? ad::exp(ad::scale(q.log_var, 0.5)) : ad::exp(q.log_var);
  const Tensor terms = ad::add(ad::sub(ad::square(q.mu), q.log_var), var);
  return ad::add_scalar(ad::scale(ad::sum(terms), 0.5 / batch), -0.5 * d);
}

Tensor kl_pairwise(const DiagGaussian& q_i, const DiagGaussian& q_j) {
  if (q_i.batch() != 1 || q_j.batch() != 1 || q_i.dim() != q_j.dim()) {
    throw std::invalid_argument("kl_pairwise: expected two [1,d] rows, got " +
                                ad::shape_string(q_i.mu.shape()) + " and " +
                                ad::shape_string(q_j.mu.shape()));
  }
  const double d = static_cast<double>(q_i.dim());
  const Tensor inv_var_j = ad::exp(ad::scale(q_j.log_var, -1.0));
  const Tensor mahalanobis = ad::mul(ad::square(ad::sub(q_i.mu, q_j.mu)), inv_var_j);
  const Tensor log_ratio = ad::sub(q_i.log_var, q_j.log_var);
  const Tensor terms = ad::add(ad::sub(mahalanobis, log_ratio), ad::exp(log_ratio));
  return ad::add_scalar(ad::scale(ad::sum(terms), 0.5), -0.5 * d);
}

Tensor kl_to_batch_mixture(const DiagGaussian& q_i, const DiagGaussian& batch) {
  const std::size_t n = batch.batch();
  if (n == 0) throw std::invalid_argument("kl_to_batch_mixture: empty batch");
  Tensor total = kl_pairwise(q_i, batch.row(0));
  for (std::size_t j = 1; j < n; ++j) total = ad::add(total, kl_pairwise(q_i, batch.row(j)));
  return ad::scale(total, 1.0 / static_cast<double>(n));
}

Tensor kl_to_batch_mixture_rows(const DiagGaussian& batch) {
  const std::size_t n = batch.batch();
  const std::size_t d = batch.dim();
  if (n == 0) throw std::invalid_argument("kl_to_batch_mixture_rows: empty batch");
  const auto mu = batch.mu.data();
  const auto lv = batch.log_var.data();
  const double inv_n = 1.0 / static_cast<double>(n);

  std::vector<double> inv_var(n * d);
  for (std::size_t k = 0; k < n * d; ++k) inv_var[k] = std::exp(-lv[k]);

  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      for (std::size_t l = 0; l < d; ++l) {
        const double dm = mu[i * d + l] - mu[j * d + l];
        const double lr = lv[i * d + l] - lv[j * d + l];
        acc += dm * dm * inv_var[j * d + l] - lr + std::exp(lr) - 1.0;
      }
    }
    out[i] = 0.5 * acc * inv_n;
  }

  return ad::make_result(
      "kl-to-batch-mixture", {n}, std::move(out), {batch.mu, batch.log_var},
      [n, d, inv_n, inv_var = std::move(inv_var)](ad::Node& self) {
        ad::Node& nmu = *self.inputs[0];
        ad::Node& nlv = *self.inputs[1];
        std::vector<double> gmu(n * d, 0.0);
        std::vector<double> glv(n * d, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
          const double g = self.grad[i] * inv_n;
          if (g == 0.0) continue;
          for (std::size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            for (std::size_t l = 0; l < d; ++l) {
              const std::size_t a = i * d + l;
              const std::size_t b = j * d + l;
              const double dm = nmu.value[a] - nmu.value[b];
              const double r = std::exp(nlv.value[a] - nlv.value[b]);
              const double m = dm * inv_var[b];
              gmu[a] += g * m;
              gmu[b] -= g * m;
              glv[a] += g * 0.5 * (r - 1.0);
              glv[b] += g * 0.5 * (1.0 - r - dm * m);
            }
          }
        }
        if (nmu.requires_grad) nmu.accumulate(gmu);
        if (nlv.requires_grad) nlv.accumulate(glv);
      });
}

double kl_pairwise_value(std::span<const double> mu_i, std::span<const double> lv_i,
                         std::span<const double> mu_j, std::span<const double> lv_j) {
  double acc = 0.0;
  for (std::size_t l = 0; l < mu_i.size(); ++l) {
    const double dm = mu_i[l] - mu_j[l];
    const double lr = lv_i[l] - lv_j[l];
    acc += dm * dm * std::exp(-lv_j[l]) - lr + std::exp(lr) - 1.0;
  }
  return 0.5 * acc;
}

double diag_log_density(std::span<const double> x, std::span<const double> mu,
                        std::span<const double> log_var) {
  constexpr double kLog2Pi = 1.8378770664093454835606594728112;
  double acc = 0.0;
  for (std::size_t l = 0; l < x.size(); ++l) {
    const double dx = x[l] - mu[l];
    acc += kLog2Pi + log_var[l] + dx * dx * std::exp(-log_var[l]);
  }
  return -0.5 * acc;
}

}  // namespace feddva
