#include "feddva/objective.hpp"

#include <algorithm>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include "feddva/gaussian.hpp"

namespace feddva {

using ad::Tensor;

LossBreakdown& LossBreakdown::operator+=(const LossBreakdown& o) {
  total += o.total;
  recon += o.recon;
  r_z += o.r_z;
  r_c += o.r_c;
  kl_c_to_qc += o.kl_c_to_qc;
  kl_c_to_mixture += o.kl_c_to_mixture;
  constraint_slack += o.constraint_slack;
  cross_entropy += o.cross_entropy;
  accuracy += o.accuracy;
  return *this;
}

LossBreakdown LossBreakdown::scaled(double s) const {
  LossBreakdown b = *this;
  b.total *= s;
  b.recon *= s;
  b.r_z *= s;
  b.r_c *= s;
  b.kl_c_to_qc *= s;
  b.kl_c_to_mixture *= s;
  b.constraint_slack *= s;
  b.cross_entropy *= s;
  b.accuracy *= s;
  return b;
}

nlohmann::json to_json(const LossBreakdown& b) {
  return {{"total", b.total},
          {"recon", b.recon},
          {"r_z", b.r_z},
          {"r_c", b.r_c},
          {"kl_c_to_qc", b.kl_c_to_qc},
          {"kl_c_to_mixture", b.kl_c_to_mixture},
          {"constraint_slack", b.constraint_slack},
          {"cross_entropy", b.cross_entropy},
          {"accuracy", b.accuracy}};
}

LossBreakdown loss_breakdown_from_json(const nlohmann::json& j) {
  LossBreakdown b;
  b.total = j.at("total").get<double>();
  b.recon = j.at("recon").get<double>();
  b.r_z = j.at("r_z").get<double>();
  b.r_c = j.at("r_c").get<double>();
  b.kl_c_to_qc = j.at("kl_c_to_qc").get<double>();
  b.kl_c_to_mixture = j.at("kl_c_to_mixture").get<double>();
  b.constraint_slack = j.at("constraint_slack").get<double>();
  b.cross_entropy = j.value("cross_entropy", 0.0);
  b.accuracy = j.value("accuracy", 0.0);
  return b;
}

std::string loss_breakdown_csv_header() {
  return "total,recon,r_z,r_c,kl_c_to_qc,kl_c_to_mixture,constraint_slack,cross_entropy,accuracy";
}

std::string to_csv_row(const LossBreakdown& b) {
  std::ostringstream os;
  os << std::setprecision(17) << b.total << ',' << b.recon << ',' << b.r_z << ',' << b.r_c << ','
     << b.kl_c_to_qc << ',' << b.kl_c_to_mixture << ',' << b.constraint_slack << ','
     << b.cross_entropy << ',' << b.accuracy;
  return os.str();
}

Tensor hinge_regularizer(const Tensor& kl_mixture, const Tensor& kl_qc, double xi) {
  return ad::maximum(ad::add_scalar(kl_mixture, xi), kl_qc);
}

Tensor detach(const Tensor& t) {
  return Tensor::constant(t.shape(), std::vector<double>(t.data().begin(), t.data().end()));
}

PosteriorMeans posterior_means(const DvaModel& model, const Tensor& x) {
  PosteriorMeans m;
  m.z = model.encode_z(x).mu;
  if (model.arch().variant == ModelVariant::kDual) m.c = model.encode_c(x, m.z).mu;
  return m;
}

LossResult loss_vanilla_vae(const Tensor& x, const DvaModel& model, Rng& rng) {
  if (model.arch().variant != ModelVariant::kVanilla) {
    throw std::logic_error("loss_vanilla_vae: model must be the vanilla (z-only decoder) variant");
  }
  const DiagGaussian qz = model.encode_z(x);
  const Tensor z = reparameterize(qz, rng);
  const Tensor recon = ad::bce_with_logits(model.decode_z_logits(z), x.data());
  const Tensor kl = kl_to_standard(qz);
  LossResult out{ad::add(recon, kl), {}};
  out.parts.recon = recon.item();
  out.parts.r_z = kl.item();
  out.parts.total = out.total.item();
  return out;
}

LossResult loss_feddva(const Tensor& x, const DvaModel& model, double xi, const ObjectiveWeights& w,
                       Rng& rng) {
  if (x.shape().size() != 2 || x.rows() < 2) {
    throw std::invalid_argument(
        "loss_feddva: batch of " + std::to_string(x.shape().empty() ? 0 : x.rows()) +
        " rows; the client mixture estimate needs a minimum batch of 2");
  }
  if (w.samples == 0) throw std::invalid_argument("loss_feddva: samples must be >= 1");

  const DiagGaussian qz = model.encode_z(x);
  const Tensor r_z = kl_to_standard(qz);

  Tensor recon, kl_qc, kl_mix;
  for (std::size_t s = 0; s < w.samples; ++s) {
    const Tensor z = reparameterize(qz, rng);
    const DiagGaussian qc = model.encode_c(x, z);
    const Tensor c = reparameterize(qc, rng);
    const Tensor rec = ad::bce_with_logits(model.decode_logits(z, c), x.data());
    const Tensor qc_kl = kl_to_standard(qc);
    const Tensor mix_kl = ad::mean(kl_to_batch_mixture_rows(qc));
    recon = s == 0 ? rec : ad::add(recon, rec);
    kl_qc = s == 0 ? qc_kl : ad::add(kl_qc, qc_kl);
    kl_mix = s == 0 ? mix_kl : ad::add(kl_mix, mix_kl);
  }
  if (w.samples > 1) {
    const double inv = 1.0 / static_cast<double>(w.samples);
    recon = ad::scale(recon, inv);
    kl_qc = ad::scale(kl_qc, inv);
    kl_mix = ad::scale(kl_mix, inv);
  }

  const Tensor r_c = hinge_regularizer(kl_mix, kl_qc, xi);
  Tensor total = recon;
  if (w.alpha != 0.0) total = ad::add(total, ad::scale(r_z, w.alpha));
  if (w.beta != 0.0) total = ad::add(total, ad::scale(r_c, w.beta));

  LossResult out{total, {}};
  out.parts.recon = recon.item();
  out.parts.r_z = r_z.item();
  out.parts.r_c = r_c.item();
  out.parts.kl_c_to_qc = kl_qc.item();
  out.parts.kl_c_to_mixture = kl_mix.item();
  out.parts.constraint_slack = out.parts.kl_c_to_qc - out.parts.kl_c_to_mixture - xi;
  out.parts.total = total.item();
  return out;
}

LossResult loss_classifier(const Tensor& x, std::span<const int> labels, const DvaModel& model,
                           double xi, const ObjectiveWeights& w, Rng& rng) {
  if (!model.params().head) throw std::logic_error("loss_classifier: model has no classification head");
  LossResult out = loss_feddva(x, model, xi, w, rng);

  PosteriorMeans means = posterior_means(model, x);
  if (w.frozen_representation) {
    means.z = detach(means.z);
    if (means.c.defined()) means.c = detach(means.c);
  }
  const Tensor logits = model.classify(means.z, means.c);
  const Tensor ce = ad::softmax_cross_entropy(logits, labels);

  std::size_t correct = 0;
  const std::size_t k = logits.cols();
  const auto lv = logits.data();
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto row = lv.subspan(i * k, k);
    const auto best = std::max_element(row.begin(), row.end()) - row.begin();
    if (best == labels[i]) ++correct;
  }

  if (w.gamma != 0.0) out.total = ad::add(out.total, ad::scale(ce, w.gamma));
  out.parts.cross_entropy = ce.item();
  out.parts.accuracy = static_cast<double>(correct) / static_cast<double>(labels.size());
  out.parts.total = out.total.item();
  return out;
}

}  // namespace feddva
