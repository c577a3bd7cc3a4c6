#include "vble/prior.hpp"

#include <cmath>
#include <numbers>

#include "vble/ops.hpp"

namespace vble {

namespace {

// Per-channel parameter shape for a latent of the given (unbatched) shape.
Shape channel_param_shape(const Shape& latent) {
  Shape s{1, latent[0]};
  for (std::size_t i = 1; i < latent.size(); ++i) s.push_back(1);
  return s;
}

Tensor logistic_logp(const Tensor& z, const Tensor& loc, const Tensor& log_scale) {
  return log_logistic_bin_mass(z, broadcast_to(loc, z.shape()), broadcast_to(log_scale, z.shape()));
}

}  // namespace

Tensor convolved_gaussian_logp(const Tensor& z, const Tensor& mu, const Tensor& sigma) {
  return log_gaussian_bin_mass(z, broadcast_to(mu, z.shape()), broadcast_to(sigma, z.shape()));
}

LatentPrior::LatentPrior(const Architecture& arch, Rng& rng) : kind_(arch.prior) {
  arch.validate();
  switch (kind_) {
    case PriorKind::standard_normal: break;
    case PriorKind::factorized: {
      const Shape s = channel_param_shape(arch.latent_shape());
      loc_ = Tensor::zeros(s);
      log_scale_ = Tensor::zeros(s);
      break;
    }
    case PriorKind::scale_hyperprior: {
      hyper_ = std::make_shared<HyperNetwork>(arch, rng);
      const Shape s = channel_param_shape(arch.hyper_shape());
      hyper_loc_ = Tensor::zeros(s);
      hyper_log_scale_ = Tensor::zeros(s);
      break;
    }
  }
}

Tensor LatentPrior::coefficient_log_prob(const Tensor& z, const Tensor& z_bar) const {
  switch (kind_) {
    case PriorKind::standard_normal:
      return add_scalar(scale(square(z), -0.5), -0.5 * std::log(2.0 * std::numbers::pi));
    case PriorKind::factorized: return logistic_logp(z, loc_, log_scale_);
    case PriorKind::scale_hyperprior: {
      auto [mu, sigma] = hyper_->round_trip(z_bar);
      return convolved_gaussian_logp(z, mu, sigma);
    }
  }
  throw std::logic_error("prior: unknown kind");
}

Tensor LatentPrior::log_prob(const Tensor& z) const {
  if (kind_ == PriorKind::scale_hyperprior) {
    throw std::invalid_argument("prior_logp: scale-hyperprior needs the latent location driving the hyper network");
  }
  return sum(coefficient_log_prob(z, z));
}

Tensor LatentPrior::log_prob(const Tensor& z, const Tensor& z_bar) const { return sum(coefficient_log_prob(z, z_bar)); }

Tensor LatentPrior::hyper_log_prob(const Tensor& h) const {
  if (kind_ != PriorKind::scale_hyperprior) throw std::invalid_argument("prior has no hyper-latent");
  return sum(logistic_logp(h, hyper_loc_, hyper_log_scale_));
}

Tensor LatentPrior::log_prob_given_hyper(const Tensor& z, const Tensor& h) const {
  if (kind_ != PriorKind::scale_hyperprior) throw std::invalid_argument("prior has no hyper-latent");
  auto [mu, sigma] = hyper_->decode(h);
  return sum(convolved_gaussian_logp(z, mu, sigma)) + hyper_log_prob(h);
}

const HyperNetwork& LatentPrior::hyper() const {
  if (!hyper_) throw std::logic_error("prior has no hyper network");
  return *hyper_;
}

std::vector<NamedTensor> LatentPrior::parameters() const {
  std::vector<NamedTensor> out;
  switch (kind_) {
    case PriorKind::standard_normal: break;
    case PriorKind::factorized:
      out.push_back({"loc", loc_});
      out.push_back({"log_scale", log_scale_});
      break;
    case PriorKind::scale_hyperprior:
      for (auto& p : hyper_->parameters()) out.push_back({"hyper." + p.name, p.tensor});
      out.push_back({"hyper_loc", hyper_loc_});
      out.push_back({"hyper_log_scale", hyper_log_scale_});
      break;
  }
  return out;
}

}  // namespace vble
