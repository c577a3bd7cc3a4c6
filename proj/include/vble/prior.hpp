#pragma once

#include <memory>
#include <optional>
#include <vector>

#include "vble/models.hpp"

namespace vble {

/// Per-coefficient log-density of N(mu, sigma^2) convolved with U(-1/2, 1/2),
/// evaluated at z. mu and sigma broadcast against z.
Tensor convolved_gaussian_logp(const Tensor& z, const Tensor& mu, const Tensor& sigma);

/// Latent density p(z). All variants factorize over coefficients; log_prob
/// returns the sum over every coefficient of every batch item (nats).
///
///  - standard-normal:    sum log N(z_k; 0, 1)
///  - factorized-learned: per-channel logistic density convolved with U(+-1/2)
///  - scale-hyperprior:   sum log [N(mu_k, sigma_k^2) * U(+-1/2)](z_k), with
///    (mu, sigma) from the hyper network applied to the latent location.
///    The hyper-latent density p_psi(h) enters only through
///    log_prob_given_hyper / hyper_log_prob.
class LatentPrior {
 public:
  LatentPrior() = default;
  LatentPrior(const Architecture& arch, Rng& rng);

  PriorKind kind() const { return kind_; }

  Tensor log_prob(const Tensor& z) const;
  /// `z_bar` drives the hyper network (scale-hyperprior); ignored otherwise.
  Tensor log_prob(const Tensor& z, const Tensor& z_bar) const;
  /// log p(z|h) + log p_psi(h) with an explicit hyper-latent.
  Tensor log_prob_given_hyper(const Tensor& z, const Tensor& h) const;
  /// log p_psi(h) summed over coefficients.
  Tensor hyper_log_prob(const Tensor& h) const;

  /// Per-coefficient log-density (same shape as z).
  Tensor coefficient_log_prob(const Tensor& z, const Tensor& z_bar) const;

  const HyperNetwork& hyper() const;
  bool has_hyper() const { return static_cast<bool>(hyper_); }

  std::vector<NamedTensor> parameters() const;

 private:
  PriorKind kind_ = PriorKind::standard_normal;
  // factorized-learned: per-channel logistic parameters of p(z); shape [1, C(, 1, 1)]
  Tensor loc_, log_scale_;
  // scale-hyperprior: hyper networks and the factorized p_psi(h)
  std::shared_ptr<HyperNetwork> hyper_;
  Tensor hyper_loc_, hyper_log_scale_;
};

}  // namespace vble
