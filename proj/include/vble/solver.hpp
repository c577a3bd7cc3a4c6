#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "vble/degradation.hpp"
#include "vble/generative_model.hpp"
#include "vble/random.hpp"

namespace vble {

/// Variational family of q(z) = prod_k q(z_k; z_bar_k, a_k).
enum class Family { uniform, gaussian };
enum class SolverMode { vble, map_z, vble_zh };
enum class EntropyWeighting { tempered, unit };

std::string to_string(Family f);
std::string to_string(SolverMode m);
std::string to_string(EntropyWeighting w);
Family parse_family(const std::string& s);
SolverMode parse_solver_mode(const std::string& s);
EntropyWeighting parse_entropy_weighting(const std::string& s);

struct SolverConfig {
  Family family = Family::uniform;
  SolverMode mode = SolverMode::vble;
  double lambda = 1.0;
  std::size_t iterations = 1000;
  double learning_rate = 0.1;
  /// Reparameterized draws averaged per gradient step.
  std::size_t samples_per_iteration = 1;
  /// Draw noise in (eps, -eps) pairs; samples_per_iteration must be even.
  bool antithetic = false;
  /// Fraction of final iterations whose iterates are averaged into the
  /// returned parameters (0 returns the last iterate).
  double average_tail = 0.5;
  /// Posterior draws used for the MMSE-x estimate and the uncertainty maps.
  std::size_t posterior_samples = 100;
  EntropyWeighting entropy_weighting = EntropyWeighting::tempered;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  /// Missing keys keep their defaults; unknown keys are rejected.
  static SolverConfig from_json(const nlohmann::json& j);
};

/// Location and log-spread of q; a = exp(rho). The hyper-latent pair is
/// populated only in vble-zh mode. Tensors carry a leading batch axis of 1.
struct VariationalParams {
  Tensor z_bar, rho;
  Tensor h_bar, rho_h;

  bool has_hyper() const { return h_bar.size() > 0; }
  Tensor spread() const;
  VariationalParams detached() const;
};

/// z_bar0 = encode(init_guess(y)), rho0 = 0 (and h_bar0 = hyper-encode(z_bar0)
/// in vble-zh mode).
VariationalParams initial_params(const ObservationProblem& problem, const GenerativeModel& model,
                                 const SolverConfig& config);

/// Standard noise of the family: U(-1/2, 1/2) or N(0, 1), shape [n, shape...].
/// With `antithetic`, the second half of the batch negates the first.
Tensor draw_noise(Family family, const Shape& shape, std::size_t n, bool antithetic, Rng& rng);

/// loc + exp(rho) * eps, broadcasting the [1, ...] parameters over eps's batch.
Tensor reparameterize(const Tensor& loc, const Tensor& rho, const Tensor& eps);

/// n latent draws from q, differentiable in (z_bar, rho).
Tensor sample_q(const VariationalParams& params, Family family, std::size_t n, Rng& rng);

/// -sum(rho) over every optimized spread: E_q[log q] up to a constant.
Tensor entropy_term(const VariationalParams& params);

struct ObjectiveValue {
  Tensor total;
  double data = 0.0;
  double prior = 0.0;
  double entropy = 0.0;
};

/// Monte-Carlo negative ELBO (vble, vble-zh) or the deterministic MAP-z loss,
/// averaged over samples_per_iteration draws taken from `rng`.
ObjectiveValue objective(const VariationalParams& params, const ObservationProblem& problem,
                         const GenerativeModel& model, const SolverConfig& config, Rng& rng);

/// Same objective without the data term (prior and entropy only).
ObjectiveValue prior_objective(const VariationalParams& params, const GenerativeModel& model,
                               const SolverConfig& config, Rng& rng);

struct PosteriorSamples {
  Tensor latents;  // [n, latent...]
  Tensor images;   // [n, C, H, W]
};

struct RestorationOutput {
  Family family = Family::uniform;
  SolverMode mode = SolverMode::vble;
  VariationalParams params;
  Tensor mmse_z;
  Tensor mmse_x;
  PosteriorSamples samples;
  std::vector<double> loss_trace;
};

/// Fixed-iteration Adam over the variational parameters, followed by
/// posterior sampling and both point estimates.
RestorationOutput run(const ObservationProblem& problem, const GenerativeModel& model, const SolverConfig& config);

/// Optimizes `start` against prior_objective; returns the final parameters.
VariationalParams run_prior_only(const VariationalParams& start, const GenerativeModel& model,
                                 const SolverConfig& config, std::vector<double>* trace = nullptr);

Tensor mmse_z(const GenerativeModel& model, const VariationalParams& params);

/// n decoded draws; draw i uses noise seeded by derive_seed(seed, i), so the
/// result does not depend on the worker count. map-z parameters yield n copies
/// of the location. threads = 0 uses worker_threads().
PosteriorSamples sample_posterior(const GenerativeModel& model, const VariationalParams& params, Family family,
                                  SolverMode mode, std::size_t n, std::uint64_t seed, std::size_t threads = 0);

/// Pixelwise mean over the batch axis.
Tensor batch_mean(const Tensor& images);

Tensor mmse_x(const GenerativeModel& model, const VariationalParams& params, Family family, SolverMode mode,
              std::size_t n, std::uint64_t seed);

}  // namespace vble
