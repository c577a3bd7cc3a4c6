#include "vble/solver.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>

#include "vble/adam.hpp"
#include "vble/ops.hpp"
#include "vble/parallel.hpp"

namespace vble {

std::string to_string(Family f) { return f == Family::uniform ? "uniform" : "gaussian"; }

std::string to_string(SolverMode m) {
  switch (m) {
    case SolverMode::vble: return "vble";
    case SolverMode::map_z: return "map-z";
    case SolverMode::vble_zh: return "vble-zh";
  }
  return "?";
}

std::string to_string(EntropyWeighting w) { return w == EntropyWeighting::tempered ? "tempered" : "unit"; }

Family parse_family(const std::string& s) {
  if (s == "uniform") return Family::uniform;
  if (s == "gaussian") return Family::gaussian;
  throw std::invalid_argument("family: expected uniform or gaussian, got '" + s + "'");
}

SolverMode parse_solver_mode(const std::string& s) {
  if (s == "vble") return SolverMode::vble;
  if (s == "map-z") return SolverMode::map_z;
  if (s == "vble-zh") return SolverMode::vble_zh;
  throw std::invalid_argument("mode: expected vble, map-z or vble-zh, got '" + s + "'");
}

EntropyWeighting parse_entropy_weighting(const std::string& s) {
  if (s == "tempered") return EntropyWeighting::tempered;
  if (s == "unit") return EntropyWeighting::unit;
  throw std::invalid_argument("entropy_weighting: expected tempered or unit, got '" + s + "'");
}

void SolverConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument(msg); };
  if (!(lambda >= 0) || !std::isfinite(lambda)) fail("lambda must be a finite value >= 0");
  if (iterations < 1) fail("iterations must be >= 1");
  if (!(learning_rate > 0)) fail("learning_rate must be > 0");
  if (samples_per_iteration < 1) fail("samples_per_iteration must be >= 1");
  if (antithetic && samples_per_iteration % 2) fail("samples_per_iteration must be even when antithetic is set");
  if (!(average_tail >= 0 && average_tail < 1)) fail("average_tail must lie in [0, 1)");
  if (posterior_samples < 1) fail("posterior_samples (L) must be >= 1");
}

nlohmann::json SolverConfig::to_json() const {
  return {{"family", to_string(family)},
          {"mode", to_string(mode)},
          {"lambda", lambda},
          {"iterations", iterations},
          {"learning_rate", learning_rate},
          {"samples_per_iteration", samples_per_iteration},
          {"antithetic", antithetic},
          {"average_tail", average_tail},
          {"posterior_samples", posterior_samples},
          {"entropy_weighting", to_string(entropy_weighting)},
          {"seed", seed}};
}

SolverConfig SolverConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("solver: expected an object");
  SolverConfig c;
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "family") c.family = parse_family(v.get<std::string>());
      else if (key == "mode") c.mode = parse_solver_mode(v.get<std::string>());
      else if (key == "lambda") c.lambda = v.get<double>();
      else if (key == "iterations") c.iterations = v.get<std::size_t>();
      else if (key == "learning_rate") c.learning_rate = v.get<double>();
      else if (key == "samples_per_iteration") c.samples_per_iteration = v.get<std::size_t>();
      else if (key == "antithetic") c.antithetic = v.get<bool>();
      else if (key == "average_tail") c.average_tail = v.get<double>();
      else if (key == "posterior_samples") c.posterior_samples = v.get<std::size_t>();
      else if (key == "entropy_weighting") c.entropy_weighting = parse_entropy_weighting(v.get<std::string>());
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else throw std::invalid_argument("unknown key");
    } catch (const nlohmann::json::exception&) {
      throw std::invalid_argument("solver." + key + ": wrong type");
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument("solver." + key + ": " + e.what());
    }
  }
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument(std::string("solver.") + e.what());
  }
  return c;
}

Tensor VariationalParams::spread() const { return exp(rho.detach()); }

VariationalParams VariationalParams::detached() const {
  VariationalParams p{z_bar.detach(), rho.detach(), {}, {}};
  if (has_hyper()) {
    p.h_bar = h_bar.detach();
    p.rho_h = rho_h.detach();
  }
  return p;
}

VariationalParams initial_params(const ObservationProblem& problem, const GenerativeModel& model,
                                 const SolverConfig& config) {
  VariationalParams p;
  p.z_bar = model.encoder.encode(init_guess(problem)).detach();
  p.rho = Tensor::zeros(p.z_bar.shape());
  if (config.mode == SolverMode::vble_zh) {
    if (!model.prior.has_hyper()) throw std::invalid_argument("mode vble-zh requires a scale-hyperprior model");
    p.h_bar = model.prior.hyper().encode(p.z_bar).detach();
    p.rho_h = Tensor::zeros(p.h_bar.shape());
  }
  return p;
}

Tensor draw_noise(Family family, const Shape& shape, std::size_t n, bool antithetic, Rng& rng) {
  Shape s = shape;
  s[0] = n;
  const std::size_t per = numel(shape) / shape[0];
  std::vector<double> eps(n * per);
  const std::size_t fresh = antithetic ? (n / 2) * per : eps.size();
  for (std::size_t i = 0; i < fresh; ++i) eps[i] = family == Family::uniform ? rng.uniform(-0.5, 0.5) : rng.normal();
  for (std::size_t i = fresh; i < eps.size(); ++i) eps[i] = -eps[i - fresh];
  return Tensor(std::move(s), std::move(eps));
}

Tensor reparameterize(const Tensor& loc, const Tensor& rho, const Tensor& eps) { return loc + exp(rho) * eps; }

Tensor sample_q(const VariationalParams& params, Family family, std::size_t n, Rng& rng) {
  return reparameterize(params.z_bar, params.rho, draw_noise(family, params.z_bar.shape(), n, false, rng));
}

Tensor entropy_term(const VariationalParams& params) {
  Tensor t = -sum(params.rho);
  if (params.has_hyper()) t = t - sum(params.rho_h);
  return t;
}

namespace {

Tensor guarded(const char* term, const std::function<Tensor()>& f) {
  try {
    return f();
  } catch (const NumericError& e) {
    throw NumericError(std::string("objective: non-finite value in the ") + term + " term (" + e.what() + ")");
  }
}

ObjectiveValue evaluate(const VariationalParams& p, const ObservationProblem* problem, const GenerativeModel& model,
                        const SolverConfig& cfg, Rng& rng) {
  const bool map = cfg.mode == SolverMode::map_z;
  const bool zh = cfg.mode == SolverMode::vble_zh;
  if (zh && !p.has_hyper()) throw std::invalid_argument("objective: vble-zh mode needs hyper-latent parameters");
  const std::size_t n = map ? 1 : cfg.samples_per_iteration;
  const double inv_n = 1.0 / static_cast<double>(n);

  Tensor z = map ? p.z_bar
                 : reparameterize(p.z_bar, p.rho, draw_noise(cfg.family, p.z_bar.shape(), n, cfg.antithetic, rng));
  Tensor h;
  if (zh) h = reparameterize(p.h_bar, p.rho_h, draw_noise(cfg.family, p.h_bar.shape(), n, cfg.antithetic, rng));

  ObjectiveValue out;
  Tensor total = Tensor::scalar(0.0);
  if (problem) {
    Tensor data = guarded("data", [&] { return scale(neg_log_likelihood(*problem, model.decoder.decode(z)), inv_n); });
    out.data = data.item();
    total = total + data;
  }
  Tensor prior = guarded("prior", [&] {
    Tensor lp = zh ? model.prior.log_prob_given_hyper(z, h) : model.prior.log_prob(z, p.z_bar);
    return scale(lp, -cfg.lambda * inv_n);
  });
  out.prior = prior.item();
  total = total + prior;
  if (!map) {
    const double w = cfg.entropy_weighting == EntropyWeighting::tempered ? cfg.lambda : 1.0;
    Tensor ent = guarded("entropy", [&] { return scale(entropy_term(p), w); });
    out.entropy = ent.item();
    total = total + ent;
  }
  out.total = total;
  return out;
}

Tensor fresh_leaf(const Tensor& t, bool requires_grad) { return Tensor(t.shape(), t.vector(), requires_grad); }

void accumulate(std::vector<double>& acc, const Tensor& t) {
  if (acc.empty()) acc.assign(t.size(), 0.0);
  for (std::size_t i = 0; i < t.size(); ++i) acc[i] += t[i];
}

Tensor averaged(const std::vector<double>& acc, const Tensor& like, double count) {
  std::vector<double> v(acc);
  for (double& x : v) x /= count;
  return Tensor(like.shape(), std::move(v));
}

VariationalParams optimize(const VariationalParams& start, const ObservationProblem* problem,
                           const GenerativeModel& model, const SolverConfig& cfg, std::vector<double>* trace) {
  cfg.validate();
  const bool map = cfg.mode == SolverMode::map_z;
  VariationalParams p;
  p.z_bar = fresh_leaf(start.z_bar, true);
  p.rho = fresh_leaf(start.rho, !map);
  std::vector<Tensor> leaves{p.z_bar};
  if (!map) leaves.push_back(p.rho);
  if (cfg.mode == SolverMode::vble_zh) {
    p.h_bar = fresh_leaf(start.h_bar, true);
    p.rho_h = fresh_leaf(start.rho_h, true);
    leaves.push_back(p.h_bar);
    leaves.push_back(p.rho_h);
  }
  Adam adam(leaves, {.learning_rate = cfg.learning_rate});
  Rng rng(derive_seed(cfg.seed, 0));

  std::size_t tail = static_cast<std::size_t>(std::llround(cfg.average_tail * static_cast<double>(cfg.iterations)));
  if (cfg.average_tail > 0) tail = std::clamp<std::size_t>(tail, 1, cfg.iterations);
  std::vector<std::vector<double>> sums(leaves.size());

  if (trace) trace->reserve(trace->size() + cfg.iterations);
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    try {
      ObjectiveValue v = evaluate(p, problem, model, cfg, rng);
      if (trace) trace->push_back(v.total.item());
      adam.step(backward(v.total));
    } catch (const NumericError& e) {
      throw NumericError("iteration " + std::to_string(it) + ": " + e.what());
    }
    if (tail > 0 && it + tail >= cfg.iterations) {
      for (std::size_t k = 0; k < leaves.size(); ++k) accumulate(sums[k], leaves[k]);
    }
  }

  VariationalParams out = p.detached();
  if (tail > 0) {
    const double count = static_cast<double>(tail);
    out.z_bar = averaged(sums[0], p.z_bar, count);
    std::size_t k = 1;
    if (!map) out.rho = averaged(sums[k++], p.rho, count);
    if (cfg.mode == SolverMode::vble_zh) {
      out.h_bar = averaged(sums[k++], p.h_bar, count);
      out.rho_h = averaged(sums[k++], p.rho_h, count);
    }
  }
  return out;
}

constexpr std::size_t kDecodeChunk = 16;

}  // namespace

ObjectiveValue objective(const VariationalParams& params, const ObservationProblem& problem,
                         const GenerativeModel& model, const SolverConfig& config, Rng& rng) {
  return evaluate(params, &problem, model, config, rng);
}

ObjectiveValue prior_objective(const VariationalParams& params, const GenerativeModel& model,
                               const SolverConfig& config, Rng& rng) {
  return evaluate(params, nullptr, model, config, rng);
}

RestorationOutput run(const ObservationProblem& problem, const GenerativeModel& model, const SolverConfig& config) {
  config.validate();
  problem.validate();
  RestorationOutput out;
  out.family = config.family;
  out.mode = config.mode;
  out.params = optimize(initial_params(problem, model, config), &problem, model, config, &out.loss_trace);
  out.mmse_z = mmse_z(model, out.params);
  out.samples = sample_posterior(model, out.params, config.family, config.mode, config.posterior_samples,
                                 derive_seed(config.seed, 1));
  out.mmse_x = config.mode == SolverMode::map_z ? out.mmse_z : batch_mean(out.samples.images);
  return out;
}

VariationalParams run_prior_only(const VariationalParams& start, const GenerativeModel& model,
                                 const SolverConfig& config, std::vector<double>* trace) {
  return optimize(start, nullptr, model, config, trace);
}

Tensor mmse_z(const GenerativeModel& model, const VariationalParams& params) {
  return model.decoder.decode(params.z_bar.detach()).detach();
}

PosteriorSamples sample_posterior(const GenerativeModel& model, const VariationalParams& params, Family family,
                                  SolverMode mode, std::size_t n, std::uint64_t seed, std::size_t threads) {
  if (n < 1) throw std::invalid_argument("sample_posterior: n must be >= 1");
  const Shape& ls = params.z_bar.shape();
  const std::size_t per = params.z_bar.size();
  const Tensor a = params.spread();
  const bool degenerate = mode == SolverMode::map_z;

  std::vector<double> latents(n * per);
  std::vector<double> images;
  Shape image_shape;
  std::vector<Tensor> decoded((n + kDecodeChunk - 1) / kDecodeChunk);

  for (std::size_t i = 0; i < n; ++i) {
    double* dst = latents.data() + i * per;
    if (degenerate) {
      std::copy(params.z_bar.values().begin(), params.z_bar.values().end(), dst);
      continue;
    }
    Rng rng(derive_seed(seed, i));
    for (std::size_t k = 0; k < per; ++k) {
      const double eps = family == Family::uniform ? rng.uniform(-0.5, 0.5) : rng.normal();
      dst[k] = params.z_bar[k] + a[k] * eps;
    }
  }

  parallel_for(decoded.size(), threads == 0 ? worker_threads() : threads, [&](std::size_t c) {
    const std::size_t lo = c * kDecodeChunk, hi = std::min(n, lo + kDecodeChunk);
    Tensor z(batched(hi - lo, Shape(ls.begin() + 1, ls.end())),
             std::vector<double>(latents.begin() + lo * per, latents.begin() + hi * per));
    decoded[c] = model.decoder.decode(z).detach();
  });

  for (const auto& d : decoded) {
    if (image_shape.empty()) image_shape = d.shape();
    images.insert(images.end(), d.values().begin(), d.values().end());
  }
  image_shape[0] = n;
  Shape lshape = ls;
  lshape[0] = n;
  return {Tensor(std::move(lshape), std::move(latents)), Tensor(std::move(image_shape), std::move(images))};
}

Tensor batch_mean(const Tensor& images) {
  const std::size_t n = images.extent(0), per = images.size() / n;
  // Running mean: identical samples reproduce their value exactly.
  std::vector<double> m(per, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < per; ++k) m[k] += (images[i * per + k] - m[k]) / static_cast<double>(i + 1);
  Shape s = images.shape();
  s[0] = 1;
  return Tensor(std::move(s), std::move(m));
}

Tensor mmse_x(const GenerativeModel& model, const VariationalParams& params, Family family, SolverMode mode,
              std::size_t n, std::uint64_t seed) {
  if (mode == SolverMode::map_z) return mmse_z(model, params);
  return batch_mean(sample_posterior(model, params, family, mode, n, seed).images);
}

}  // namespace vble
