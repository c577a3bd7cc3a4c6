#pragma once

#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "vble/random.hpp"
#include "vble/tensor.hpp"

namespace vble {

enum class ModelVariant { linear, mlp, conv_gdn };
enum class ModelFamily { cae, vae };
enum class PriorKind { standard_normal, factorized, scale_hyperprior };

std::string to_string(ModelVariant v);
std::string to_string(ModelFamily f);
std::string to_string(PriorKind p);
ModelVariant parse_model_variant(const std::string& s);
ModelFamily parse_model_family(const std::string& s);
PriorKind parse_prior_kind(const std::string& s);

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Layer sizes of an autoencoder. Image and latent shapes exclude the batch
/// axis; every network consumes and produces batched tensors.
struct Architecture {
  ModelVariant variant = ModelVariant::conv_gdn;
  ModelFamily family = ModelFamily::cae;
  PriorKind prior = PriorKind::scale_hyperprior;

  std::size_t channels = 1;
  std::size_t height = 32;
  std::size_t width = 32;

  // linear / mlp
  std::size_t latent_dim = 16;
  std::size_t hidden = 64;

  // conv-gdn: three stride-2 stages.
  std::size_t width1 = 32;
  std::size_t width2 = 64;
  std::size_t latent_channels = 8;
  std::size_t kernel = 5;
  std::size_t hyper_hidden = 16;
  std::size_t hyper_channels = 4;

  Shape image_shape() const;
  Shape latent_shape() const;
  Shape hyper_shape() const;
  void validate() const;

  nlohmann::json to_json() const;
  static Architecture from_json(const nlohmann::json& j);
};

/// Prepends a batch extent.
Shape batched(std::size_t n, const Shape& shape);

class Encoder {
 public:
  Encoder() = default;
  Encoder(const Architecture& arch, Rng& rng);

  /// Latent location for a batch of images.
  Tensor encode(const Tensor& x) const;
  /// Location and log standard deviation (VAE family only).
  std::pair<Tensor, Tensor> encode_gaussian(const Tensor& x) const;

  std::vector<NamedTensor> parameters() const;

 private:
  Tensor trunk(const Tensor& x) const;
  Tensor head(const Tensor& features, std::size_t which) const;

  Architecture arch_;
  std::vector<NamedTensor> params_;
};

class Decoder {
 public:
  Decoder() = default;
  Decoder(const Architecture& arch, Rng& rng);

  Tensor decode(const Tensor& z) const;

  /// Variance of p(x|z): 1/(2 alpha log 2) for a CAE, exp(2 log_gamma) for a VAE.
  double variance(double alpha) const;
  /// Learned global log std of the Gaussian decoder (VAE family).
  const Tensor& log_gamma() const { return log_gamma_; }

  std::vector<NamedTensor> parameters() const;

 private:
  Architecture arch_;
  std::vector<NamedTensor> params_;
  Tensor log_gamma_;
};

/// Hyper-encoder (latent -> hyper-latent) and hyper-decoder (hyper-latent ->
/// per-coefficient mean and scale of the latent density).
class HyperNetwork {
 public:
  static constexpr double kScaleFloor = 1e-4;

  HyperNetwork() = default;
  HyperNetwork(const Architecture& arch, Rng& rng);

  Tensor encode(const Tensor& z_bar) const;
  /// (mu, sigma) with sigma = exp(raw) + kScaleFloor.
  std::pair<Tensor, Tensor> decode(const Tensor& h) const;
  std::pair<Tensor, Tensor> round_trip(const Tensor& z_bar) const { return decode(encode(z_bar)); }

  std::vector<NamedTensor> parameters() const;

 private:
  Architecture arch_;
  std::vector<NamedTensor> params_;
};

Tensor find_parameter(const std::vector<NamedTensor>& params, const std::string& name);
void set_trainable(const std::vector<NamedTensor>& params, bool trainable);

}  // namespace vble
