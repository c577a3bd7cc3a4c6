#include "vble/models.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "vble/ops.hpp"

namespace vble {

namespace {

template <typename E>
E parse_enum(const std::string& s, std::initializer_list<std::pair<const char*, E>> table, const char* what) {
  for (const auto& [name, value] : table) {
    if (s == name) return value;
  }
  throw std::invalid_argument(std::string("unknown ") + what + " '" + s + "'");
}

void add_param(std::vector<NamedTensor>& params, std::string name, Shape shape, Rng& rng, double stddev,
               double fill = 0.0) {
  Tensor t = stddev > 0 ? rng.normal_tensor(shape, stddev) : Tensor::full(shape, fill);
  params.push_back({std::move(name), t});
}

void add_gdn(std::vector<NamedTensor>& params, const std::string& prefix, std::size_t c) {
  params.push_back({prefix + ".beta_log", Tensor::zeros({c})});
  std::vector<double> g(c * c, std::sqrt(1e-3));
  for (std::size_t i = 0; i < c; ++i) g[i * c + i] = std::sqrt(0.1);
  params.push_back({prefix + ".gamma_sqrt", Tensor({c, c}, std::move(g))});
}

const Tensor& get(const std::vector<NamedTensor>& params, const std::string& name) {
  for (const auto& p : params) {
    if (p.name == name) return p.tensor;
  }
  throw std::out_of_range("model has no parameter '" + name + "'");
}

Tensor channel_bias(const Tensor& x, const Tensor& bias) {
  return x + reshape(bias, {1, bias.size(), 1, 1});
}

Tensor conv_block(const Tensor& x, const std::vector<NamedTensor>& p, const std::string& name, std::size_t stride) {
  return channel_bias(conv2d(x, get(p, name + ".weight"), stride, Padding::zero), get(p, name + ".bias"));
}

Tensor deconv_block(const Tensor& x, const std::vector<NamedTensor>& p, const std::string& name) {
  return channel_bias(conv2d_transpose(x, get(p, name + ".weight"), 2), get(p, name + ".bias"));
}

Tensor gdn_block(const Tensor& x, const std::vector<NamedTensor>& p, const std::string& name, bool inverse) {
  return gdn(x, exp(get(p, name + ".beta_log")), square(get(p, name + ".gamma_sqrt")), inverse);
}

Tensor dense(const Tensor& x, const std::vector<NamedTensor>& p, const std::string& name) {
  const Tensor& w = get(p, name + ".weight");
  const Tensor& b = get(p, name + ".bias");
  return matmul(x, w) + reshape(b, {1, b.size()});
}

void check_batched(const char* who, const Tensor& t, const Shape& expected) {
  if (t.dim() != expected.size() + 1 || !std::equal(expected.begin(), expected.end(), t.shape().begin() + 1)) {
    throw ShapeError(std::string(who) + ": expected [N," + to_string(expected).substr(1) + ", got " +
                     to_string(t.shape()));
  }
}

Tensor flatten(const Tensor& x) { return reshape(x, {x.extent(0), x.size() / x.extent(0)}); }

}  // namespace

std::string to_string(ModelVariant v) {
  switch (v) {
    case ModelVariant::linear: return "linear";
    case ModelVariant::mlp: return "mlp";
    case ModelVariant::conv_gdn: return "conv-gdn";
  }
  return "?";
}

std::string to_string(ModelFamily f) { return f == ModelFamily::cae ? "cae" : "vae"; }

std::string to_string(PriorKind p) {
  switch (p) {
    case PriorKind::standard_normal: return "standard-normal";
    case PriorKind::factorized: return "factorized-learned";
    case PriorKind::scale_hyperprior: return "scale-hyperprior";
  }
  return "?";
}

ModelVariant parse_model_variant(const std::string& s) {
  return parse_enum<ModelVariant>(
      s, {{"linear", ModelVariant::linear}, {"mlp", ModelVariant::mlp}, {"conv-gdn", ModelVariant::conv_gdn}},
      "model variant");
}

ModelFamily parse_model_family(const std::string& s) {
  return parse_enum<ModelFamily>(s, {{"cae", ModelFamily::cae}, {"vae", ModelFamily::vae}}, "model family");
}

PriorKind parse_prior_kind(const std::string& s) {
  return parse_enum<PriorKind>(s,
                               {{"standard-normal", PriorKind::standard_normal},
                                {"factorized-learned", PriorKind::factorized},
                                {"scale-hyperprior", PriorKind::scale_hyperprior}},
                               "prior variant");
}

Shape batched(std::size_t n, const Shape& shape) {
  Shape out{n};
  out.insert(out.end(), shape.begin(), shape.end());
  return out;
}

Shape Architecture::image_shape() const { return {channels, height, width}; }

Shape Architecture::latent_shape() const {
  if (variant == ModelVariant::conv_gdn) return {latent_channels, height / 8, width / 8};
  return {latent_dim};
}

Shape Architecture::hyper_shape() const {
  if (variant != ModelVariant::conv_gdn) return {};
  return {hyper_channels, height / 16, width / 16};
}

void Architecture::validate() const {
  if (channels == 0 || height == 0 || width == 0) throw std::invalid_argument("architecture: empty image shape");
  if (variant == ModelVariant::conv_gdn) {
    if (kernel % 2 == 0) throw std::invalid_argument("architecture: conv kernel must be odd");
    const std::size_t step = prior == PriorKind::scale_hyperprior ? 16 : 8;
    if (height % step || width % step) {
      throw std::invalid_argument("architecture: image extent must be a multiple of " + std::to_string(step));
    }
    if (prior == PriorKind::scale_hyperprior && numel(hyper_shape()) >= numel(latent_shape())) {
      throw std::invalid_argument("architecture: hyper-latent must be smaller than the latent");
    }
  } else {
    if (latent_dim == 0) throw std::invalid_argument("architecture: latent_dim must be positive");
    if (prior == PriorKind::scale_hyperprior) {
      throw std::invalid_argument("architecture: scale-hyperprior requires the conv-gdn variant");
    }
  }
}

nlohmann::json Architecture::to_json() const {
  return {{"variant", to_string(variant)},
          {"family", to_string(family)},
          {"prior", to_string(prior)},
          {"channels", channels},
          {"height", height},
          {"width", width},
          {"latent_dim", latent_dim},
          {"hidden", hidden},
          {"width1", width1},
          {"width2", width2},
          {"latent_channels", latent_channels},
          {"kernel", kernel},
          {"hyper_hidden", hyper_hidden},
          {"hyper_channels", hyper_channels},
          {"latent_shape", latent_shape()},
          {"image_shape", image_shape()}};
}

Architecture Architecture::from_json(const nlohmann::json& j) {
  static const char* known[] = {"variant", "family",          "prior",  "channels",     "height",
                                "width",   "latent_dim",      "hidden", "width1",       "width2",
                                "latent_channels", "kernel",  "hyper_hidden", "hyper_channels",
                                "latent_shape",    "image_shape"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(std::begin(known), std::end(known), it.key()) == std::end(known)) {
      throw std::invalid_argument("architecture: unknown key '" + it.key() + "'");
    }
  }
  Architecture a;
  if (j.contains("variant")) a.variant = parse_model_variant(j.at("variant").get<std::string>());
  if (j.contains("family")) a.family = parse_model_family(j.at("family").get<std::string>());
  if (j.contains("prior")) a.prior = parse_prior_kind(j.at("prior").get<std::string>());
  auto read = [&](const char* key, std::size_t& field) {
    if (j.contains(key)) field = j.at(key).get<std::size_t>();
  };
  read("channels", a.channels);
  read("height", a.height);
  read("width", a.width);
  read("latent_dim", a.latent_dim);
  read("hidden", a.hidden);
  read("width1", a.width1);
  read("width2", a.width2);
  read("latent_channels", a.latent_channels);
  read("kernel", a.kernel);
  read("hyper_hidden", a.hyper_hidden);
  read("hyper_channels", a.hyper_channels);
  if (j.contains("latent_shape") && j.at("latent_shape").get<Shape>() != a.latent_shape()) {
    throw std::invalid_argument("architecture: declared latent_shape " + to_string(j.at("latent_shape").get<Shape>()) +
                                " disagrees with layer sizes " + to_string(a.latent_shape()));
  }
  a.validate();
  return a;
}

// ---------------------------------------------------------------------------

Encoder::Encoder(const Architecture& arch, Rng& rng) : arch_(arch) {
  arch.validate();
  const std::size_t C = arch.channels, K = arch.kernel;
  const std::size_t pixels = numel(arch.image_shape());
  const bool vae = arch.family == ModelFamily::vae;
  switch (arch.variant) {
    case ModelVariant::linear:
      add_param(params_, "linear.weight", {pixels, arch.latent_dim}, rng, 1.0 / std::sqrt(double(pixels)));
      add_param(params_, "linear.bias", {arch.latent_dim}, rng, 0.0);
      if (vae) {
        add_param(params_, "linear_logstd.weight", {pixels, arch.latent_dim}, rng, 0.01 / std::sqrt(double(pixels)));
        add_param(params_, "linear_logstd.bias", {arch.latent_dim}, rng, 0.0, -1.0);
      }
      break;
    case ModelVariant::mlp:
      add_param(params_, "fc0.weight", {pixels, arch.hidden}, rng, 1.0 / std::sqrt(double(pixels)));
      add_param(params_, "fc0.bias", {arch.hidden}, rng, 0.0);
      add_param(params_, "fc1.weight", {arch.hidden, arch.latent_dim}, rng, 1.0 / std::sqrt(double(arch.hidden)));
      add_param(params_, "fc1.bias", {arch.latent_dim}, rng, 0.0);
      if (vae) {
        add_param(params_, "fc1_logstd.weight", {arch.hidden, arch.latent_dim}, rng,
                  0.01 / std::sqrt(double(arch.hidden)));
        add_param(params_, "fc1_logstd.bias", {arch.latent_dim}, rng, 0.0, -1.0);
      }
      break;
    case ModelVariant::conv_gdn: {
      const std::size_t w1 = arch.width1, w2 = arch.width2, L = arch.latent_channels;
      add_param(params_, "conv0.weight", {w1, C, K, K}, rng, 1.0 / std::sqrt(double(C * K * K)));
      add_param(params_, "conv0.bias", {w1}, rng, 0.0);
      add_gdn(params_, "gdn0", w1);
      add_param(params_, "conv1.weight", {w2, w1, K, K}, rng, 1.0 / std::sqrt(double(w1 * K * K)));
      add_param(params_, "conv1.bias", {w2}, rng, 0.0);
      add_gdn(params_, "gdn1", w2);
      add_param(params_, "conv2.weight", {L, w2, K, K}, rng, 1.0 / std::sqrt(double(w2 * K * K)));
      add_param(params_, "conv2.bias", {L}, rng, 0.0);
      if (vae) {
        add_param(params_, "conv2_logstd.weight", {L, w2, K, K}, rng, 0.01 / std::sqrt(double(w2 * K * K)));
        add_param(params_, "conv2_logstd.bias", {L}, rng, 0.0, -1.0);
      }
      break;
    }
  }
}

Tensor Encoder::trunk(const Tensor& x) const {
  check_batched("encode", x, arch_.image_shape());
  switch (arch_.variant) {
    case ModelVariant::linear: return flatten(x);
    case ModelVariant::mlp: return softplus(dense(flatten(x), params_, "fc0"));
    case ModelVariant::conv_gdn: {
      Tensor h = gdn_block(conv_block(x, params_, "conv0", 2), params_, "gdn0", false);
      return gdn_block(conv_block(h, params_, "conv1", 2), params_, "gdn1", false);
    }
  }
  throw std::logic_error("encode: unknown variant");
}

Tensor Encoder::head(const Tensor& f, std::size_t which) const {
  const std::string suffix = which == 0 ? "" : "_logstd";
  switch (arch_.variant) {
    case ModelVariant::linear: return dense(f, params_, "linear" + suffix);
    case ModelVariant::mlp: return dense(f, params_, "fc1" + suffix);
    case ModelVariant::conv_gdn: return conv_block(f, params_, "conv2" + suffix, 2);
  }
  throw std::logic_error("encode: unknown variant");
}

Tensor Encoder::encode(const Tensor& x) const { return head(trunk(x), 0); }

std::pair<Tensor, Tensor> Encoder::encode_gaussian(const Tensor& x) const {
  if (arch_.family != ModelFamily::vae) throw std::logic_error("encode_gaussian: model is not a VAE");
  const Tensor f = trunk(x);
  return {head(f, 0), head(f, 1)};
}

std::vector<NamedTensor> Encoder::parameters() const { return params_; }

// ---------------------------------------------------------------------------

Decoder::Decoder(const Architecture& arch, Rng& rng) : arch_(arch) {
  arch.validate();
  const std::size_t C = arch.channels, K = arch.kernel;
  const std::size_t pixels = numel(arch.image_shape());
  switch (arch.variant) {
    case ModelVariant::linear:
      add_param(params_, "linear.weight", {arch.latent_dim, pixels}, rng, 1.0 / std::sqrt(double(arch.latent_dim)));
      add_param(params_, "linear.bias", {pixels}, rng, 0.0, 0.5);
      break;
    case ModelVariant::mlp:
      add_param(params_, "fc0.weight", {arch.latent_dim, arch.hidden}, rng, 1.0 / std::sqrt(double(arch.latent_dim)));
      add_param(params_, "fc0.bias", {arch.hidden}, rng, 0.0);
      add_param(params_, "fc1.weight", {arch.hidden, pixels}, rng, 1.0 / std::sqrt(double(arch.hidden)));
      add_param(params_, "fc1.bias", {pixels}, rng, 0.0, 0.5);
      break;
    case ModelVariant::conv_gdn: {
      const std::size_t w1 = arch.width1, w2 = arch.width2, L = arch.latent_channels;
      // Transposed kernels are [in, out, K, K]; each input tap spreads over K*K/4 outputs.
      add_param(params_, "deconv0.weight", {L, w2, K, K}, rng, 2.0 / std::sqrt(double(L * K * K)));
      add_param(params_, "deconv0.bias", {w2}, rng, 0.0);
      add_gdn(params_, "igdn0", w2);
      add_param(params_, "deconv1.weight", {w2, w1, K, K}, rng, 2.0 / std::sqrt(double(w2 * K * K)));
      add_param(params_, "deconv1.bias", {w1}, rng, 0.0);
      add_gdn(params_, "igdn1", w1);
      add_param(params_, "deconv2.weight", {w1, C, K, K}, rng, 2.0 / std::sqrt(double(w1 * K * K)));
      add_param(params_, "deconv2.bias", {C}, rng, 0.0, 0.5);
      break;
    }
  }
  if (arch.family == ModelFamily::vae) log_gamma_ = Tensor::scalar(std::log(0.1));
}

Tensor Decoder::decode(const Tensor& z) const {
  check_batched("decode", z, arch_.latent_shape());
  const std::size_t n = z.extent(0);
  switch (arch_.variant) {
    case ModelVariant::linear: return reshape(dense(z, params_, "linear"), batched(n, arch_.image_shape()));
    case ModelVariant::mlp:
      return reshape(dense(softplus(dense(z, params_, "fc0")), params_, "fc1"), batched(n, arch_.image_shape()));
    case ModelVariant::conv_gdn: {
      Tensor h = gdn_block(deconv_block(z, params_, "deconv0"), params_, "igdn0", true);
      h = gdn_block(deconv_block(h, params_, "deconv1"), params_, "igdn1", true);
      return deconv_block(h, params_, "deconv2");
    }
  }
  throw std::logic_error("decode: unknown variant");
}

double Decoder::variance(double alpha) const {
  if (arch_.family == ModelFamily::vae) return std::exp(2.0 * log_gamma_.item());
  return 1.0 / (2.0 * alpha * std::log(2.0));
}

std::vector<NamedTensor> Decoder::parameters() const {
  auto out = params_;
  if (arch_.family == ModelFamily::vae) out.push_back({"log_gamma", log_gamma_});
  return out;
}

// ---------------------------------------------------------------------------

HyperNetwork::HyperNetwork(const Architecture& arch, Rng& rng) : arch_(arch) {
  if (arch.variant != ModelVariant::conv_gdn) throw std::invalid_argument("hyper network requires conv-gdn latents");
  const std::size_t L = arch.latent_channels, hh = arch.hyper_hidden, hc = arch.hyper_channels;
  add_param(params_, "h_enc0.weight", {hh, L, 3, 3}, rng, 1.0 / std::sqrt(double(L * 9)));
  add_param(params_, "h_enc0.bias", {hh}, rng, 0.0);
  add_param(params_, "h_enc1.weight", {hc, hh, 3, 3}, rng, 1.0 / std::sqrt(double(hh * 9)));
  add_param(params_, "h_enc1.bias", {hc}, rng, 0.0);
  add_param(params_, "h_dec0.weight", {hc, hh, 3, 3}, rng, 2.0 / std::sqrt(double(hc * 9)));
  add_param(params_, "h_dec0.bias", {hh}, rng, 0.0);
  add_param(params_, "h_mu.weight", {L, hh, 3, 3}, rng, 0.1 / std::sqrt(double(hh * 9)));
  add_param(params_, "h_mu.bias", {L}, rng, 0.0);
  add_param(params_, "h_scale.weight", {L, hh, 3, 3}, rng, 0.1 / std::sqrt(double(hh * 9)));
  add_param(params_, "h_scale.bias", {L}, rng, 0.0);
}

Tensor HyperNetwork::encode(const Tensor& z_bar) const {
  check_batched("hyper encode", z_bar, arch_.latent_shape());
  return conv_block(softplus(conv_block(z_bar, params_, "h_enc0", 1)), params_, "h_enc1", 2);
}

std::pair<Tensor, Tensor> HyperNetwork::decode(const Tensor& h) const {
  check_batched("hyper decode", h, arch_.hyper_shape());
  const Tensor f = softplus(channel_bias(conv2d_transpose(h, get(params_, "h_dec0.weight"), 2),
                                         get(params_, "h_dec0.bias")));
  Tensor mu = conv_block(f, params_, "h_mu", 1);
  Tensor sigma = add_scalar(exp(conv_block(f, params_, "h_scale", 1)), kScaleFloor);
  return {std::move(mu), std::move(sigma)};
}

std::vector<NamedTensor> HyperNetwork::parameters() const { return params_; }

Tensor find_parameter(const std::vector<NamedTensor>& params, const std::string& name) { return get(params, name); }

void set_trainable(const std::vector<NamedTensor>& params, bool trainable) {
  for (const auto& p : params) {
    Tensor t = p.tensor;
    t.set_requires_grad(trainable);
  }
}

}  // namespace vble
