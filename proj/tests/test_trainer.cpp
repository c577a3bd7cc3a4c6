#include <cmath>
#include <filesystem>
#include <numbers>

#include "doctest.h"
#include "support/gradcheck.hpp"
#include "vble/image_io.hpp"
#include "vble/trainer.hpp"

using namespace vble;
namespace fs = std::filesystem;

namespace {

Architecture linear_arch(ModelFamily family, PriorKind prior, std::size_t side = 8) {
  Architecture a;
  a.variant = ModelVariant::linear;
  a.family = family;
  a.prior = prior;
  a.height = a.width = side;
  a.latent_dim = 6;
  return a;
}

Architecture small_conv_arch() {
  Architecture a;
  a.height = a.width = 16;
  a.width1 = 4;
  a.width2 = 4;
  a.latent_channels = 3;
  a.hyper_hidden = 3;
  a.hyper_channels = 2;
  a.kernel = 3;
  return a;
}

std::vector<Tensor> model_weights(const GenerativeModel& m) {
  std::vector<Tensor> out;
  for (const auto& p : m.parameters()) out.push_back(p.tensor);
  return out;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("vble_trainer_" + name);
  fs::remove_all(p);
  return p;
}

TrainingConfig tiny_config(const fs::path& data) {
  TrainingConfig c;
  c.arch = linear_arch(ModelFamily::cae, PriorKind::factorized);
  c.alpha = 1.0;
  c.epochs = 6;
  c.batch_size = 4;
  c.learning_rate = 1e-2;
  c.dataset = data.string();
  c.patch_size = 8;
  c.holdout = 4;
  c.seed = 5;
  return c;
}

fs::path constant_images(const std::string& name, std::size_t count) {
  const fs::path dir = scratch(name);
  for (std::size_t i = 0; i < count; ++i) {
    char file[32];
    std::snprintf(file, sizeof file, "c%02zu.pgm", i);
    write_image(dir / file, Tensor::full({1, 1, 16, 16}, 0.4 + 0.01 * double(i % 3)));
  }
  return dir;
}

}  // namespace

TEST_CASE("quantization noise stays in the unit bin") {
  Rng rng(3);
  const Tensor u = quantization_noise({4000}, rng);
  double m = 0;
  for (double v : u.values()) {
    CHECK(v >= -0.5);
    CHECK(v < 0.5);
    m += v;
  }
  CHECK(std::abs(m / 4000) < 0.02);
}

TEST_CASE("synthetic textures are bounded and indexable") {
  const auto all = synthetic_textures(6, 3, 16, 9);
  const auto tail = synthetic_textures(2, 3, 16, 9, 4);
  for (const auto& t : all) {
    CHECK(t.shape() == Shape{1, 3, 16, 16});
    for (double v : t.values()) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
  CHECK(all[4].vector() == tail[0].vector());
  CHECK(all[5].vector() == tail[1].vector());
  CHECK(all[0].vector() != all[1].vector());
}

TEST_CASE("dataset batches and shuffles") {
  const Dataset d(synthetic_textures(5, 1, 8, 1));
  const Tensor b = d.batch({3, 1});
  CHECK(b.shape() == Shape{2, 1, 8, 8});
  CHECK(b[0] == d.item(3)[0]);
  CHECK(b[64] == d.item(1)[0]);
  auto p = d.shuffled(4);
  CHECK(p == d.shuffled(4));
  std::sort(p.begin(), p.end());
  CHECK(p == std::vector<std::size_t>{0, 1, 2, 3, 4});
  CHECK_THROWS_AS(Dataset({Tensor::zeros({1, 1, 2, 2}), Tensor::zeros({1, 1, 3, 3})}), ShapeError);
}

TEST_CASE("cae loss combines weighted distortion and rate") {
  const auto m = GenerativeModel::create(linear_arch(ModelFamily::cae, PriorKind::factorized), 0.02, 4);
  const Tensor x = Dataset(synthetic_textures(3, 1, 8, 2)).batch({0, 1, 2});
  Rng a(7);
  const LossTerms t = cae_loss(m, x, a);
  CHECK(t.total.item() == doctest::Approx(255.0 * 255.0 * 0.02 * t.distortion + t.rate).epsilon(1e-12));

  Rng b(7);
  const Tensor z_bar = m.encoder.encode(x);
  const Tensor z = z_bar + quantization_noise(z_bar.shape(), b);
  const Tensor r = m.decoder.decode(z) - x;
  CHECK(t.distortion == doctest::Approx(inner_product(r, r) / double(r.size())).epsilon(1e-12));
  const double bits = -m.prior.log_prob(z).item() / std::numbers::ln2;
  CHECK(t.rate == doctest::Approx(bits / (3 * 64)).epsilon(1e-12));
}

TEST_CASE("vae loss matches the closed-form negative ELBO") {
  const auto m = GenerativeModel::create(linear_arch(ModelFamily::vae, PriorKind::standard_normal), 0.01, 2);
  const Tensor x = Dataset(synthetic_textures(2, 1, 8, 3)).batch({0, 1});
  Rng a(11);
  const LossTerms t = vae_loss(m, x, a);

  Rng b(11);
  const auto [mu, log_std] = m.encoder.encode_gaussian(x);
  const Tensor eps = b.normal_tensor(mu.shape());
  double kl = 0;
  std::vector<double> z(mu.size());
  for (std::size_t k = 0; k < mu.size(); ++k) {
    const double s = std::exp(log_std[k]);
    kl += 0.5 * (mu[k] * mu[k] + s * s - 1) - log_std[k];
    z[k] = mu[k] + s * eps[k];
  }
  const Tensor r = m.decoder.decode(Tensor(mu.shape(), z)) - x;
  const double gamma = std::exp(m.decoder.log_gamma().item());
  const double n = double(x.size());
  const double expected = (inner_product(r, r) / (2 * gamma * gamma) + n * std::log(gamma) + kl) / 2;
  CHECK(t.total.item() == doctest::Approx(expected).epsilon(1e-12));
  CHECK(t.rate == doctest::Approx(kl / (std::numbers::ln2 * 128)).epsilon(1e-12));
}

TEST_CASE("training losses have finite-difference gradients") {
  SUBCASE("cae with a factorized prior") {
    const auto m = GenerativeModel::create(linear_arch(ModelFamily::cae, PriorKind::factorized), 0.05, 6);
    const Tensor x = Dataset(synthetic_textures(2, 1, 8, 4)).batch({0, 1});
    const auto res = testing::check_parameter_gradient(
        [&] {
          Rng rng(2);
          return cae_loss(m, x, rng).total;
        },
        model_weights(m), 1, 12);
    CHECK(res.max_rel_err < 1e-5);
  }
  SUBCASE("cae with a scale hyperprior") {
    // Hyper gradients are small next to the loss; a wider step limits rounding.
    const auto m = GenerativeModel::create(small_conv_arch(), 0.05, 6);
    const Tensor x = Dataset(synthetic_textures(2, 1, 16, 4)).batch({0, 1});
    const auto res = testing::check_parameter_gradient(
        [&] {
          Rng rng(2);
          return cae_loss(m, x, rng).total;
        },
        model_weights(m), 1, 4, 1e-4);
    CHECK(res.max_rel_err < 1e-3);
  }
  SUBCASE("vae including the decoder scale") {
    const auto m = GenerativeModel::create(linear_arch(ModelFamily::vae, PriorKind::standard_normal), 0.01, 8);
    const Tensor x = Dataset(synthetic_textures(2, 1, 8, 5)).batch({0, 1});
    const auto res = testing::check_parameter_gradient(
        [&] {
          Rng rng(3);
          return vae_loss(m, x, rng).total;
        },
        model_weights(m), 1, 12);
    CHECK(res.max_rel_err < 1e-5);
  }
}

TEST_CASE("training config json round trip and validation") {
  TrainingConfig c;
  c.alpha = 0.05;
  c.epochs = 3;
  const TrainingConfig back = TrainingConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  auto j = c.to_json();
  j["epoch"] = 2;
  CHECK_THROWS_WITH_AS(TrainingConfig::from_json(j), doctest::Contains("training.epoch"), std::invalid_argument);
  j = c.to_json();
  j["batch_size"] = 0;
  CHECK_THROWS_WITH_AS(TrainingConfig::from_json(j), doctest::Contains("batch_size"), std::invalid_argument);
  j = c.to_json();
  j["patch_size"] = 16;
  CHECK_THROWS_WITH_AS(TrainingConfig::from_json(j), doctest::Contains("patch_size"), std::invalid_argument);
}

TEST_CASE("training fits constant images and is reproducible") {
  const fs::path data = constant_images("const", 6);
  TrainingConfig c = tiny_config(data);
  c.epochs = 150;
  c.holdout = 8;
  c.checkpoint_every = 50;
  const fs::path out = scratch("const_out");
  const TrainingResult r = train(c, out);
  CHECK(r.epoch_loss.size() == 150);
  CHECK(r.heldout_mse < 1e-4);
  for (std::size_t e = 1; e < 5; ++e) CHECK(r.epoch_loss[e] <= r.epoch_loss[e - 1]);

  const GenerativeModel loaded = load_checkpoint(out);
  CHECK(loaded.alpha == 1.0);
  CHECK(loaded.arch.family == ModelFamily::cae);
  CHECK(loaded.metadata.at("training").at("alpha") == 1.0);
  CHECK(loaded.metadata.at("steps") == 150 * 4);
  const auto a = model_weights(r.model), b = model_weights(loaded);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].vector() == b[i].vector());
  CHECK(fs::exists(out / "train_log.csv"));

  const GenerativeModel mid = load_checkpoint(out / "epoch_50");
  CHECK(mid.metadata.at("epoch") == 50);

  const TrainingResult again = train(c, scratch("const_again"));
  const auto w = model_weights(again.model);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].vector() == w[i].vector());
  fs::remove_all(data);
  fs::remove_all(out);
  fs::remove_all(scratch("const_again"));
}

TEST_CASE("training rejects missing or unusable data") {
  TrainingConfig c = tiny_config(scratch("missing"));
  CHECK_THROWS_AS(train(c, scratch("missing_out")), ImageError);
  const fs::path data = constant_images("few", 1);
  c = tiny_config(data);
  CHECK_THROWS_AS(train(c, scratch("few_out")), std::invalid_argument);
  fs::remove_all(data);
}
