#include "vble/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

#include "vble/adam.hpp"
#include "vble/degradation.hpp"
#include "vble/image_io.hpp"
#include "vble/ops.hpp"

namespace vble {

namespace fs = std::filesystem;

void TrainingConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument(msg); };
  arch.validate();
  if (arch.family == ModelFamily::cae && !(alpha > 0)) fail("alpha must be > 0 for a CAE");
  if (epochs < 1) fail("epochs must be >= 1");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (!(learning_rate > 0)) fail("learning_rate must be > 0");
  if (patch_size != arch.height || patch_size != arch.width) {
    fail("patch_size " + std::to_string(patch_size) + " must match the architecture image size " +
         std::to_string(arch.height) + "x" + std::to_string(arch.width));
  }
  if (dataset.empty() && synthetic_images <= holdout) fail("synthetic_images must exceed holdout");
}

nlohmann::json TrainingConfig::to_json() const {
  return {{"architecture", arch.to_json()},
          {"alpha", alpha},
          {"epochs", epochs},
          {"batch_size", batch_size},
          {"learning_rate", learning_rate},
          {"dataset", dataset},
          {"synthetic_images", synthetic_images},
          {"patch_size", patch_size},
          {"holdout", holdout},
          {"checkpoint_every", checkpoint_every},
          {"seed", seed}};
}

TrainingConfig TrainingConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("training: expected an object");
  TrainingConfig c;
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "architecture") c.arch = Architecture::from_json(v);
      else if (key == "alpha") c.alpha = v.get<double>();
      else if (key == "epochs") c.epochs = v.get<std::size_t>();
      else if (key == "batch_size") c.batch_size = v.get<std::size_t>();
      else if (key == "learning_rate") c.learning_rate = v.get<double>();
      else if (key == "dataset") c.dataset = v.get<std::string>();
      else if (key == "synthetic_images") c.synthetic_images = v.get<std::size_t>();
      else if (key == "patch_size") c.patch_size = v.get<std::size_t>();
      else if (key == "holdout") c.holdout = v.get<std::size_t>();
      else if (key == "checkpoint_every") c.checkpoint_every = v.get<std::size_t>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else throw std::invalid_argument("unknown key");
    } catch (const nlohmann::json::exception&) {
      throw std::invalid_argument("training." + key + ": wrong type");
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument("training." + key + ": " + e.what());
    }
  }
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument(std::string("training.") + e.what());
  }
  return c;
}

std::vector<Tensor> synthetic_textures(std::size_t count, std::size_t channels, std::size_t size, std::uint64_t seed,
                                       std::size_t first_index) {
  // Largest odd kernel up to 7 that fits the period.
  const auto smooth = DegradationOperator::gaussian_blur(1.5, std::min<std::size_t>(7, size - 1 + size % 2));
  const double two_pi = 2 * std::numbers::pi;
  std::vector<Tensor> out;
  out.reserve(count);
  for (std::size_t n = 0; n < count; ++n) {
    Rng rng(derive_seed(seed, first_index + n));
    const double base = rng.uniform(0.35, 0.65);
    const int waves = 2 + static_cast<int>(rng.uniform(0, 2));
    std::vector<double> img(size * size, base);
    for (int k = 0; k < waves; ++k) {
      const double freq = rng.uniform(1.0, 5.0), angle = rng.uniform(0, std::numbers::pi);
      const double phase = rng.uniform(0, two_pi), amp = rng.uniform(0.06, 0.16);
      const double cx = std::cos(angle), cy = std::sin(angle);
      for (std::size_t i = 0; i < size; ++i)
        for (std::size_t j = 0; j < size; ++j)
          img[i * size + j] += amp * std::sin(two_pi * freq * (cx * double(j) + cy * double(i)) / double(size) + phase);
    }
    const Tensor noise = smooth.apply(rng.normal_tensor({1, 1, size, size}));
    double ss = 0;
    for (double v : noise.values()) ss += v * v;
    const double gain = rng.uniform(0.04, 0.1) / std::sqrt(ss / double(noise.size()));
    std::vector<double> v(channels * size * size);
    for (std::size_t c = 0; c < channels; ++c) {
      const double tint = channels == 1 ? 0.0 : rng.uniform(-0.08, 0.08);
      for (std::size_t p = 0; p < size * size; ++p) {
        v[c * size * size + p] = std::clamp(img[p] + gain * noise[p] + tint, 0.0, 1.0);
      }
    }
    out.emplace_back(Shape{1, channels, size, size}, std::move(v));
  }
  return out;
}

std::vector<Tensor> load_patch_directory(const fs::path& dir, std::size_t channels, std::size_t patch) {
  if (!fs::is_directory(dir)) throw ImageError("dataset directory not found: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    std::string ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (e.is_regular_file() && (ext == ".png" || ext == ".pgm" || ext == ".ppm")) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<Tensor> out;
  for (const auto& f : files) {
    const Tensor img = read_image(f);
    if (img.extent(1) != channels) {
      throw ImageError(f.string() + " has " + std::to_string(img.extent(1)) + " channels, expected " +
                       std::to_string(channels));
    }
    const std::size_t H = img.extent(2), W = img.extent(3);
    for (std::size_t r = 0; r + patch <= H; r += patch) {
      for (std::size_t c = 0; c + patch <= W; c += patch) {
        std::vector<double> v(channels * patch * patch);
        for (std::size_t ch = 0; ch < channels; ++ch)
          for (std::size_t i = 0; i < patch; ++i)
            for (std::size_t j = 0; j < patch; ++j)
              v[(ch * patch + i) * patch + j] = img[(ch * H + r + i) * W + c + j];
        out.emplace_back(Shape{1, channels, patch, patch}, std::move(v));
      }
    }
  }
  return out;
}

Dataset::Dataset(std::vector<Tensor> items) : items_(std::move(items)) {
  if (items_.empty()) throw std::invalid_argument("dataset is empty");
  for (const auto& t : items_) {
    if (t.shape() != items_[0].shape()) throw ShapeError("dataset items differ in shape");
  }
}

Tensor Dataset::batch(const std::vector<std::size_t>& indices) const {
  const std::size_t per = items_[0].size();
  std::vector<double> v;
  v.reserve(indices.size() * per);
  for (std::size_t i : indices) v.insert(v.end(), items_.at(i).values().begin(), items_.at(i).values().end());
  Shape s = items_[0].shape();
  s[0] = indices.size();
  return Tensor(std::move(s), std::move(v));
}

std::vector<std::size_t> Dataset::shuffled(std::uint64_t seed) const {
  std::vector<std::size_t> idx(items_.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng.engine());
  return idx;
}

Tensor quantization_noise(const Shape& shape, Rng& rng) { return rng.uniform_tensor(shape, -0.5, 0.5); }

namespace {

double pixels_of(const Tensor& batch) { return static_cast<double>(batch.extent(0) * batch.extent(2) * batch.extent(3)); }

}  // namespace

LossTerms cae_loss(const GenerativeModel& model, const Tensor& batch, Rng& rng) {
  const Tensor z_bar = model.encoder.encode(batch);
  const Tensor z = z_bar + quantization_noise(z_bar.shape(), rng);
  Tensor log_p;
  if (model.prior.kind() == PriorKind::scale_hyperprior) {
    const Tensor h_bar = model.prior.hyper().encode(z_bar);
    const Tensor h = h_bar + quantization_noise(h_bar.shape(), rng);
    log_p = model.prior.log_prob_given_hyper(z, h);
  } else {
    log_p = model.prior.log_prob(z);
  }
  const Tensor mse = mean(square(model.decoder.decode(z) - batch));
  const Tensor bpp = scale(log_p, -1.0 / (std::numbers::ln2 * pixels_of(batch)));
  LossTerms out;
  out.total = scale(mse, 255.0 * 255.0 * model.alpha) + bpp;
  out.distortion = mse.item();
  out.rate = bpp.item();
  return out;
}

LossTerms vae_loss(const GenerativeModel& model, const Tensor& batch, Rng& rng) {
  const auto [mu, log_std] = model.encoder.encode_gaussian(batch);
  const Tensor z = mu + exp(log_std) * rng.normal_tensor(mu.shape());
  const Tensor residual = sum(square(model.decoder.decode(z) - batch));
  const Tensor& log_gamma = model.decoder.log_gamma();
  const double n = static_cast<double>(batch.size());
  const Tensor reconstruction = scale(residual * exp(scale(log_gamma, -2.0)), 0.5) + scale(log_gamma, n);
  const Tensor kl = sum(scale(square(mu) + exp(scale(log_std, 2.0)), 0.5) - log_std) + (-0.5 * double(mu.size()));
  const double items = static_cast<double>(batch.extent(0));
  LossTerms out;
  out.total = scale(reconstruction + kl, 1.0 / items);
  out.distortion = residual.item() / n;
  out.rate = kl.item() / (std::numbers::ln2 * pixels_of(batch));
  return out;
}

LossTerms training_loss(const GenerativeModel& model, const Tensor& batch, Rng& rng) {
  return model.arch.family == ModelFamily::cae ? cae_loss(model, batch, rng) : vae_loss(model, batch, rng);
}

std::pair<double, double> evaluate_heldout(const GenerativeModel& model, const Dataset& data, std::uint64_t seed) {
  double loss = 0, mse = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    Rng rng(derive_seed(seed, i));
    const Tensor& x = data.item(i);
    loss += training_loss(model, x, rng).total.item();
    const Tensor r = model.decoder.decode(model.encoder.encode(x)) - x;
    mse += inner_product(r, r) / static_cast<double>(r.size());
  }
  return {loss / double(data.size()), mse / double(data.size())};
}

TrainingResult train(const TrainingConfig& config, const fs::path& out_dir, std::ostream* progress) {
  config.validate();
  const Architecture& arch = config.arch;
  std::vector<Tensor> items = config.dataset.empty()
                                  ? synthetic_textures(config.synthetic_images, arch.channels, config.patch_size,
                                                       derive_seed(config.seed, 7))
                                  : load_patch_directory(config.dataset, arch.channels, config.patch_size);
  if (items.empty()) throw std::invalid_argument("dataset is empty: " + config.dataset);
  if (items.size() <= config.holdout) throw std::invalid_argument("dataset has no items left after the holdout");
  std::vector<Tensor> held(items.end() - static_cast<std::ptrdiff_t>(config.holdout), items.end());
  items.resize(items.size() - config.holdout);
  const Dataset train_set(std::move(items));

  TrainingResult result;
  result.model = GenerativeModel::create(arch, config.alpha, config.seed);
  GenerativeModel& model = result.model;
  std::vector<Tensor> params;
  for (const auto& p : model.parameters()) params.push_back(p.tensor);
  model.set_trainable(true);
  Adam adam(params, {.learning_rate = config.learning_rate});

  fs::create_directories(out_dir);
  std::ofstream log(out_dir / "train_log.csv");
  if (!log) throw std::runtime_error("cannot write " + (out_dir / "train_log.csv").string());
  log << "epoch,step,loss,distortion,rate\n";

  Rng noise(derive_seed(config.seed, 8));
  std::size_t step = 0, over = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto order = train_set.shuffled(derive_seed(config.seed, 1000 + epoch));
    double loss = 0, dist = 0, rate = 0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b + config.batch_size <= order.size(); b += config.batch_size) {
      const std::vector<std::size_t> idx(order.begin() + b, order.begin() + b + config.batch_size);
      LossTerms t;
      try {
        t = training_loss(model, train_set.batch(idx), noise);
        adam.step(backward(t.total));
      } catch (const NumericError& e) {
        throw NumericError("training step " + std::to_string(step) + ": " + e.what());
      }
      loss += t.total.item();
      dist += t.distortion;
      rate += t.rate;
      ++batches;
      ++step;
    }
    if (batches == 0) throw std::invalid_argument("dataset smaller than one batch");
    loss /= double(batches);
    result.epoch_loss.push_back(loss);
    char row[160];
    std::snprintf(row, sizeof row, "%zu,%zu,%.8g,%.8g,%.8g\n", epoch + 1, step, loss, dist / double(batches),
                  rate / double(batches));
    log << row << std::flush;
    if (progress) *progress << row << std::flush;

    over = loss > 10 * std::abs(result.epoch_loss.front()) ? over + 1 : 0;
    if (over >= 3) {
      throw TrainingDiverged("training diverged: epoch loss above 10x the initial loss for 3 consecutive epochs");
    }
    if (config.checkpoint_every && (epoch + 1) % config.checkpoint_every == 0 && epoch + 1 < config.epochs) {
      model.metadata["epoch"] = epoch + 1;
      model.metadata["steps"] = step;
      save_checkpoint(model, out_dir / ("epoch_" + std::to_string(epoch + 1)));
    }
  }

  model.set_trainable(false);
  std::tie(result.heldout_loss, result.heldout_mse) = evaluate_heldout(model, Dataset(held), derive_seed(config.seed, 9));
  model.metadata = {{"epochs", config.epochs},
                    {"steps", step},
                    {"final_epoch_loss", result.epoch_loss.back()},
                    {"heldout_loss", result.heldout_loss},
                    {"heldout_mse", result.heldout_mse},
                    {"training", config.to_json()}};
  save_checkpoint(model, out_dir);
  result.checkpoint = out_dir;
  return result;
}

}  // namespace vble
