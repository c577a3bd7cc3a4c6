#pragma once

#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "vble/generative_model.hpp"

namespace vble {

struct TrainingConfig {
  Architecture arch;
  double alpha = 0.01;
  std::size_t epochs = 60;
  std::size_t batch_size = 8;
  double learning_rate = 1e-3;
  /// Directory of PNG/PGM/PPM images; empty selects the synthetic corpus.
  std::string dataset;
  std::size_t synthetic_images = 672;
  /// Patch side; must equal the architecture's image size.
  std::size_t patch_size = 32;
  /// Items withheld from training for the final held-out loss.
  std::size_t holdout = 32;
  /// Write an intermediate checkpoint every this many epochs (0 = never).
  std::size_t checkpoint_every = 0;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainingConfig from_json(const nlohmann::json& j);
};

/// Seeded textures: oriented sinusoids plus smoothed noise, intensities in
/// [0, 1]. Image i depends only on (seed, first_index + i).
std::vector<Tensor> synthetic_textures(std::size_t count, std::size_t channels, std::size_t size, std::uint64_t seed,
                                       std::size_t first_index = 0);

/// Non-overlapping patch tiles from every image in `dir` (sorted by name).
std::vector<Tensor> load_patch_directory(const std::filesystem::path& dir, std::size_t channels, std::size_t patch);

/// Fixed collection of equally shaped [1, C, H, W] items.
class Dataset {
 public:
  explicit Dataset(std::vector<Tensor> items);

  std::size_t size() const { return items_.size(); }
  const Tensor& item(std::size_t i) const { return items_.at(i); }
  /// Stacks the selected items into [n, C, H, W].
  Tensor batch(const std::vector<std::size_t>& indices) const;
  /// Seeded permutation of all indices.
  std::vector<std::size_t> shuffled(std::uint64_t seed) const;

 private:
  std::vector<Tensor> items_;
};

struct LossTerms {
  Tensor total;
  double distortion = 0.0;  // MSE
  double rate = 0.0;        // bits per pixel
};

/// Additive U(-1/2, 1/2) noise with the shape of t.
Tensor quantization_noise(const Shape& shape, Rng& rng);

/// 255^2 alpha MSE(x, D(z~)) + Rate(z~, h~) in bits per pixel, with latent and
/// hyper-latent perturbed by uniform noise.
LossTerms cae_loss(const GenerativeModel& model, const Tensor& batch, Rng& rng);

/// Per-image negative ELBO: ||x - D(z)||^2 / (2 gamma^2) + n log gamma + KL,
/// averaged over the batch. Rate reports the KL in bits per pixel.
LossTerms vae_loss(const GenerativeModel& model, const Tensor& batch, Rng& rng);

LossTerms training_loss(const GenerativeModel& model, const Tensor& batch, Rng& rng);

struct TrainingResult {
  GenerativeModel model;
  std::filesystem::path checkpoint;
  std::vector<double> epoch_loss;
  double heldout_loss = 0.0;
  double heldout_mse = 0.0;
};

class TrainingDiverged : public NumericError {
 public:
  using NumericError::NumericError;
};

/// Adam training from scratch. Writes `train_log.csv` and the final
/// checkpoint (manifest.json, weights.bin) into `out_dir`.
TrainingResult train(const TrainingConfig& config, const std::filesystem::path& out_dir,
                     std::ostream* progress = nullptr);

/// Mean held-out loss with fixed noise seeds and the MSE of the noiseless
/// reconstruction D(E(x)).
std::pair<double, double> evaluate_heldout(const GenerativeModel& model, const Dataset& data, std::uint64_t seed);

}  // namespace vble
