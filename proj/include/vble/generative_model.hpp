#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "vble/models.hpp"
#include "vble/prior.hpp"

namespace vble {

/// Encoder, decoder and latent prior of one trained autoencoder, plus its
/// rate-distortion weight. Immutable once loaded; share freely across threads.
struct GenerativeModel {
  Architecture arch;
  Encoder encoder;
  Decoder decoder;
  LatentPrior prior;
  double alpha = 0.01;
  nlohmann::json metadata = nlohmann::json::object();

  static GenerativeModel create(const Architecture& arch, double alpha, std::uint64_t seed);

  /// Every weight with a stable, checkpoint-order name.
  std::vector<NamedTensor> parameters() const;
  void set_trainable(bool trainable) const;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kCheckpointVersion = 1;

/// Writes `manifest.json` and `weights.bin` (little-endian float64, manifest
/// order) into `dir`, creating it if needed.
void save_checkpoint(const GenerativeModel& model, const std::filesystem::path& dir);
GenerativeModel load_checkpoint(const std::filesystem::path& dir);

}  // namespace vble
