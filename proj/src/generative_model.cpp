#include "vble/generative_model.hpp"

#include <bit>
#include <fstream>
#include <iterator>

namespace vble {

namespace fs = std::filesystem;

GenerativeModel GenerativeModel::create(const Architecture& arch, double alpha, std::uint64_t seed) {
  arch.validate();
  GenerativeModel m;
  m.arch = arch;
  Rng enc_rng(derive_seed(seed, 1)), dec_rng(derive_seed(seed, 2)), prior_rng(derive_seed(seed, 3));
  m.encoder = Encoder(arch, enc_rng);
  m.decoder = Decoder(arch, dec_rng);
  m.prior = LatentPrior(arch, prior_rng);
  m.alpha = alpha;
  return m;
}

std::vector<NamedTensor> GenerativeModel::parameters() const {
  std::vector<NamedTensor> out;
  for (auto& p : encoder.parameters()) out.push_back({"encoder." + p.name, p.tensor});
  for (auto& p : decoder.parameters()) out.push_back({"decoder." + p.name, p.tensor});
  for (auto& p : prior.parameters()) out.push_back({"prior." + p.name, p.tensor});
  return out;
}

void GenerativeModel::set_trainable(bool trainable) const { vble::set_trainable(parameters(), trainable); }

namespace {

void put_le(double v, char* out) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out[i] = static_cast<char>((bits >> (8 * i)) & 0xFF);
}

double get_le(const char* in) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[i])) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace

void save_checkpoint(const GenerativeModel& model, const fs::path& dir) {
  fs::create_directories(dir);
  nlohmann::json tensors = nlohmann::json::array();
  std::string blob;
  for (const auto& p : model.parameters()) {
    const std::size_t offset = blob.size();
    blob.resize(offset + 8 * p.tensor.size());
    for (std::size_t i = 0; i < p.tensor.size(); ++i) put_le(p.tensor[i], blob.data() + offset + 8 * i);
    tensors.push_back({{"name", p.name}, {"shape", p.tensor.shape()}, {"offset", offset}, {"count", p.tensor.size()}});
  }
  nlohmann::json manifest = {{"format", "vble-checkpoint"},
                             {"version", kCheckpointVersion},
                             {"architecture", model.arch.to_json()},
                             {"family", to_string(model.arch.family)},
                             {"prior", to_string(model.arch.prior)},
                             {"alpha", model.alpha},
                             {"metadata", model.metadata},
                             {"weights_file", "weights.bin"},
                             {"weights_bytes", blob.size()},
                             {"tensors", tensors}};
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
  std::ofstream out(dir / "weights.bin", std::ios::binary);
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!out) throw CheckpointError("checkpoint: failed writing " + (dir / "weights.bin").string());
}

GenerativeModel load_checkpoint(const fs::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw CheckpointError("checkpoint: missing manifest in " + dir.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(mf);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint: unreadable manifest: ") + e.what());
  }
  if (manifest.value("format", "") != "vble-checkpoint") throw CheckpointError("checkpoint: not a vble checkpoint");
  if (manifest.value("version", -1) != kCheckpointVersion) {
    throw CheckpointError("checkpoint: version " + manifest.value("version", nlohmann::json(-1)).dump() +
                          " not supported (expected " + std::to_string(kCheckpointVersion) + ")");
  }

  Architecture arch;
  try {
    arch = Architecture::from_json(manifest.at("architecture"));
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("checkpoint: bad architecture: ") + e.what());
  }
  GenerativeModel model = GenerativeModel::create(arch, manifest.at("alpha").get<double>(), 0);
  model.metadata = manifest.value("metadata", nlohmann::json::object());

  std::ifstream wf(dir / manifest.value("weights_file", "weights.bin"), std::ios::binary);
  if (!wf) throw CheckpointError("checkpoint: missing weights blob in " + dir.string());
  std::string blob((std::istreambuf_iterator<char>(wf)), std::istreambuf_iterator<char>());
  const auto declared = manifest.at("weights_bytes").get<std::size_t>();
  if (blob.size() != declared) {
    throw CheckpointError("checkpoint: weights blob holds " + std::to_string(blob.size()) + " bytes, manifest declares " +
                          std::to_string(declared));
  }

  const auto params = model.parameters();
  const auto& entries = manifest.at("tensors");
  if (entries.size() != params.size()) {
    throw CheckpointError("checkpoint: manifest lists " + std::to_string(entries.size()) + " tensors, architecture has " +
                          std::to_string(params.size()));
  }
  std::size_t expected_offset = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& e = entries[i];
    Tensor t = params[i].tensor;
    if (e.at("name").get<std::string>() != params[i].name || e.at("shape").get<Shape>() != t.shape()) {
      throw CheckpointError("checkpoint: tensor " + std::to_string(i) + " is '" + e.at("name").get<std::string>() +
                            "' " + to_string(e.at("shape").get<Shape>()) + ", expected '" + params[i].name + "' " +
                            to_string(t.shape()));
    }
    const auto offset = e.at("offset").get<std::size_t>();
    const auto count = e.at("count").get<std::size_t>();
    if (offset != expected_offset || count != t.size() || offset + 8 * count > blob.size()) {
      throw CheckpointError("checkpoint: inconsistent layout for '" + params[i].name + "'");
    }
    auto dst = t.mutable_values();
    for (std::size_t k = 0; k < count; ++k) dst[k] = get_le(blob.data() + offset + 8 * k);
    expected_offset = offset + 8 * count;
  }
  if (expected_offset != blob.size()) throw CheckpointError("checkpoint: trailing bytes in weights blob");
  return model;
}

}  // namespace vble
