#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "vble/degradation.hpp"
#include "vble/solver.hpp"
#include "vble/trainer.hpp"

namespace vble {

/// Invalid or inconsistent run configuration.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Missing or unreadable input, or an output that cannot be written.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Task { restore, train, degrade, metrics, gridsearch, sample };

std::string to_string(Task t);
Task parse_task(const std::string& s);

/// Degradation as written in run configs.
struct OperatorSpec {
  OperatorKind kind = OperatorKind::blur;
  /// Gaussian blur standard deviation in pixels and kernel side.
  double blur_sigma = 1.0;
  std::size_t kernel_size = 7;
  /// JSON 2-D kernel; replaces the Gaussian when set.
  std::string kernel_file;
  std::size_t factor = 2;
  /// PNG mask, luminance above 127 marks observed pixels.
  std::string mask_file;
  /// Observed fraction of the random mask drawn when no mask file is given.
  double observed_fraction = 0.5;

  /// Builds A for images of `image_shape` ([1, C, H, W]).
  DegradationOperator build(const Shape& image_shape, std::uint64_t mask_seed) const;
  nlohmann::json to_json() const;
  static OperatorSpec from_json(const nlohmann::json& j);
};

/// Grid of restore runs: every lambda against every checkpoint, scored on
/// every validation image.
struct GridSpec {
  std::vector<double> lambdas;
  std::vector<std::string> checkpoints;
  std::vector<std::string> images;
};

struct RunConfig {
  Task task = Task::restore;
  std::uint64_t seed = 0;
  std::string output = "out";
  std::string checkpoint;
  /// Clean image: the degrade source, the restore ground truth, or the
  /// metrics reference.
  std::string image;
  /// Observed image for a restore without a problem file.
  std::string observation;
  /// problem.json written by the degrade task.
  std::string problem;
  OperatorSpec op;
  /// Noise standard deviation on the 8-bit scale.
  double sigma = 7.65;
  SolverConfig solver;
  double interval_level = 0.95;
  TrainingConfig training;
  GridSpec grid;
  /// metrics: image scored against `image`.
  std::string estimate;
  /// sample: posterior.json written by the restore task.
  std::string posterior;
  /// sample: number of draws.
  std::size_t samples = 16;

  /// Per-task checks; messages name the offending field.
  void validate() const;
  /// Fully resolved configuration. The run seed is stored once at top level.
  nlohmann::json to_json() const;
  /// Relative paths are resolved against `base_dir` when it is non-empty.
  static RunConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
};

/// Applies a dotted "key.path=value" assignment; value is parsed as JSON and
/// falls back to a plain string.
void apply_override(nlohmann::json& j, const std::string& assignment);

/// Reads a run config, or the config echoed in a report.json, applies the
/// overrides and resolves relative paths against the file's directory.
RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});

}  // namespace vble
