#pragma once

#include <filesystem>
#include <optional>
#include <ostream>

#include "json.hpp"
#include "vble/config.hpp"
#include "vble/generative_model.hpp"

namespace vble {

/// Raw little-endian float64 dump of a tensor's values.
void write_raw(const std::filesystem::path& path, const Tensor& t);
Tensor read_raw(const std::filesystem::path& path, const Shape& shape);

/// Writes problem.json (plus y.bin, y.png and mask.png for masks) into `dir`.
/// The float64 observation keeps the likelihood exact; y.png is a preview.
void save_problem(const ObservationProblem& problem, const std::filesystem::path& dir, const nlohmann::json& extra);
ObservationProblem load_problem(const std::filesystem::path& path);

nlohmann::json posterior_to_json(const VariationalParams& params, Family family, SolverMode mode);
VariationalParams posterior_from_json(const nlohmann::json& j, Family& family, SolverMode& mode);

/// Each command writes its files and report.json into config.output and
/// returns the report.
nlohmann::json cmd_restore(const RunConfig& config);
nlohmann::json cmd_degrade(const RunConfig& config);
nlohmann::json cmd_metrics(const RunConfig& config);
nlohmann::json cmd_gridsearch(const RunConfig& config);
nlohmann::json cmd_train(const RunConfig& config, std::ostream* progress = nullptr);
nlohmann::json cmd_sample(const RunConfig& config);

nlohmann::json run_task(const RunConfig& config, std::ostream* progress = nullptr);

}  // namespace vble
