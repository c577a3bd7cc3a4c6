#include "vble/config.hpp"

#include <fstream>

#include "vble/image_io.hpp"

namespace vble {

namespace fs = std::filesystem;

namespace {

[[noreturn]] void config_fail(const std::string& field, const std::string& msg) {
  throw ConfigError(field + ": " + msg);
}

template <typename T>
T get_as(const nlohmann::json& v, const std::string& field) {
  try {
    return v.get<T>();
  } catch (const nlohmann::json::exception&) {
    config_fail(field, "wrong type (got " + std::string(v.type_name()) + ")");
  }
}

std::string resolve(const std::string& p, const fs::path& base) {
  if (p.empty() || base.empty() || fs::path(p).is_absolute()) return p;
  return (base / p).lexically_normal().string();
}

// Re-raises errors from nested from_json helpers under a field prefix.
template <typename F>
auto nested(const std::string& field, F&& f) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    const std::string what = e.what();
    if (what.rfind(field + ".", 0) == 0) throw ConfigError(what);
    throw ConfigError(field + "." + what);
  }
}

Tensor mask_from_png(const std::string& path, const Shape& image_shape) {
  const Tensor img = read_image(path);
  const std::size_t C = img.extent(1), H = img.extent(2), W = img.extent(3);
  if (H != image_shape[2] || W != image_shape[3]) {
    throw ConfigError("operator.mask_file: mask is " + std::to_string(H) + "x" + std::to_string(W) + ", image is " +
                      std::to_string(image_shape[2]) + "x" + std::to_string(image_shape[3]));
  }
  std::vector<double> m(H * W);
  for (std::size_t p = 0; p < H * W; ++p) {
    const double lum = C == 3 ? 0.299 * img[p] + 0.587 * img[H * W + p] + 0.114 * img[2 * H * W + p] : img[p];
    m[p] = std::round(lum * 255.0) > 127 ? 1.0 : 0.0;
  }
  return Tensor({1, 1, H, W}, std::move(m));
}

}  // namespace

std::string to_string(Task t) {
  switch (t) {
    case Task::restore: return "restore";
    case Task::train: return "train";
    case Task::degrade: return "degrade";
    case Task::metrics: return "metrics";
    case Task::gridsearch: return "gridsearch";
    case Task::sample: return "sample";
  }
  return "?";
}

Task parse_task(const std::string& s) {
  for (Task t : {Task::restore, Task::train, Task::degrade, Task::metrics, Task::gridsearch, Task::sample}) {
    if (to_string(t) == s) return t;
  }
  throw ConfigError("task: unknown task '" + s + "' (expected restore, train, degrade, metrics, gridsearch or sample)");
}

DegradationOperator OperatorSpec::build(const Shape& image_shape, std::uint64_t mask_seed) const {
  switch (kind) {
    case OperatorKind::identity: return DegradationOperator::identity();
    case OperatorKind::blur: {
      if (kernel_file.empty()) return DegradationOperator::gaussian_blur(blur_sigma, kernel_size);
      std::size_t size = 0;
      std::vector<double> k = load_kernel_json(kernel_file, size);
      return DegradationOperator::blur(std::move(k), size);
    }
    case OperatorKind::downsample: return DegradationOperator::downsample(factor);
    case OperatorKind::mask:
      if (!mask_file.empty()) return DegradationOperator::mask(mask_from_png(mask_file, image_shape));
      return DegradationOperator::mask(random_mask(image_shape[2], image_shape[3], observed_fraction, mask_seed));
  }
  throw ConfigError("operator.type: unsupported");
}

nlohmann::json OperatorSpec::to_json() const {
  nlohmann::json j = {{"type", to_string(kind)}};
  switch (kind) {
    case OperatorKind::identity: break;
    case OperatorKind::blur:
      if (kernel_file.empty()) {
        j["blur_sigma"] = blur_sigma;
        j["kernel_size"] = kernel_size;
      } else {
        j["kernel_file"] = kernel_file;
      }
      break;
    case OperatorKind::downsample: j["factor"] = factor; break;
    case OperatorKind::mask:
      if (mask_file.empty()) j["observed_fraction"] = observed_fraction;
      else j["mask_file"] = mask_file;
      break;
  }
  return j;
}

OperatorSpec OperatorSpec::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("operator: expected an object");
  OperatorSpec s;
  for (const auto& [key, v] : j.items()) {
    const std::string field = "operator." + key;
    if (key == "type") {
      try {
        s.kind = parse_operator_kind(get_as<std::string>(v, field));
      } catch (const ConfigError&) {
        throw;
      } catch (const std::exception& e) {
        config_fail(field, e.what());
      }
    } else if (key == "blur_sigma") s.blur_sigma = get_as<double>(v, field);
    else if (key == "kernel_size") s.kernel_size = get_as<std::size_t>(v, field);
    else if (key == "kernel_file") s.kernel_file = get_as<std::string>(v, field);
    else if (key == "factor") s.factor = get_as<std::size_t>(v, field);
    else if (key == "mask_file") s.mask_file = get_as<std::string>(v, field);
    else if (key == "observed_fraction") s.observed_fraction = get_as<double>(v, field);
    else config_fail(field, "unknown key");
  }
  if (!(s.blur_sigma > 0)) config_fail("operator.blur_sigma", "must be > 0");
  if (s.kernel_size % 2 == 0) config_fail("operator.kernel_size", "must be odd");
  if (s.factor != 2 && s.factor != 4) config_fail("operator.factor", "must be 2 or 4");
  if (!(s.observed_fraction > 0 && s.observed_fraction <= 1)) config_fail("operator.observed_fraction", "must be in (0, 1]");
  return s;
}

void RunConfig::validate() const {
  auto require = [&](const std::string& value, const char* field) {
    if (value.empty()) config_fail(field, "required for the " + to_string(task) + " task");
  };
  if (!(sigma > 0)) config_fail("sigma", "must be > 0 (8-bit units)");
  if (!(interval_level > 0 && interval_level < 1)) config_fail("interval_level", "must be in (0, 1)");
  if (output.empty()) config_fail("output", "must not be empty");
  nested("solver", [&] {
    solver.validate();
    return 0;
  });
  switch (task) {
    case Task::restore:
      require(checkpoint, "checkpoint");
      if (problem.empty() && observation.empty()) config_fail("problem", "restore needs a problem file or an observation");
      if (!problem.empty() && !observation.empty()) config_fail("observation", "give either problem or observation");
      break;
    case Task::degrade: require(image, "image"); break;
    case Task::metrics:
      require(image, "image");
      require(estimate, "estimate");
      break;
    case Task::gridsearch:
      if (grid.lambdas.empty()) config_fail("grid.lambdas", "must list at least one value");
      for (double l : grid.lambdas) {
        if (!(l >= 0)) config_fail("grid.lambdas", "values must be >= 0");
      }
      if (grid.checkpoints.empty()) config_fail("grid.checkpoints", "must list at least one checkpoint");
      if (grid.images.empty()) config_fail("grid.images", "must list at least one image");
      break;
    case Task::train:
      nested("training", [&] {
        training.validate();
        return 0;
      });
      break;
    case Task::sample:
      require(checkpoint, "checkpoint");
      require(posterior, "posterior");
      if (samples < 1) config_fail("samples", "must be >= 1");
      break;
  }
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json s = solver.to_json();
  s.erase("seed");
  nlohmann::json t = training.to_json();
  t.erase("seed");
  return {{"task", to_string(task)},
          {"seed", seed},
          {"output", output},
          {"checkpoint", checkpoint},
          {"image", image},
          {"observation", observation},
          {"problem", problem},
          {"operator", op.to_json()},
          {"sigma", sigma},
          {"solver", s},
          {"interval_level", interval_level},
          {"training", t},
          {"grid", {{"lambdas", grid.lambdas}, {"checkpoints", grid.checkpoints}, {"images", grid.images}}},
          {"estimate", estimate},
          {"posterior", posterior},
          {"samples", samples}};
}

RunConfig RunConfig::from_json(const nlohmann::json& j, const fs::path& base) {
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  RunConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "task") c.task = parse_task(get_as<std::string>(v, key));
    else if (key == "seed") c.seed = get_as<std::uint64_t>(v, key);
    else if (key == "output") c.output = get_as<std::string>(v, key);
    else if (key == "checkpoint") c.checkpoint = get_as<std::string>(v, key);
    else if (key == "image") c.image = get_as<std::string>(v, key);
    else if (key == "observation") c.observation = get_as<std::string>(v, key);
    else if (key == "problem") c.problem = get_as<std::string>(v, key);
    else if (key == "operator") c.op = OperatorSpec::from_json(v);
    else if (key == "sigma") c.sigma = get_as<double>(v, key);
    else if (key == "interval_level") c.interval_level = get_as<double>(v, key);
    else if (key == "estimate") c.estimate = get_as<std::string>(v, key);
    else if (key == "posterior") c.posterior = get_as<std::string>(v, key);
    else if (key == "samples") c.samples = get_as<std::size_t>(v, key);
    else if (key == "solver") {
      if (v.is_object() && v.contains("seed")) config_fail("solver.seed", "set the top-level seed instead");
      c.solver = nested("solver", [&] { return SolverConfig::from_json(v); });
    } else if (key == "training") {
      if (v.is_object() && v.contains("seed")) config_fail("training.seed", "set the top-level seed instead");
      c.training = nested("training", [&] { return TrainingConfig::from_json(v); });
    } else if (key == "grid") {
      if (!v.is_object()) config_fail("grid", "expected an object");
      for (const auto& [gk, gv] : v.items()) {
        const std::string field = "grid." + gk;
        if (gk == "lambdas") c.grid.lambdas = get_as<std::vector<double>>(gv, field);
        else if (gk == "checkpoints") c.grid.checkpoints = get_as<std::vector<std::string>>(gv, field);
        else if (gk == "images") c.grid.images = get_as<std::vector<std::string>>(gv, field);
        else config_fail(field, "unknown key");
      }
    } else {
      config_fail(key, "unknown key");
    }
  }
  c.solver.seed = c.seed;
  c.training.seed = c.seed;

  for (std::string* p : {&c.output, &c.checkpoint, &c.image, &c.observation, &c.problem, &c.op.kernel_file,
                         &c.op.mask_file, &c.training.dataset, &c.estimate, &c.posterior}) {
    *p = resolve(*p, base);
  }
  for (auto& p : c.grid.checkpoints) p = resolve(p, base);
  for (auto& p : c.grid.images) p = resolve(p, base);
  c.validate();
  return c;
}

void apply_override(nlohmann::json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "': expected key=value");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  nlohmann::json* node = &j;
  std::size_t start = 0;
  for (;;) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot - start);
    if (part.empty()) throw ConfigError("override '" + assignment + "': empty key segment");
    if (!node->is_object()) throw ConfigError("override '" + key + "': '" + part + "' is not inside an object");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    if (node->is_null()) *node = nlohmann::json::object();
    start = dot + 1;
  }
}

RunConfig load_run_config(const fs::path& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigError("config " + path.string() + ": not valid JSON");
  // A report.json carries the resolved config of the run that wrote it.
  if (j.is_object() && j.contains("config") && j.contains("metrics")) j = j["config"];
  for (const auto& o : overrides) apply_override(j, o);
  return RunConfig::from_json(j, fs::absolute(path).parent_path());
}

}  // namespace vble
