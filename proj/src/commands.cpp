#include "vble/commands.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>

#include "vble/image_io.hpp"
#include "vble/metrics.hpp"
#include "vble/parallel.hpp"

namespace vble {

namespace fs = std::filesystem;

namespace {

static_assert(std::endian::native == std::endian::little, "raw tensors are stored little-endian");

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigError(path.string() + ": not valid JSON");
  return j;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

GenerativeModel load_model(const std::string& path) {
  if (!fs::exists(path)) throw IoError("checkpoint not found: " + path);
  return load_checkpoint(path);
}

Tensor load_image(const std::string& path) {
  if (!fs::exists(path)) throw IoError("image not found: " + path);
  return read_image(path);
}

Tensor clamp01(const Tensor& t) {
  std::vector<double> v = t.vector();
  for (double& x : v) x = std::clamp(x, 0.0, 1.0);
  return Tensor(t.shape(), std::move(v));
}

Tensor item_of(const Tensor& batch, std::size_t i) {
  const std::size_t per = batch.size() / batch.extent(0);
  Shape s = batch.shape();
  s[0] = 1;
  return Tensor(std::move(s), std::vector<double>(batch.vector().begin() + static_cast<std::ptrdiff_t>(i * per),
                                                  batch.vector().begin() + static_cast<std::ptrdiff_t>((i + 1) * per)));
}

void check_image_shape(const GenerativeModel& model, const Shape& image, const std::string& what) {
  const Shape expected = batched(1, model.arch.image_shape());
  if (image != expected) {
    throw ConfigError(what + ": checkpoint expects images of shape " + to_string(expected) + ", got " +
                      to_string(image));
  }
}

std::vector<std::string> write_samples(const fs::path& dir, const Tensor& images) {
  make_dir(dir / "samples");
  std::vector<std::string> names;
  for (std::size_t i = 0; i < images.extent(0); ++i) {
    char name[48];
    std::snprintf(name, sizeof name, "samples/sample_%03zu.png", i);
    write_image(dir / name, item_of(images, i));
    names.emplace_back(name);
  }
  return names;
}

double pixel_std_mean(const Tensor& images) {
  const std::size_t n = images.extent(0), per = images.size() / n;
  if (n < 2) return 0.0;
  const Tensor m = batch_mean(images);
  double total = 0;
  for (std::size_t k = 0; k < per; ++k) {
    double ss = 0;
    for (std::size_t i = 0; i < n; ++i) ss += (images[i * per + k] - m[k]) * (images[i * per + k] - m[k]);
    total += std::sqrt(ss / double(n - 1));
  }
  return total / double(per);
}

nlohmann::json base_report(const RunConfig& config) {
  return {{"task", to_string(config.task)}, {"seed", config.seed}, {"config", config.to_json()}};
}

ObservationProblem observed_problem(const RunConfig& config) {
  const Tensor y = load_image(config.observation);
  if (config.op.kind == OperatorKind::mask && config.op.mask_file.empty()) {
    throw ConfigError("operator.mask_file: required when restoring an observed image");
  }
  Shape image = y.shape();
  if (config.op.kind == OperatorKind::downsample) {
    image[2] *= config.op.factor;
    image[3] *= config.op.factor;
  }
  return {config.op.build(image, 0), y, sigma_from_8bit(config.sigma)};
}

}  // namespace

void write_raw(const fs::path& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(t.vector().data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  if (!out) throw IoError("write failed: " + path.string());
}

Tensor read_raw(const fs::path& path, const Shape& shape) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<double> v(numel(shape));
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
  if (in.gcount() != static_cast<std::streamsize>(v.size() * sizeof(double)) || in.peek() != EOF) {
    throw IoError(path.string() + ": expected " + std::to_string(v.size()) + " float64 values");
  }
  return Tensor(shape, std::move(v));
}

void save_problem(const ObservationProblem& problem, const fs::path& dir, const nlohmann::json& extra) {
  make_dir(dir);
  nlohmann::json j = extra;
  j["operator"] = problem.op.to_json();
  j["sigma"] = problem.sigma;
  j["image_shape"] = problem.image_shape();
  j["observation"] = "y.bin";
  j["observation_shape"] = problem.y.shape();
  j["preview"] = "y.png";
  write_raw(dir / "y.bin", problem.y);
  write_image(dir / "y.png", problem.y);
  if (problem.op.kind() == OperatorKind::mask) {
    write_image(dir / "mask.png", problem.op.mask_tensor());
    j["mask_file"] = "mask.png";
  }
  write_json(dir / "problem.json", j);
}

ObservationProblem load_problem(const fs::path& path) {
  const nlohmann::json j = read_json(path);
  const fs::path dir = path.parent_path();
  try {
    const auto& op = j.at("operator");
    const OperatorKind kind = parse_operator_kind(op.at("type").get<std::string>());
    ObservationProblem p;
    p.sigma = j.at("sigma").get<double>();
    p.y = read_raw(dir / j.at("observation").get<std::string>(), j.at("observation_shape").get<Shape>());
    switch (kind) {
      case OperatorKind::identity: p.op = DegradationOperator::identity(); break;
      case OperatorKind::blur: {
        const auto rows = op.at("kernel").get<std::vector<std::vector<double>>>();
        std::vector<double> k;
        for (const auto& r : rows) {
          if (r.size() != rows.size()) throw ConfigError("operator.kernel: kernel must be square");
          k.insert(k.end(), r.begin(), r.end());
        }
        p.op = DegradationOperator::blur(std::move(k), rows.size());
        break;
      }
      case OperatorKind::downsample: p.op = DegradationOperator::downsample(op.at("factor").get<std::size_t>()); break;
      case OperatorKind::mask: {
        const Tensor m = load_image((dir / j.at("mask_file").get<std::string>()).string());
        std::vector<double> v(m.size());
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = m[i] > 0.5 ? 1.0 : 0.0;
        p.op = DegradationOperator::mask(Tensor(m.shape(), std::move(v)));
        break;
      }
    }
    p.validate();
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("problem " + path.string() + ": " + e.what());
  }
}

nlohmann::json posterior_to_json(const VariationalParams& params, Family family, SolverMode mode) {
  nlohmann::json j = {{"family", to_string(family)},
                      {"mode", to_string(mode)},
                      {"latent_shape", params.z_bar.shape()},
                      {"z_bar", params.z_bar.vector()},
                      {"rho", params.rho.vector()}};
  if (params.has_hyper()) {
    j["hyper_shape"] = params.h_bar.shape();
    j["h_bar"] = params.h_bar.vector();
    j["rho_h"] = params.rho_h.vector();
  }
  return j;
}

VariationalParams posterior_from_json(const nlohmann::json& j, Family& family, SolverMode& mode) {
  try {
    family = parse_family(j.at("family").get<std::string>());
    mode = parse_solver_mode(j.at("mode").get<std::string>());
    const Shape s = j.at("latent_shape").get<Shape>();
    VariationalParams p{Tensor(s, j.at("z_bar").get<std::vector<double>>()),
                        Tensor(s, j.at("rho").get<std::vector<double>>()),
                        {},
                        {}};
    if (j.contains("h_bar")) {
      const Shape h = j.at("hyper_shape").get<Shape>();
      p.h_bar = Tensor(h, j.at("h_bar").get<std::vector<double>>());
      p.rho_h = Tensor(h, j.at("rho_h").get<std::vector<double>>());
    }
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("posterior: ") + e.what());
  }
}

nlohmann::json cmd_degrade(const RunConfig& config) {
  const fs::path out = config.output;
  const Tensor x = load_image(config.image);
  ObservationProblem problem;
  problem.op = config.op.build(x.shape(), derive_seed(config.seed, 3));
  problem.sigma = sigma_from_8bit(config.sigma);
  problem.y = degrade(problem.op, x, problem.sigma, derive_seed(config.seed, 1));
  save_problem(problem, out, {{"source", config.image}, {"seed", config.seed}, {"sigma_8bit", config.sigma}});

  nlohmann::json report = base_report(config);
  report["metrics"] = {{"psnr_degraded", psnr(clamp01(init_guess(problem)), x)},
                       {"ssim_degraded", ssim(clamp01(init_guess(problem)), x)}};
  nlohmann::json outputs = {"problem.json", "y.bin", "y.png"};
  if (problem.op.kind() == OperatorKind::mask) outputs.push_back("mask.png");
  report["outputs"] = outputs;
  write_json(out / "report.json", report);
  return report;
}

nlohmann::json cmd_restore(const RunConfig& config) {
  const fs::path out = config.output;
  const GenerativeModel model = load_model(config.checkpoint);
  const ObservationProblem problem = config.problem.empty() ? observed_problem(config) : load_problem(config.problem);
  check_image_shape(model, problem.image_shape(), config.problem.empty() ? "observation" : "problem");
  std::optional<Tensor> truth;
  if (!config.image.empty()) {
    truth = load_image(config.image);
    if (truth->shape() != problem.image_shape()) {
      throw ConfigError("image: ground truth shape " + to_string(truth->shape()) + " does not match the problem");
    }
  }

  const RestorationOutput r = run(problem, model, config.solver);
  make_dir(out);
  const Tensor x_mmse = clamp01(r.mmse_x), z_mmse = clamp01(r.mmse_z);
  write_image(out / "mmse_x.png", x_mmse);
  write_image(out / "mmse_z.png", z_mmse);
  nlohmann::json outputs = {"mmse_x.png", "mmse_z.png"};
  for (const auto& name : write_samples(out, r.samples.images)) outputs.push_back(name);

  std::string trace = "iteration,loss\n";
  char row[64];
  for (std::size_t i = 0; i < r.loss_trace.size(); ++i) {
    std::snprintf(row, sizeof row, "%zu,%.17g\n", i, r.loss_trace[i]);
    trace += row;
  }
  write_text(out / "trace.csv", trace);
  write_json(out / "posterior.json", posterior_to_json(r.params, r.family, r.mode));
  outputs.push_back("trace.csv");
  outputs.push_back("posterior.json");

  double spread = 0;
  const Tensor a = r.params.spread();
  for (double v : a.values()) spread += v / double(a.size());
  nlohmann::json metrics = {{"final_loss", r.loss_trace.back()},
                            {"mean_spread", spread},
                            {"pixel_std_mean", pixel_std_mean(r.samples.images)}};

  nlohmann::json report = base_report(config);
  const std::size_t L = r.samples.images.extent(0);
  if (L >= 2) {
    const IntervalMap iv = interval_map(r.samples.images, config.interval_level);
    write_image(out / "interval_lower.png", iv.lower);
    write_image(out / "interval_upper.png", iv.upper);
    write_image(out / "error_quantile_95.png", error_quantile_map(r.samples.images, r.mmse_x, 0.95));
    outputs.insert(outputs.end(), {"interval_lower.png", "interval_upper.png", "error_quantile_95.png"});
    if (truth) {
      metrics["icp"] = icp(iv, *truth);
      const CoverageCurve curve = coverage_curve(r.samples.images, *truth);
      write_coverage_csv(out / "coverage.csv", curve);
      outputs.push_back("coverage.csv");
      double worst = 0;
      for (std::size_t i = 0; i < curve.levels.size(); ++i) {
        worst = std::max(worst, std::abs(curve.empirical[i] - curve.levels[i]));
      }
      metrics["coverage_max_deviation"] = worst;
    }
  } else {
    report["notes"].push_back("a single posterior sample gives no intervals");
  }
  if (truth) {
    metrics["psnr_mmse_x"] = psnr(x_mmse, *truth);
    metrics["ssim_mmse_x"] = ssim(x_mmse, *truth);
    metrics["psnr_mmse_z"] = psnr(z_mmse, *truth);
    metrics["ssim_mmse_z"] = ssim(z_mmse, *truth);
    metrics["psnr_init"] = psnr(clamp01(init_guess(problem)), *truth);
  } else {
    report["notes"].push_back("no-reference run");
  }
  report["metrics"] = metrics;
  report["outputs"] = outputs;
  write_json(out / "report.json", report);
  return report;
}

nlohmann::json cmd_metrics(const RunConfig& config) {
  const Tensor ref = load_image(config.image), est = load_image(config.estimate);
  if (ref.shape() != est.shape()) {
    throw ConfigError("estimate: shape " + to_string(est.shape()) + " differs from image " + to_string(ref.shape()));
  }
  make_dir(config.output);
  nlohmann::json report = base_report(config);
  report["metrics"] = {{"psnr", psnr(est, ref)}, {"ssim", ssim(est, ref)}};
  report["outputs"] = nlohmann::json::array();
  write_json(fs::path(config.output) / "report.json", report);
  return report;
}

nlohmann::json cmd_gridsearch(const RunConfig& config) {
  const auto& g = config.grid;
  std::vector<GenerativeModel> models;
  for (const auto& c : g.checkpoints) models.push_back(load_model(c));
  std::vector<Tensor> truths;
  std::vector<ObservationProblem> problems;
  for (std::size_t i = 0; i < g.images.size(); ++i) {
    truths.push_back(load_image(g.images[i]));
    for (const auto& m : models) check_image_shape(m, truths.back().shape(), "grid.images[" + std::to_string(i) + "]");
    ObservationProblem p;
    p.op = config.op.build(truths.back().shape(), derive_seed(derive_seed(config.seed, 3), i));
    p.sigma = sigma_from_8bit(config.sigma);
    p.y = degrade(p.op, truths.back(), p.sigma, derive_seed(derive_seed(config.seed, 1), i));
    problems.push_back(std::move(p));
  }

  const std::size_t C = models.size(), I = truths.size(), cells = g.lambdas.size() * C;
  struct Score {
    double psnr = 0, ssim = 0;
  };
  std::vector<Score> scores(cells * I);
  parallel_for(scores.size(), worker_threads(), [&](std::size_t job) {
    const std::size_t cell = job / I, img = job % I;
    SolverConfig s = config.solver;
    s.lambda = g.lambdas[cell / C];
    s.seed = derive_seed(derive_seed(config.seed, 2), job);
    const GenerativeModel& model = models[cell % C];
    const RestorationOutput r = run(problems[img], model, s);
    const Tensor x = clamp01(r.mmse_x);
    scores[job] = {psnr(x, truths[img]), ssim(x, truths[img])};
  });

  make_dir(config.output);
  std::string csv = "lambda,alpha,checkpoint,image,psnr,ssim\n";
  nlohmann::json cell_summary = nlohmann::json::array();
  std::size_t best = 0;
  std::vector<double> mean_psnr(cells, 0.0), mean_ssim(cells, 0.0);
  char row[96];
  for (std::size_t cell = 0; cell < cells; ++cell) {
    const double lambda = g.lambdas[cell / C], alpha = models[cell % C].alpha;
    for (std::size_t img = 0; img < I; ++img) {
      const Score& s = scores[cell * I + img];
      std::snprintf(row, sizeof row, "%.6g,%.6g,", lambda, alpha);
      csv += row + g.checkpoints[cell % C] + "," + g.images[img];
      std::snprintf(row, sizeof row, ",%.6f,%.6f\n", s.psnr, s.ssim);
      csv += row;
      mean_psnr[cell] += s.psnr / double(I);
      mean_ssim[cell] += s.ssim / double(I);
    }
    cell_summary.push_back({{"lambda", lambda},
                            {"alpha", alpha},
                            {"checkpoint", g.checkpoints[cell % C]},
                            {"mean_psnr", mean_psnr[cell]},
                            {"mean_ssim", mean_ssim[cell]}});
    const double best_lambda = g.lambdas[best / C], best_alpha = models[best % C].alpha;
    const bool better = mean_psnr[cell] > mean_psnr[best] ||
                        (mean_psnr[cell] == mean_psnr[best] &&
                         (lambda < best_lambda || (lambda == best_lambda && alpha < best_alpha)));
    if (better) best = cell;
  }
  write_text(fs::path(config.output) / "grid.csv", csv);

  nlohmann::json report = base_report(config);
  report["metrics"] = {{"best_lambda", g.lambdas[best / C]},
                       {"best_alpha", models[best % C].alpha},
                       {"best_checkpoint", g.checkpoints[best % C]},
                       {"best_mean_psnr", mean_psnr[best]},
                       {"best_mean_ssim", mean_ssim[best]},
                       {"cells", cell_summary}};
  report["outputs"] = {"grid.csv"};
  write_json(fs::path(config.output) / "report.json", report);
  return report;
}

nlohmann::json cmd_train(const RunConfig& config, std::ostream* progress) {
  const TrainingResult r = train(config.training, config.output, progress);
  nlohmann::json report = base_report(config);
  report["metrics"] = {{"final_epoch_loss", r.epoch_loss.back()},
                       {"heldout_loss", r.heldout_loss},
                       {"heldout_mse", r.heldout_mse},
                       {"steps", r.model.metadata.at("steps")}};
  report["outputs"] = {"manifest.json", "weights.bin", "train_log.csv"};
  write_json(fs::path(config.output) / "report.json", report);
  return report;
}

nlohmann::json cmd_sample(const RunConfig& config) {
  const GenerativeModel model = load_model(config.checkpoint);
  Family family;
  SolverMode mode;
  const VariationalParams params = posterior_from_json(read_json(config.posterior), family, mode);
  if (params.z_bar.shape() != batched(1, model.arch.latent_shape())) {
    throw ConfigError("posterior: latent shape " + to_string(params.z_bar.shape()) + " does not fit the checkpoint");
  }
  const PosteriorSamples s = sample_posterior(model, params, family, mode, config.samples, config.seed);
  const fs::path out = config.output;
  nlohmann::json outputs = write_samples(out, s.images);
  const Tensor mean = clamp01(batch_mean(s.images));
  write_image(out / "mmse_x.png", mean);
  outputs.push_back("mmse_x.png");
  nlohmann::json report = base_report(config);
  report["metrics"] = {{"pixel_std_mean", pixel_std_mean(s.images)}};
  report["outputs"] = outputs;
  write_json(out / "report.json", report);
  return report;
}

nlohmann::json run_task(const RunConfig& config, std::ostream* progress) {
  switch (config.task) {
    case Task::restore: return cmd_restore(config);
    case Task::degrade: return cmd_degrade(config);
    case Task::metrics: return cmd_metrics(config);
    case Task::gridsearch: return cmd_gridsearch(config);
    case Task::train: return cmd_train(config, progress);
    case Task::sample: return cmd_sample(config);
  }
  throw ConfigError("task: unsupported");
}

}  // namespace vble
