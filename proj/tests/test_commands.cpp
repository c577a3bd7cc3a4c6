#include <filesystem>
#include <fstream>
#include <iterator>

#include "doctest.h"
#include "vble/commands.hpp"
#include "vble/image_io.hpp"
#include "vble/metrics.hpp"

using namespace vble;
namespace fs = std::filesystem;

namespace {

struct Workspace {
  fs::path root;
  explicit Workspace(const std::string& name) : root(fs::temp_directory_path() / ("vble_cmd_" + name)) {
    fs::remove_all(root);
    fs::create_directories(root);
  }
  ~Workspace() { fs::remove_all(root); }
  std::string operator/(const std::string& p) const { return (root / p).string(); }
};

GenerativeModel toy_model(double alpha = 0.01) {
  Architecture a;
  a.variant = ModelVariant::linear;
  a.prior = PriorKind::standard_normal;
  a.height = a.width = 8;
  a.latent_dim = 12;
  return GenerativeModel::create(a, alpha, 17);
}

Tensor smooth_image(std::size_t side, double phase) {
  std::vector<double> v(side * side);
  for (std::size_t i = 0; i < side; ++i)
    for (std::size_t j = 0; j < side; ++j) v[i * side + j] = 0.5 + 0.3 * std::sin(0.7 * double(i) + phase) * std::cos(0.5 * double(j));
  return Tensor({1, 1, side, side}, std::move(v));
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::size_t files_in(const fs::path& dir) {
  return static_cast<std::size_t>(std::distance(fs::directory_iterator(dir), fs::directory_iterator{}));
}

RunConfig degrade_config(const Workspace& w, const nlohmann::json& op) {
  return RunConfig::from_json(
      {{"task", "degrade"}, {"image", w / "x.png"}, {"output", w / "deg"}, {"operator", op}, {"sigma", 7.65}, {"seed", 4}});
}

RunConfig restore_config(const Workspace& w, const std::string& out, bool with_truth) {
  nlohmann::json j = {{"task", "restore"},
                      {"checkpoint", w / "ckpt"},
                      {"problem", w / "deg/problem.json"},
                      {"output", w / out},
                      {"seed", 8},
                      {"solver", {{"iterations", 40}, {"posterior_samples", 5}}}};
  if (with_truth) j["image"] = w / "x.png";
  return RunConfig::from_json(j);
}

}  // namespace

TEST_CASE("raw tensors round trip exactly") {
  Workspace w("raw");
  Rng rng(1);
  const Tensor t = rng.normal_tensor({2, 3, 4});
  write_raw(w / "t.bin", t);
  CHECK(read_raw(w / "t.bin", {2, 3, 4}).vector() == t.vector());
  CHECK_THROWS_AS(read_raw(w / "t.bin", {2, 3, 5}), IoError);
  CHECK_THROWS_AS(read_raw(w / "t.bin", {2, 3, 3}), IoError);
}

TEST_CASE("degrade writes a problem that reproduces the likelihood") {
  Workspace w("degrade");
  const Tensor x = smooth_image(8, 0.0);
  write_image(w / "x.png", x);
  const Tensor x8 = read_image(w / "x.png");

  SUBCASE("blur") {
    const auto report = cmd_degrade(degrade_config(w, {{"type", "blur"}, {"blur_sigma", 1.0}, {"kernel_size", 5}}));
    const auto pj = nlohmann::json::parse(slurp(w / "deg/problem.json"));
    CHECK(pj["sigma_8bit"] == 7.65);
    CHECK(pj["sigma"].get<double>() == doctest::Approx(0.03).epsilon(1e-15));
    const ObservationProblem p = load_problem(w / "deg/problem.json");
    const ObservationProblem direct{DegradationOperator::gaussian_blur(1.0, 5),
                                    degrade(DegradationOperator::gaussian_blur(1.0, 5), x8, 7.65 / 255, derive_seed(4, 1)),
                                    7.65 / 255};
    CHECK(p.y.vector() == direct.y.vector());
    CHECK(neg_log_likelihood(p, x8).item() == doctest::Approx(neg_log_likelihood(direct, x8).item()).epsilon(1e-12));
    CHECK(report["metrics"]["psnr_degraded"].get<double>() > 20);
    CHECK_FALSE(fs::exists(w / "deg/mask.png"));
  }
  SUBCASE("mask") {
    cmd_degrade(degrade_config(w, {{"type", "mask"}, {"observed_fraction", 0.5}}));
    CHECK(fs::exists(w / "deg/mask.png"));
    const ObservationProblem p = load_problem(w / "deg/problem.json");
    const Tensor expected = random_mask(8, 8, 0.5, derive_seed(4, 3));
    CHECK(p.op.mask_tensor().vector() == expected.vector());
  }
  SUBCASE("downsample") {
    cmd_degrade(degrade_config(w, {{"type", "downsample"}, {"factor", 2}}));
    const ObservationProblem p = load_problem(w / "deg/problem.json");
    CHECK(p.y.shape() == Shape{1, 1, 4, 4});
    CHECK(p.image_shape() == Shape{1, 1, 8, 8});
  }
}

TEST_CASE("restore writes its outputs and is deterministic") {
  Workspace w("restore");
  write_image(w / "x.png", smooth_image(8, 0.3));
  save_checkpoint(toy_model(), w / "ckpt");
  cmd_degrade(degrade_config(w, {{"type", "blur"}, {"blur_sigma", 1.0}, {"kernel_size", 5}}));

  const auto ref = cmd_restore(restore_config(w, "a", false));
  CHECK(files_in(fs::path(w / "a") / "samples") == 5);
  CHECK_FALSE(fs::exists(w / "a/coverage.csv"));
  CHECK(ref["notes"].dump().find("no-reference run") != std::string::npos);
  for (const char* f : {"mmse_x.png", "mmse_z.png", "error_quantile_95.png", "interval_lower.png",
                        "interval_upper.png", "trace.csv", "report.json", "posterior.json"}) {
    CHECK_MESSAGE(fs::exists(fs::path(w / "a") / f), f);
  }
  CHECK(ref["config"]["seed"] == 8);

  const auto again = cmd_restore(restore_config(w, "b", false));
  CHECK(again["metrics"] == ref["metrics"]);
  for (int i = 0; i < 5; ++i) {
    const std::string s = "samples/sample_00" + std::to_string(i) + ".png";
    CHECK(slurp(fs::path(w / "a") / s) == slurp(fs::path(w / "b") / s));
  }

  const auto scored = cmd_restore(restore_config(w, "c", true));
  CHECK(fs::exists(w / "c/coverage.csv"));
  CHECK(scored["metrics"].contains("psnr_mmse_x"));
  CHECK(scored["metrics"].contains("icp"));
  CHECK_FALSE(scored.contains("notes"));

  RunConfig sample = RunConfig::from_json({{"task", "sample"},
                                           {"checkpoint", w / "ckpt"},
                                           {"posterior", w / "a/posterior.json"},
                                           {"samples", 3},
                                           {"output", w / "s"}});
  cmd_sample(sample);
  CHECK(files_in(fs::path(w / "s") / "samples") == 3);
}

TEST_CASE("restore reports checkpoint problems") {
  Workspace w("restore_errors");
  write_image(w / "x.png", smooth_image(8, 0.3));
  cmd_degrade(degrade_config(w, {{"type", "identity"}}));
  CHECK_THROWS_AS(cmd_restore(restore_config(w, "a", false)), IoError);

  Architecture big = toy_model().arch;
  big.height = big.width = 16;
  save_checkpoint(GenerativeModel::create(big, 0.01, 1), w / "ckpt");
  CHECK_THROWS_WITH_AS(cmd_restore(restore_config(w, "a", false)), doctest::Contains("checkpoint expects"), ConfigError);
}

TEST_CASE("gridsearch scores every cell and breaks ties") {
  Workspace w("grid");
  write_image(w / "v0.png", smooth_image(8, 0.1));
  write_image(w / "v1.png", smooth_image(8, 1.1));
  save_checkpoint(toy_model(0.05), w / "hi");
  save_checkpoint(toy_model(0.01), w / "lo");
  nlohmann::json j = {{"task", "gridsearch"},
                      {"output", w / "g"},
                      {"seed", 2},
                      {"operator", {{"type", "blur"}, {"blur_sigma", 1.0}, {"kernel_size", 5}}},
                      {"solver", {{"mode", "map-z"}, {"iterations", 30}, {"posterior_samples", 2}}},
                      {"grid", {{"lambdas", {0.5, 2.0}}, {"checkpoints", {w / "hi", w / "lo"}}, {"images", {w / "v0.png", w / "v1.png"}}}}};
  const auto report = cmd_gridsearch(RunConfig::from_json(j));
  const std::string csv = slurp(w / "g/grid.csv");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 2 * 2 * 2);
  // Both checkpoints share weights, so each lambda ties across alpha.
  CHECK(report["metrics"]["best_alpha"] == 0.01);
  const auto& cells = report["metrics"]["cells"];
  CHECK(cells.size() == 4);
  CHECK(cells[0]["mean_psnr"] == cells[1]["mean_psnr"]);

  j["grid"]["lambdas"] = {0.5};
  j["grid"]["checkpoints"] = {w / "hi"};
  j["grid"]["images"] = {w / "v0.png"};
  const auto single = cmd_gridsearch(RunConfig::from_json(j));
  CHECK(single["metrics"]["best_lambda"] == 0.5);
  CHECK(single["metrics"]["best_checkpoint"] == w / "hi");
  CHECK(single["metrics"]["best_mean_psnr"] == single["metrics"]["cells"][0]["mean_psnr"]);
}

TEST_CASE("metrics command scores an estimate") {
  Workspace w("metrics");
  write_image(w / "ref.png", Tensor::full({1, 1, 8, 8}, 0.2));
  write_image(w / "est.png", Tensor::full({1, 1, 8, 8}, 0.2 + 26.0 / 255));
  const auto r = cmd_metrics(RunConfig::from_json(
      {{"task", "metrics"}, {"image", w / "ref.png"}, {"estimate", w / "est.png"}, {"output", w / "m"}}));
  CHECK(r["metrics"]["psnr"].get<double>() == doctest::Approx(20 * std::log10(255.0 / 26)).epsilon(1e-9));
  CHECK(fs::exists(w / "m/report.json"));
}
