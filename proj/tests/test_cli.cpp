#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "vble/commands.hpp"
#include "vble/image_io.hpp"

using namespace vble;
namespace fs = std::filesystem;

namespace {

int run_cli(const std::string& args) {
  const std::string cmd = std::string(VBLE_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

void write_json(const fs::path& p, const nlohmann::json& j) { std::ofstream(p) << j.dump(); }

}  // namespace

TEST_CASE("cli exit codes") {
  const fs::path dir = fs::temp_directory_path() / "vble_cli_test";
  fs::remove_all(dir);
  fs::create_directories(dir);
  write_image(dir / "x.png", Tensor::full({1, 1, 8, 8}, 0.5));
  Architecture a;
  a.variant = ModelVariant::linear;
  a.prior = PriorKind::standard_normal;
  a.height = a.width = 8;
  save_checkpoint(GenerativeModel::create(a, 0.01, 1), dir / "ckpt");
  write_json(dir / "deg.json", {{"image", "x.png"}, {"output", "deg"}, {"operator", {{"type", "identity"}}}});
  const std::string deg = "--config " + (dir / "deg.json").string();

  CHECK(run_cli("degrade " + deg) == 0);
  CHECK(fs::exists(dir / "deg/problem.json"));
  CHECK(run_cli("") == 2);
  CHECK(run_cli("degrade") == 2);
  CHECK(run_cli("degrade " + deg + " --override sigma=0") == 2);
  CHECK(run_cli("degrade " + deg + " --override bogus=1") == 2);
  CHECK(run_cli("degrade " + deg + " --override image=missing.png") == 4);
  CHECK(run_cli("degrade --config " + (dir / "absent.json").string()) == 4);

  write_json(dir / "restore.json", {{"checkpoint", "ckpt"},
                                    {"problem", "deg/problem.json"},
                                    {"output", "res"},
                                    {"solver", {{"iterations", 5}, {"posterior_samples", 2}}}});
  const std::string restore = "restore --config " + (dir / "restore.json").string();
  CHECK(run_cli(restore) == 0);
  CHECK(fs::exists(dir / "res/report.json"));
  CHECK(run_cli(restore + " --override checkpoint=nowhere") == 4);
  // A huge step drives the latent spread to overflow.
  CHECK(run_cli(restore + " --override solver.learning_rate=1e300") == 3);
  fs::remove_all(dir);
}
