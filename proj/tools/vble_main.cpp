#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "vble/commands.hpp"
#include "vble/image_io.hpp"

namespace {

enum ExitCode { kOk = 0, kUnexpected = 1, kConfig = 2, kNumeric = 3, kIo = 4 };

int fail(int code, const std::string& kind, const std::exception& e) {
  std::cerr << "vble: " << kind << ": " << e.what() << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Variational latent-space restoration with uncertainty maps"};
  app.require_subcommand(1);
  std::string config_path;
  std::vector<std::string> overrides;
  for (const char* name : {"restore", "train", "degrade", "metrics", "gridsearch", "sample"}) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "JSON run config (or a report.json)")->required();
    sub->add_option("--override", overrides, "key.path=value applied on top of the config");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }
  const std::string task = app.get_subcommands().front()->get_name();
  overrides.insert(overrides.begin(), "task=" + task);

  try {
    const vble::RunConfig config = vble::load_run_config(config_path, overrides);
    const nlohmann::json report = vble::run_task(config, &std::cerr);
    std::cout << (std::filesystem::path(config.output) / "report.json").string() << "\n";
    std::cout << report.at("metrics").dump() << "\n";
    return kOk;
  } catch (const vble::NumericError& e) {
    return fail(kNumeric, "numeric failure", e);
  } catch (const std::invalid_argument& e) {
    return fail(kConfig, "config error", e);
  } catch (const std::domain_error& e) {
    return fail(kConfig, "config error", e);
  } catch (const vble::IoError& e) {
    return fail(kIo, "I/O error", e);
  } catch (const vble::ImageError& e) {
    return fail(kIo, "I/O error", e);
  } catch (const vble::CheckpointError& e) {
    return fail(kIo, "I/O error", e);
  } catch (const std::filesystem::filesystem_error& e) {
    return fail(kIo, "I/O error", e);
  } catch (const std::exception& e) {
    return fail(kUnexpected, "error", e);
  }
}
