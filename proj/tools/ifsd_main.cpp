#include "ifsd/experiment.hpp"
#include "ifsd/train.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <exception>
#include <string>
#include <vector>

// Batch experiment driver. Exit codes: 0 success, 1 usage error,
// 2 configuration error, 3 data error, 4 numeric failure.

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"Incremental few-shot detection lab"};
  app.require_subcommand(1);

  std::string spec_path, manifest_path, data_path, out_path;
  bool force = false;
  std::vector<std::string> run_dirs;

  CLI::App* generate = app.add_subcommand("generate", "Write synthetic datasets for a spec");
  generate->add_option("--spec", spec_path, "Experiment spec (JSON)")->required();
  generate->add_option("--out", out_path, "Output directory")->required();
  generate->add_flag("--force", force, "Overwrite existing files");

  CLI::App* run = app.add_subcommand("run", "Run the pipeline for a spec or manifest");
  run->add_option("--spec", spec_path, "Experiment spec (JSON)");
  run->add_option("--manifest", manifest_path, "Replay an existing run manifest");
  run->add_option("--data", data_path, "Dataset directory from `generate`");
  run->add_option("--out", out_path, "Output directory")->required();
  run->add_flag("--force", force, "Overwrite existing files");

  CLI::App* report = app.add_subcommand("report", "Aggregate run directories");
  report->add_option("dirs", run_dirs, "Run directories (per-seed)")->required();
  report->add_option("--out", out_path, "Output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (generate->parsed()) {
      const ifsd::ExperimentSpec spec = ifsd::load_spec(spec_path);
      ifsd::cmd_generate(spec, ifsd::resolve_output_path(out_path), force);
    } else if (run->parsed()) {
      if (!manifest_path.empty()) {
        ifsd::replay_manifest(manifest_path, ifsd::resolve_output_path(out_path));
      } else {
        if (spec_path.empty() || data_path.empty())
          throw ifsd::ConfigError("run requires --spec and --data (or --manifest)");
        const ifsd::ExperimentSpec spec = ifsd::load_spec(spec_path);
        ifsd::cmd_run(spec, data_path, ifsd::resolve_output_path(out_path), force);
      }
    } else if (report->parsed()) {
      std::vector<std::filesystem::path> dirs(run_dirs.begin(), run_dirs.end());
      ifsd::cmd_report(dirs, ifsd::resolve_output_path(out_path));
    }
  } catch (const ifsd::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const ifsd::DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kExitData;
  } catch (const ifsd::DivergenceError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return kExitNumeric;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitData;
  }
  return 0;
}
