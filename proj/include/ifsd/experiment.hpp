#pragma once

#include "ifsd/core.hpp"
#include "ifsd/exemplar.hpp"
#include "ifsd/train.hpp"
#include "ifsd/world.hpp"

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

// Batch experiment driver behind the CLI: dataset generation, pipeline
// runs and aggregation. Everything an invocation produces is a pure
// function of the serialized spec (plus the artifact version), so replaying
// a run manifest reproduces each output file byte for byte.

namespace ifsd {

inline constexpr const char* kArtifactVersion = "1.0.0";

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ExperimentSpec {
  WorldConfig world;   // world.seed is replaced by each sweep seed
  TrainConfig train;   // train.seed likewise
  SessionRecipe recipe;
  TaskMode mode = TaskMode::Typical;
  std::string eval_cadence = "per_session"; // or "final"
  std::vector<std::uint64_t> seeds = {1};
  std::string output_dir; // optional default for the CLI --out
};

ExperimentSpec spec_from_json_text(const std::string& text);
std::string spec_to_json_text(const ExperimentSpec& spec);
ExperimentSpec load_spec(const std::filesystem::path& path);

// FNV-1a over the canonical serialization; changes iff any spec field
// changes. group_hash ignores the seed list so seed sweeps of one
// configuration aggregate together.
std::string config_hash(const ExperimentSpec& spec);
std::string group_hash(const ExperimentSpec& spec);

// Writes base.jsonl, tasks.jsonl, test.jsonl and a dataset manifest per
// seed under out_dir/seed<S>/. Refuses to overwrite existing dataset files
// unless force is set.
void cmd_generate(const ExperimentSpec& spec, const std::filesystem::path& out_dir, bool force);

// Runs pretrain -> task sequence -> evaluation per seed against datasets
// produced by cmd_generate. Emits checkpoints, per-session eval reports,
// distillation stores, the exemplar set, a loss-trace CSV and a run
// manifest under out_dir/seed<S>/.
void cmd_run(const ExperimentSpec& spec, const std::filesystem::path& data_dir,
             const std::filesystem::path& out_dir, bool force);

// Re-executes the spec embedded in a run manifest (regenerating its
// dataset) and writes the same outputs under out_dir.
void replay_manifest(const std::filesystem::path& manifest_path,
                     const std::filesystem::path& out_dir);

// Aggregates run directories: per-configuration mean/std of the final
// session metrics (summary.csv) and per-session harmonic-mean series for
// continual runs (series.csv). Rejects duplicated (configuration, seed)
// pairs and mixed artifact versions.
void cmd_report(const std::vector<std::filesystem::path>& run_dirs,
                const std::filesystem::path& out_dir);

// Resolves a CLI output path against the IFSD_OUTPUT_ROOT environment
// variable when it is set and the path is relative.
std::filesystem::path resolve_output_path(const std::string& path);

} // namespace ifsd
