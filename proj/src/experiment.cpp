#include "ifsd/experiment.hpp"

#include "ifsd/io.hpp"
#include "ifsd/metrics.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace ifsd {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json world_to_json(const WorldConfig& w) {
  return json{{"num_base_classes", w.num_base_classes},
              {"num_novel_classes", w.num_novel_classes},
              {"modes_per_class", w.modes_per_class},
              {"d_world", w.d_world},
              {"scenes_per_base_class", w.scenes_per_base_class},
              {"shots_K", w.shots_K},
              {"instances_per_scene", json::array({w.instances_per_scene_min,
                                                   w.instances_per_scene_max})},
              {"proposal_jitter", w.proposal_jitter},
              {"feature_noise", w.feature_noise},
              {"extent", w.extent},
              {"test_scenes_per_class", w.test_scenes_per_class},
              {"novel_mode_offset", w.novel_mode_offset},
              {"seed", w.seed}};
}

WorldConfig world_from_json(const json& j) {
  WorldConfig w;
  w.num_base_classes = j.at("num_base_classes").get<int>();
  w.num_novel_classes = j.at("num_novel_classes").get<int>();
  w.modes_per_class = j.at("modes_per_class").get<int>();
  w.d_world = j.at("d_world").get<int>();
  w.scenes_per_base_class = j.at("scenes_per_base_class").get<int>();
  w.shots_K = j.at("shots_K").get<int>();
  w.instances_per_scene_min = j.at("instances_per_scene").at(0).get<int>();
  w.instances_per_scene_max = j.at("instances_per_scene").at(1).get<int>();
  w.proposal_jitter = j.at("proposal_jitter").get<double>();
  w.feature_noise = j.at("feature_noise").get<double>();
  w.extent = j.at("extent").get<double>();
  w.test_scenes_per_class = j.at("test_scenes_per_class").get<int>();
  w.novel_mode_offset = j.at("novel_mode_offset").get<double>();
  w.seed = j.at("seed").get<std::uint64_t>();
  return w;
}

json train_to_json(const TrainConfig& t) {
  return json{{"pretrain",
               {{"epochs", t.pretrain.epochs},
                {"lr", t.pretrain.lr},
                {"lr_drop_epoch", t.pretrain.lr_drop_epoch},
                {"lr_drop_factor", t.pretrain.lr_drop_factor}}},
              {"transfer", {{"epochs", t.transfer.epochs}, {"lr", t.transfer.lr}}},
              {"momentum", t.momentum},
              {"weight_decay", t.weight_decay},
              {"batch_scenes", t.batch_scenes},
              {"seed", t.seed},
              {"detector",
               {{"d_feat", t.detector.d_feat},
                {"d_hidden", t.detector.d_hidden},
                {"d_obj", t.detector.d_obj}}}};
}

TrainConfig train_from_json(const json& j) {
  TrainConfig t;
  const json& p = j.at("pretrain");
  t.pretrain.epochs = p.at("epochs").get<int>();
  t.pretrain.lr = p.at("lr").get<double>();
  t.pretrain.lr_drop_epoch = p.at("lr_drop_epoch").get<int>();
  t.pretrain.lr_drop_factor = p.at("lr_drop_factor").get<double>();
  t.transfer.epochs = j.at("transfer").at("epochs").get<int>();
  t.transfer.lr = j.at("transfer").at("lr").get<double>();
  t.momentum = j.at("momentum").get<double>();
  t.weight_decay = j.at("weight_decay").get<double>();
  t.batch_scenes = j.at("batch_scenes").get<int>();
  t.seed = j.at("seed").get<std::uint64_t>();
  t.detector.d_feat = j.at("detector").at("d_feat").get<int>();
  t.detector.d_hidden = j.at("detector").at("d_hidden").get<int>();
  t.detector.d_obj = j.at("detector").at("d_obj").get<int>();
  return t;
}

json recipe_to_json(const SessionRecipe& r) {
  return json{{"strategy", to_string(r.strategy)},
              {"use_distillation", r.use_distillation},
              {"exemplar_method", to_string(r.exemplar_method)},
              {"reuse_initial_targets", r.reuse_initial_targets},
              {"loss",
               {{"alpha", r.loss.alpha},
                {"temperature", r.loss.temperature},
                {"loc_weight", r.loss.loc_weight},
                {"rpn_weight", r.loss.rpn_weight},
                {"background_iou", r.loss.background_iou},
                {"background_ratio", r.loss.background_ratio},
                {"distill_include_background", r.loss.distill_include_background}}}};
}

SessionRecipe recipe_from_json(const json& j) {
  SessionRecipe r;
  r.strategy = strategy_from_string(j.at("strategy").get<std::string>());
  r.use_distillation = j.at("use_distillation").get<bool>();
  r.exemplar_method = exemplar_method_from_string(j.at("exemplar_method").get<std::string>());
  r.reuse_initial_targets = j.at("reuse_initial_targets").get<bool>();
  const json& l = j.at("loss");
  r.loss.alpha = l.at("alpha").get<double>();
  r.loss.temperature = l.at("temperature").get<double>();
  r.loss.loc_weight = l.at("loc_weight").get<double>();
  r.loss.rpn_weight = l.at("rpn_weight").get<double>();
  r.loss.background_iou = l.at("background_iou").get<double>();
  r.loss.background_ratio = l.at("background_ratio").get<int>();
  r.loss.distill_include_background = l.at("distill_include_background").get<bool>();
  return r;
}

json spec_to_json(const ExperimentSpec& spec) {
  return json{{"world", world_to_json(spec.world)},
              {"train", train_to_json(spec.train)},
              {"recipe", recipe_to_json(spec.recipe)},
              {"mode", spec.mode == TaskMode::Typical ? "typical" : "continual"},
              {"eval_cadence", spec.eval_cadence},
              {"seeds", spec.seeds},
              {"output_dir", spec.output_dir}};
}

ExperimentSpec spec_from_json(const json& j) {
  ExperimentSpec spec;
  spec.world = world_from_json(j.at("world"));
  spec.train = train_from_json(j.at("train"));
  spec.recipe = recipe_from_json(j.at("recipe"));
  const std::string mode = j.at("mode").get<std::string>();
  if (mode == "typical") spec.mode = TaskMode::Typical;
  else if (mode == "continual") spec.mode = TaskMode::Continual;
  else throw ConfigError("unknown task mode: " + mode);
  spec.eval_cadence = j.at("eval_cadence").get<std::string>();
  if (spec.eval_cadence != "per_session" && spec.eval_cadence != "final")
    throw ConfigError("unknown eval_cadence: " + spec.eval_cadence);
  spec.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  if (spec.seeds.empty()) throw ConfigError("seeds must not be empty");
  if (j.contains("output_dir")) spec.output_dir = j.at("output_dir").get<std::string>();
  return spec;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

ExperimentSpec with_seed(const ExperimentSpec& spec, std::uint64_t seed) {
  ExperimentSpec s = spec;
  s.world.seed = seed;
  s.train.seed = seed;
  s.seeds = {seed};
  return s;
}

void require_missing_or_force(const fs::path& p, bool force) {
  if (!force && fs::exists(p))
    throw DataError("refusing to overwrite existing " + p.string() + " (use --force)");
}

std::string trace_to_csv(const LossTrace& trace) {
  std::string out = "stage,epoch,step,rpn,loc,cls,kd,total\n";
  for (const LossTraceRow& row : trace) {
    out += row.stage;
    out += ',';
    out += std::to_string(row.epoch);
    out += ',';
    out += std::to_string(row.step);
    out += ',';
    out += format_g17(row.parts.rpn);
    out += ',';
    out += format_g17(row.parts.loc);
    out += ',';
    out += format_g17(row.parts.cls);
    out += ',';
    out += row.parts.has_kd ? format_g17(row.parts.kd) : std::string("-");
    out += ',';
    out += format_g17(row.total);
    out += '\n';
  }
  return out;
}

struct LoadedRun {
  json manifest;
  std::vector<EvalReport> reports; // per session
  fs::path dir;
};

LoadedRun load_run_dir(const fs::path& dir) {
  LoadedRun run;
  run.dir = dir;
  const fs::path mpath = dir / "manifest.json";
  if (!fs::exists(mpath)) throw DataError("no manifest.json in " + dir.string());
  run.manifest = json::parse(read_file(mpath));
  if (run.manifest.at("type").get<std::string>() != "run_manifest")
    throw DataError("not a run manifest: " + mpath.string());
  const int sessions = run.manifest.at("session_count").get<int>();
  for (int s = 0; s < sessions; ++s) {
    const fs::path rpath = dir / ("report_session" + std::to_string(s) + ".json");
    if (fs::exists(rpath)) run.reports.push_back(report_from_text(read_file(rpath)));
  }
  if (run.reports.empty()) throw DataError("no session reports in " + dir.string());
  return run;
}

struct Moments {
  double mean = 0.0;
  double stddev = 0.0;
  int n = 0;
};

Moments moments(const std::vector<double>& xs) {
  Moments m;
  m.n = static_cast<int>(xs.size());
  if (xs.empty()) return m;
  for (double x : xs) m.mean += x;
  m.mean /= xs.size();
  double var = 0.0;
  for (double x : xs) var += (x - m.mean) * (x - m.mean);
  m.stddev = xs.size() > 1 ? std::sqrt(var / (xs.size() - 1)) : 0.0;
  return m;
}

} // namespace

ExperimentSpec spec_from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("spec parse error: ") + e.what());
  }
  try {
    return spec_from_json(j);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad spec: ") + e.what());
  }
}

std::string spec_to_json_text(const ExperimentSpec& spec) {
  return spec_to_json(spec).dump(2) + "\n";
}

ExperimentSpec load_spec(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("spec file not found: " + path.string());
  return spec_from_json_text(read_file(path));
}

std::string config_hash(const ExperimentSpec& spec) {
  return hex64(fnv1a64(spec_to_json(spec).dump()));
}

std::string group_hash(const ExperimentSpec& spec) {
  json j = spec_to_json(spec);
  j.erase("seeds");
  j.erase("output_dir");
  // Per-run seeds do not separate groups either.
  j["world"].erase("seed");
  j["train"].erase("seed");
  return hex64(fnv1a64(j.dump()));
}

void cmd_generate(const ExperimentSpec& spec, const fs::path& out_dir, bool force) {
  fs::create_directories(out_dir);
  for (const std::uint64_t seed : spec.seeds) {
    const ExperimentSpec seeded = with_seed(spec, seed);
    const fs::path dir = out_dir / ("seed" + std::to_string(seed));
    const fs::path base_path = dir / "base.jsonl";
    const fs::path tasks_path = dir / "tasks.jsonl";
    const fs::path test_path = dir / "test.jsonl";
    const fs::path manifest_path = dir / "manifest.json";
    for (const fs::path& p : {base_path, tasks_path, test_path, manifest_path})
      require_missing_or_force(p, force);
    fs::create_directories(dir);

    const World world = generate_world(seeded.world);
    const TaskSequence tasks = regroup_sequence(world.novel_shots, spec.mode);
    save_split(base_path, world.base_split);
    save_sequence(tasks_path, tasks);
    save_split(test_path, world.test_split);

    json manifest{{"type", "dataset_manifest"},
                  {"artifact_version", kArtifactVersion},
                  {"world", world_to_json(seeded.world)},
                  {"mode", spec.mode == TaskMode::Typical ? "typical" : "continual"},
                  {"base_scenes", world.base_split.scenes.size()},
                  {"test_scenes", world.test_split.scenes.size()},
                  {"sessions", tasks.sessions.size()}};
    write_file(manifest_path, manifest.dump(2) + "\n");
  }
}

void cmd_run(const ExperimentSpec& spec, const fs::path& data_dir, const fs::path& out_dir,
             bool force) {
  for (const std::uint64_t seed : spec.seeds) {
    const ExperimentSpec seeded = with_seed(spec, seed);
    const fs::path ddir = data_dir / ("seed" + std::to_string(seed));
    if (!fs::exists(ddir / "manifest.json"))
      throw DataError("dataset not found under " + ddir.string() + " (run generate first)");
    const json dmanifest = json::parse(read_file(ddir / "manifest.json"));
    if (dmanifest.at("world") != world_to_json(seeded.world))
      throw DataError("dataset under " + ddir.string() +
                      " was generated from a different world config");

    const DatasetSplit base_split = load_split(ddir / "base.jsonl");
    const TaskSequence tasks_raw = load_sequence(ddir / "tasks.jsonl");
    const DatasetSplit test_split = load_split(ddir / "test.jsonl");
    const TaskSequence tasks = regroup_sequence(tasks_raw, spec.mode);
    validate_sequence(tasks, base_split.visible_classes);

    const fs::path rdir = out_dir / ("seed" + std::to_string(seed));
    require_missing_or_force(rdir / "manifest.json", force);
    fs::create_directories(rdir);

    LossTrace trace;
    const DetectorState pretrained = pretrain(base_split, seeded.train, &trace);
    save_checkpoint(rdir / "ckpt_pretrain.bin", pretrained);

    const std::vector<ClassId> base_classes(base_split.visible_classes.begin(),
                                            base_split.visible_classes.end());
    ExemplarSet exemplars;
    std::vector<DistillTargetStore> stores;
    const std::vector<SessionResult> results =
        run_task_sequence(pretrained, tasks, seeded.recipe, seeded.train, base_split,
                          test_split, base_classes, &trace, &exemplars, &stores);

    for (const SessionResult& res : results) {
      const std::string tag = "session" + std::to_string(res.session_index);
      save_checkpoint(rdir / ("ckpt_" + tag + ".bin"), res.state);
      const bool last = res.session_index == static_cast<int>(results.size()) - 1;
      if (spec.eval_cadence == "per_session" || last)
        write_file(rdir / ("report_" + tag + ".json"), report_to_text(res.report) + "\n");
    }
    for (std::size_t si = 0; si < stores.size(); ++si)
      save_distill_store(rdir / ("distill_session" + std::to_string(si) + ".bin"), stores[si]);
    if (seeded.recipe.exemplar_method != ExemplarMethod::None)
      write_file(rdir / "exemplars.json", exemplar_set_to_text(exemplars) + "\n");
    write_file(rdir / "losses.csv", trace_to_csv(trace));

    json session_list = json::array();
    for (const auto& task : tasks.sessions) {
      json cl = json::array();
      for (ClassId c : task.new_classes) cl.push_back(c);
      session_list.push_back(json{{"new_classes", cl}, {"shots", task.shot_scenes.size()}});
    }
    json manifest{{"type", "run_manifest"},
                  {"artifact_version", kArtifactVersion},
                  {"config_hash", config_hash(seeded)},
                  {"group_hash", group_hash(seeded)},
                  {"seed", seed},
                  {"spec", spec_to_json(seeded)},
                  {"session_count", results.size()},
                  {"sessions", session_list}};
    write_file(rdir / "manifest.json", manifest.dump(2) + "\n");
  }
}

void replay_manifest(const fs::path& manifest_path, const fs::path& out_dir) {
  if (!fs::exists(manifest_path))
    throw ConfigError("manifest not found: " + manifest_path.string());
  const json manifest = json::parse(read_file(manifest_path));
  if (manifest.at("type").get<std::string>() != "run_manifest")
    throw ConfigError("not a run manifest: " + manifest_path.string());
  const ExperimentSpec spec = spec_from_json(manifest.at("spec"));
  const fs::path data_dir = out_dir / "_data";
  cmd_generate(spec, data_dir, /*force=*/true);
  cmd_run(spec, data_dir, out_dir, /*force=*/true);
}

void cmd_report(const std::vector<fs::path>& run_dirs, const fs::path& out_dir) {
  if (run_dirs.empty()) throw ConfigError("no run directories given");
  std::vector<LoadedRun> runs;
  for (const fs::path& dir : run_dirs) runs.push_back(load_run_dir(dir));

  std::set<std::pair<std::string, std::uint64_t>> seen;
  for (const LoadedRun& run : runs) {
    if (run.manifest.at("artifact_version").get<std::string>() != kArtifactVersion)
      throw DataError("run " + run.dir.string() + " was produced by a different version");
    const auto key = std::make_pair(run.manifest.at("group_hash").get<std::string>(),
                                    run.manifest.at("seed").get<std::uint64_t>());
    if (!seen.insert(key).second)
      throw DataError("duplicate run for configuration " + key.first + " seed " +
                      std::to_string(key.second));
  }

  // Group by configuration.
  std::map<std::string, std::vector<const LoadedRun*>> groups;
  for (const LoadedRun& run : runs)
    groups[run.manifest.at("group_hash").get<std::string>()].push_back(&run);

  std::string summary =
      "group,strategy,distillation,exemplar,mode,seeds,"
      "base_ap_mean,base_ap_std,base_ar_mean,base_ar_std,"
      "novel_ap_mean,novel_ap_std,novel_ar_mean,novel_ar_std,"
      "hm_ap_mean,hm_ap_std,hm_ar_mean,hm_ar_std\n";
  std::string series = "group,session,hm_ap_mean,hm_ap_std,hm_ar_mean,hm_ar_std\n";

  for (const auto& [ghash, members] : groups) {
    const json& spec0 = members.front()->manifest.at("spec");
    const std::size_t sessions = members.front()->reports.size();
    for (const LoadedRun* run : members) {
      if (run->reports.size() != sessions)
        throw DataError("runs in configuration " + ghash + " have differing session counts");
      if (run->manifest.at("spec").at("recipe") != spec0.at("recipe") ||
          run->manifest.at("spec").at("mode") != spec0.at("mode"))
        throw DataError("incompatible specs grouped under " + ghash);
    }

    auto collect_final = [&members](auto getter) {
      std::vector<double> xs;
      for (const LoadedRun* run : members) {
        const std::optional<double> v = getter(run->reports.back());
        if (v) xs.push_back(*v);
      }
      return moments(xs);
    };
    const Moments base_ap = collect_final([](const EvalReport& r) { return r.base_ap; });
    const Moments base_ar = collect_final([](const EvalReport& r) { return r.base_ar; });
    const Moments novel_ap = collect_final([](const EvalReport& r) { return r.novel_ap; });
    const Moments novel_ar = collect_final([](const EvalReport& r) { return r.novel_ar; });
    const Moments hm_ap = collect_final([](const EvalReport& r) { return r.hm_ap; });
    const Moments hm_ar = collect_final([](const EvalReport& r) { return r.hm_ar; });

    summary += ghash + ',';
    summary += spec0.at("recipe").at("strategy").get<std::string>() + ',';
    summary += (spec0.at("recipe").at("use_distillation").get<bool>() ? "yes" : "no");
    summary += ',';
    summary += spec0.at("recipe").at("exemplar_method").get<std::string>() + ',';
    summary += spec0.at("mode").get<std::string>() + ',';
    summary += std::to_string(members.size()) + ',';
    auto put = [&summary](const Moments& m) {
      summary += m.n > 0 ? format_g17(m.mean) : std::string("-");
      summary += ',';
      summary += m.n > 0 ? format_g17(m.stddev) : std::string("-");
    };
    put(base_ap);
    summary += ',';
    put(base_ar);
    summary += ',';
    put(novel_ap);
    summary += ',';
    put(novel_ar);
    summary += ',';
    put(hm_ap);
    summary += ',';
    put(hm_ar);
    summary += '\n';

    if (spec0.at("mode").get<std::string>() == "continual") {
      for (std::size_t s = 0; s < sessions; ++s) {
        std::vector<double> ap_xs, ar_xs;
        for (const LoadedRun* run : members) {
          if (run->reports[s].hm_ap) ap_xs.push_back(*run->reports[s].hm_ap);
          if (run->reports[s].hm_ar) ar_xs.push_back(*run->reports[s].hm_ar);
        }
        const Moments map = moments(ap_xs);
        const Moments mar = moments(ar_xs);
        series += ghash + ',' + std::to_string(s) + ',';
        series += map.n ? format_g17(map.mean) : std::string("-");
        series += ',';
        series += map.n ? format_g17(map.stddev) : std::string("-");
        series += ',';
        series += mar.n ? format_g17(mar.mean) : std::string("-");
        series += ',';
        series += mar.n ? format_g17(mar.stddev) : std::string("-");
        series += '\n';
      }
    }
  }

  fs::create_directories(out_dir);
  write_file(out_dir / "summary.csv", summary);
  write_file(out_dir / "series.csv", series);
}

fs::path resolve_output_path(const std::string& path) {
  const fs::path p(path);
  if (p.is_absolute()) return p;
  if (const char* root = std::getenv("IFSD_OUTPUT_ROOT"); root != nullptr && *root != '\0')
    return fs::path(root) / p;
  return p;
}

} // namespace ifsd
