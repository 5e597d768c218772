#include "ifsd/train.hpp"

#include "ifsd/rng.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace ifsd {

namespace {

// Runs `epochs` of batched SGD over the split's scenes. Batch composition
// and background sampling derive from (seed, stage, epoch) substreams so
// runs replay exactly.
void train_epochs(DetectorState& state, const DatasetSplit& split, const LossConfig& loss_cfg,
                  const DistillTargetStore* store, TransferStrategy strategy,
                  const TrainConfig& cfg, int epochs,
                  const std::function<double(int)>& lr_for_epoch, const std::string& stage,
                  LossTrace* trace, const SceneExposure* exposure = nullptr) {
  SgdOptimizer opt(state, cfg.momentum, cfg.weight_decay);
  DetectorGrads grads = make_grads_like(state);
  std::vector<const Scene*> order;
  order.reserve(split.scenes.size());
  for (const Scene& s : split.scenes) order.push_back(&s);

  for (int epoch = 0; epoch < epochs; ++epoch) {
    Rng shuffle_rng = substream(cfg.seed, "sampling/" + stage + "/shuffle",
                                static_cast<std::uint64_t>(epoch));
    shuffle_rng.shuffle(order);
    Rng bg_rng = substream(cfg.seed, "sampling/" + stage + "/background",
                           static_cast<std::uint64_t>(epoch));
    const double lr = lr_for_epoch(epoch);
    int step = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_scenes)) {
      const std::size_t end =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_scenes));
      const std::vector<const Scene*> batch_scenes(order.begin() + static_cast<std::ptrdiff_t>(start),
                                                   order.begin() + static_cast<std::ptrdiff_t>(end));
      const std::vector<RegionSample> batch =
          build_region_batch(batch_scenes, split.visible_classes, loss_cfg, bg_rng, exposure);
      if (batch.empty()) continue;
      grads.set_zero();
      const BatchResult result =
          compute_batch(state, batch, store, loss_cfg, strategy, &grads);
      if (!std::isfinite(result.total))
        throw DivergenceError(stage, epoch, step, result.total);
      opt.step(state, grads, lr, strategy);
      if (trace != nullptr)
        trace->push_back({stage, epoch, step, result.parts, result.total});
      ++step;
    }
  }
}

// Shot count K: annotated instances of a session's first new class across
// its shot scenes. Cluster count per class equals the shot count.
int shots_per_class(const TaskSequence& sequence) {
  if (sequence.sessions.empty()) return 0;
  const SessionTask& first = sequence.sessions.front();
  if (first.new_classes.empty()) return 0;
  const ClassId c = first.new_classes.front();
  int count = 0;
  for (const Scene& s : first.shot_scenes)
    for (const Instance& inst : s.instances)
      if (inst.class_id == c) ++count;
  return std::max(count, 1);
}

} // namespace

SgdOptimizer::SgdOptimizer(const DetectorState& state, double momentum, double weight_decay)
    : velocity_(make_grads_like(state)), momentum_(momentum), weight_decay_(weight_decay) {}

void SgdOptimizer::step(DetectorState& state, const DetectorGrads& grads, double lr,
                        TransferStrategy strategy) {
  const double mu = momentum_;
  const double wd = weight_decay_;
  auto update = [&](auto& param, auto& vel, const auto& grad, ParamGroup group, bool is_bias) {
    if (!group_trainable(strategy, group)) return; // frozen: bytes untouched
    if (!is_bias && wd != 0.0) {
      vel = mu * vel + (grad + wd * param);
    } else {
      vel = mu * vel + grad;
    }
    param -= lr * vel;
  };
  update(state.agnostic_w, velocity_.agnostic_w, grads.agnostic_w, ParamGroup::Agnostic, false);
  update(state.cse_w1, velocity_.cse_w1, grads.cse_w1, ParamGroup::Cse, false);
  update(state.cse_b1, velocity_.cse_b1, grads.cse_b1, ParamGroup::Cse, true);
  update(state.cse_w2, velocity_.cse_w2, grads.cse_w2, ParamGroup::Cse, false);
  update(state.cse_b2, velocity_.cse_b2, grads.cse_b2, ParamGroup::Cse, true);
  update(state.obj_w, velocity_.obj_w, grads.obj_w, ParamGroup::ObjectnessHead, false);
  update(state.obj_b, velocity_.obj_b, grads.obj_b, ParamGroup::ObjectnessHead, true);
  update(state.cls_w, velocity_.cls_w, grads.cls_w, ParamGroup::ClassifierHead, false);
  update(state.cls_b, velocity_.cls_b, grads.cls_b, ParamGroup::ClassifierHead, true);
  update(state.box_w, velocity_.box_w, grads.box_w, ParamGroup::BoxRegHead, false);
  update(state.box_b, velocity_.box_b, grads.box_b, ParamGroup::BoxRegHead, true);
}

DivergenceError::DivergenceError(const std::string& stage_, int epoch_, int step_, double value_)
    : std::runtime_error("non-finite loss at " + stage_ + " epoch " + std::to_string(epoch_) +
                         " step " + std::to_string(step_)),
      stage(stage_), epoch(epoch_), step(step_), value(value_) {}

DetectorState pretrain(const DatasetSplit& base_split, const TrainConfig& cfg,
                       LossTrace* trace) {
  if (base_split.scenes.empty()) throw std::invalid_argument("pretrain: empty base split");
  DetectorConfig dims = cfg.detector;
  dims.d_world = static_cast<int>(base_split.scenes.front().instances.empty()
                                      ? dims.d_world
                                      : base_split.scenes.front().instances.front()
                                            .latent_feature.size());
  std::vector<ClassId> base_classes(base_split.visible_classes.begin(),
                                    base_split.visible_classes.end());
  DetectorState state = init_detector(dims, base_classes, cfg.seed);

  LossConfig loss_cfg; // pre-training runs without distillation
  const auto lr_for_epoch = [&cfg](int epoch) {
    return epoch >= cfg.pretrain.lr_drop_epoch ? cfg.pretrain.lr / cfg.pretrain.lr_drop_factor
                                               : cfg.pretrain.lr;
  };
  train_epochs(state, base_split, loss_cfg, nullptr, TransferStrategy::FitCse, cfg,
               cfg.pretrain.epochs, lr_for_epoch, "pretrain", trace);
  return state;
}

DatasetSplit build_transfer_set(const std::vector<Scene>& novel_shots,
                                const std::vector<ClassId>& novel_classes,
                                const ExemplarSet& exemplars,
                                const std::vector<Scene>& base_scenes,
                                const std::set<ClassId>& base_visible, std::uint64_t seed,
                                SceneExposure* exposure_out) {
  DatasetSplit split;
  const std::set<ClassId> novel_set(novel_classes.begin(), novel_classes.end());
  SceneExposure exposure;
  split.visible_classes.insert(novel_classes.begin(), novel_classes.end());
  if (!exemplars.scene_ids.empty()) {
    split.visible_classes.insert(base_visible.begin(), base_visible.end());
    std::set<std::int64_t> wanted(exemplars.scene_ids.begin(), exemplars.scene_ids.end());
    for (const Scene& s : base_scenes) {
      if (wanted.count(s.scene_id)) {
        split.scenes.push_back(s);
        exposure[s.scene_id] = base_visible;
      }
    }
  }
  for (const Scene& s : novel_shots) {
    // A shot scene exposes only the novel annotations it was sampled for;
    // any base objects in it stay unlabeled.
    std::set<ClassId> exposed;
    for (const Instance& inst : s.instances)
      if (novel_set.count(inst.class_id)) exposed.insert(inst.class_id);
    exposure[s.scene_id] = std::move(exposed);
    split.scenes.push_back(s);
  }
  Rng rng = substream(seed, "sampling/transfer_set");
  rng.shuffle(split.scenes);
  if (exposure_out != nullptr) *exposure_out = std::move(exposure);
  return split;
}

DetectorState transfer_session(DetectorState state, const SessionRecipe& recipe,
                               const TrainConfig& cfg, const DatasetSplit& transfer_set,
                               const std::vector<ClassId>& new_classes, int session_index,
                               LossTrace* trace, const DistillTargetStore* reused_store,
                               DistillTargetStore* store_out, const SceneExposure* exposure) {
  DistillTargetStore store;
  const DistillTargetStore* active_store = nullptr;
  if (recipe.use_distillation) {
    if (reused_store != nullptr) {
      active_store = reused_store;
    } else {
      // Computed under the incoming state, before registration; the old
      // model is not needed (and not kept) afterwards.
      store = precompute_distill_targets(state, transfer_set, recipe.loss.temperature,
                                         recipe.loss.distill_include_background, exposure);
      active_store = &store;
    }
    if (store_out != nullptr && reused_store == nullptr) *store_out = store;
  }

  register_classes(state, new_classes, cfg.seed);

  // Per-session stage name keeps the sampling substreams disjoint.
  const std::string stage = "session" + std::to_string(session_index);
  const auto lr_for_epoch = [&cfg](int) { return cfg.transfer.lr; };
  train_epochs(state, transfer_set, recipe.loss, active_store, recipe.strategy, cfg,
               cfg.transfer.epochs, lr_for_epoch, stage, trace, exposure);
  return state;
}

std::vector<SessionResult> run_task_sequence(const DetectorState& pretrained,
                                             const TaskSequence& sequence,
                                             const SessionRecipe& recipe,
                                             const TrainConfig& cfg,
                                             const DatasetSplit& base_split,
                                             const DatasetSplit& test_split,
                                             const std::vector<ClassId>& base_classes,
                                             LossTrace* trace, ExemplarSet* exemplars_out,
                                             std::vector<DistillTargetStore>* stores_out) {
  // Exemplar selection happens once, on the pre-trained model's features.
  // The per-class cluster count equals the shot count K.
  const int shots = shots_per_class(sequence);
  ExemplarSet exemplars;
  std::vector<ImageClassFeature> features;
  switch (recipe.exemplar_method) {
    case ExemplarMethod::None:
      break;
    case ExemplarMethod::Clustering: {
      features = extract_image_class_features(pretrained, base_split.scenes);
      const ClassCentroids centroids = cluster_class_features(features, shots, cfg.seed);
      assign_clusters(features, centroids);
      exemplars = select_exemplars_clustering(features, centroids, shots);
      break;
    }
    case ExemplarMethod::Random: {
      const int count = static_cast<int>(base_split.visible_classes.size()) * shots;
      exemplars = select_exemplars_random(base_split.scenes, count, cfg.seed);
      break;
    }
    case ExemplarMethod::ClassMean: {
      features = extract_image_class_features(pretrained, base_split.scenes);
      exemplars = select_exemplars_classmean(features, shots);
      break;
    }
  }
  if (exemplars_out != nullptr) *exemplars_out = exemplars;

  std::vector<SessionResult> results;
  DetectorState state = pretrained;
  // Continual with an exemplar memory: shots of finished sessions are
  // replayed in later ones. Without exemplars each session trains on its
  // own shots only (the no-rehearsal baseline).
  const bool keep_shot_memory = recipe.exemplar_method != ExemplarMethod::None;
  std::vector<Scene> memory_shots;
  std::vector<ClassId> observed_novel;   // novel classes registered so far
  DistillTargetStore initial_store;
  bool have_initial_store = false;

  for (std::size_t si = 0; si < sequence.sessions.size(); ++si) {
    const SessionTask& task = sequence.sessions[si];
    std::vector<Scene> shots = memory_shots;
    shots.insert(shots.end(), task.shot_scenes.begin(), task.shot_scenes.end());
    std::vector<ClassId> visible_novel = observed_novel;
    visible_novel.insert(visible_novel.end(), task.new_classes.begin(), task.new_classes.end());

    SceneExposure exposure;
    const DatasetSplit transfer_set =
        build_transfer_set(shots, visible_novel, exemplars, base_split.scenes,
                           base_split.visible_classes,
                           cfg.seed + static_cast<std::uint64_t>(si), &exposure);

    const DistillTargetStore* reused = nullptr;
    DistillTargetStore session_store;
    if (recipe.use_distillation && recipe.reuse_initial_targets && have_initial_store)
      reused = &initial_store;
    state = transfer_session(std::move(state), recipe, cfg, transfer_set, task.new_classes,
                             static_cast<int>(si), trace, reused, &session_store, &exposure);
    if (recipe.use_distillation) {
      if (recipe.reuse_initial_targets && !have_initial_store) {
        initial_store = session_store;
        have_initial_store = true;
      }
      if (stores_out != nullptr)
        stores_out->push_back(reused != nullptr ? *reused : session_store);
    }

    observed_novel = visible_novel;
    if (keep_shot_memory) memory_shots = shots;

    SessionResult res;
    res.session_index = static_cast<int>(si);
    res.report = evaluate(state, test_split, base_classes, observed_novel);
    res.state = state;
    results.push_back(std::move(res));
  }
  return results;
}

std::string to_string(TransferStrategy s) {
  switch (s) {
    case TransferStrategy::FixAll: return "fix_all";
    case TransferStrategy::FitAll: return "fit_all";
    case TransferStrategy::FitCse: return "fit_cse";
  }
  return "fit_cse";
}

TransferStrategy strategy_from_string(const std::string& s) {
  if (s == "fix_all") return TransferStrategy::FixAll;
  if (s == "fit_all") return TransferStrategy::FitAll;
  if (s == "fit_cse") return TransferStrategy::FitCse;
  throw std::invalid_argument("unknown transfer strategy: " + s);
}

} // namespace ifsd
