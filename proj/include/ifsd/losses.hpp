#pragma once

#include "ifsd/core.hpp"
#include "ifsd/detector.hpp"
#include "ifsd/rng.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <utility>
#include <vector>

// Training objectives: classification, localization, objectness, and the
// pre-computed knowledge-distillation term, combined with the distillation
// weighted by T^2. Distillation targets are scaled-softmax distributions of
// the pre-transfer model at ground-truth boxes, computed once per session;
// no copy of the old model is kept afterwards.

namespace ifsd {

struct LossConfig {
  double alpha = 0.7;        // IoU positive threshold (strict >)
  double temperature = 20.0; // distillation temperature T
  double loc_weight = 1.0;
  double rpn_weight = 1.0;
  // Regions neither positive nor below this IoU are ignored by the
  // objectness and classification terms.
  double background_iou = 0.3;
  // Background regions sampled per positive for classification/objectness.
  int background_ratio = 3;
  // Old-model distributions include the background row.
  bool distill_include_background = true;
};

// Per-scene annotation exposure: which classes count as annotated in a
// given scene. Splits mixing sources (exemplar scenes expose base classes,
// shot scenes only their own K-shot class) carry one entry per scene;
// scenes without an entry fall back to the split-wide visible set.
using SceneExposure = std::map<std::int64_t, std::set<ClassId>>;

// (scene_id, instance index) -> old-model scaled-softmax distribution over
// C_old (+ background when configured). Vectors sum to 1 within 1e-9.
struct DistillTargetStore {
  using Key = std::pair<std::int64_t, int>;
  std::map<Key, Eigen::VectorXd> targets;
  double temperature_used = 0.0;
  bool includes_background = true;

  bool empty() const { return targets.empty(); }
  const Eigen::VectorXd& at(const Key& key) const;
};

// Numerically stable softmax of z/T (max-subtracted).
Eigen::VectorXd scaled_softmax(const Eigen::VectorXd& logits, double temperature);

// X_p: proposals whose max IoU strictly exceeds alpha, paired with their
// max-IoU instance index.
std::vector<std::pair<const Proposal*, int>> select_positive_regions(const Scene& scene,
                                                                     double alpha);

// Runs the old model at every visible ground-truth box and stores the
// scaled softmax of its logits. The old state can be discarded afterwards.
// `exposure` refines visibility per scene when given.
DistillTargetStore precompute_distill_targets(const DetectorState& old_state,
                                              const DatasetSplit& split, double temperature,
                                              bool include_background = true,
                                              const SceneExposure* exposure = nullptr);

// Mean negative log softmax probability (T = 1) of the true label.
// labels[i] is a logit index: 0 for background, class row otherwise.
double classification_loss(const std::vector<RegionOutput>& outputs,
                           const std::vector<int>& labels);

// Mean cross-entropy between stored old distributions and the current
// scaled softmax restricted to the stored support (old classes + optional
// background; novel logits excluded from the denominator). Throws when a
// region's key is missing from the store.
double distillation_loss(const std::vector<RegionOutput>& outputs,
                         const std::vector<DistillTargetStore::Key>& keys,
                         const DistillTargetStore& store, double temperature);

// Smooth-L1 on box-delta residuals, summed over the 4 coordinates and
// averaged over positive regions; 0 when empty.
double localization_loss(const std::vector<RegionOutput>& outputs,
                         const std::vector<Eigen::Vector4d>& target_deltas);

// Binary cross-entropy on the objectness logit; labels are 1 for positives
// and 0 for background; 0 when empty.
double objectness_loss(const std::vector<RegionOutput>& outputs,
                       const std::vector<int>& labels);

double smooth_l1(double residual);
double smooth_l1_grad(double residual);

struct LossComponents {
  double rpn = 0.0;
  double loc = 0.0;
  double cls = 0.0;
  double kd = 0.0;
  bool has_kd = false;
};

// L = rpn_weight*L_rpn + loc_weight*L_loc + L_cls + T^2*L_kd; the
// distillation term is omitted when no store was used (pre-training).
double total_loss(const LossComponents& parts, double temperature, const LossConfig& cfg);

// One sampled region of a training batch.
struct RegionSample {
  const Scene* scene = nullptr;
  int proposal_index = -1;
  bool positive = false;
  int matched_instance = -1; // valid for positives
};

// Proposals matched against the exposed annotations only: positives
// overlap a visible instance above alpha, backgrounds fall below the
// background band, and the IoU range in between is ignored. Objects of
// unexposed classes count as unannotated, so regions on them become
// background candidates, plus up to background_ratio sampled backgrounds
// per positive. `exposure` refines visibility per scene when given.
std::vector<RegionSample> build_region_batch(const std::vector<const Scene*>& scenes,
                                             const std::set<ClassId>& visible,
                                             const LossConfig& cfg, Rng& rng,
                                             const SceneExposure* exposure = nullptr);

struct BatchResult {
  LossComponents parts;
  double total = 0.0;
  int num_regions = 0;
  int num_positives = 0;
};

// Evaluates every loss term on the batch and accumulates analytic gradients
// for the strategy's trainable groups. Pass store == nullptr during
// pre-training to drop the distillation term.
BatchResult compute_batch(const DetectorState& state, const std::vector<RegionSample>& batch,
                          const DistillTargetStore* store, const LossConfig& cfg,
                          TransferStrategy strategy, DetectorGrads* grads);

// Distillation store persistence (binary, same envelope style as
// checkpoints) so a session can resume without the old model.
void save_distill_store(const std::filesystem::path& path, const DistillTargetStore& store);
DistillTargetStore load_distill_store(const std::filesystem::path& path);

} // namespace ifsd
