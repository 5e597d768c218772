#pragma once

#include "ifsd/core.hpp"
#include "ifsd/detector.hpp"
#include "ifsd/exemplar.hpp"
#include "ifsd/losses.hpp"
#include "ifsd/metrics.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

// The two-stage pipeline: pre-training on base classes, then incremental
// transfer sessions under a strategy / exemplar method / distillation flag,
// in typical or continual mode. Training is single-threaded and fully
// seed-deterministic.

namespace ifsd {

struct PretrainConfig {
  int epochs = 6;
  double lr = 0.01;
  int lr_drop_epoch = 4;      // epochs with index >= this use lr / lr_drop_factor
  double lr_drop_factor = 10.0;
};

struct TransferConfig {
  int epochs = 10;
  double lr = 0.001;
};

struct TrainConfig {
  PretrainConfig pretrain;
  TransferConfig transfer;
  double momentum = 0.9;
  double weight_decay = 0.0001;
  int batch_scenes = 4;
  std::uint64_t seed = 1;
  DetectorConfig detector; // d_world is overwritten from the data
};

struct SessionRecipe {
  TransferStrategy strategy = TransferStrategy::FitCse;
  bool use_distillation = false;
  ExemplarMethod exemplar_method = ExemplarMethod::None;
  LossConfig loss;
  // Continual mode: recompute distillation targets each session (default)
  // or keep reusing the first session's store.
  bool reuse_initial_targets = false;
};

// One optimization step record for the loss trace CSV.
struct LossTraceRow {
  std::string stage; // "pretrain" or "session<k>"
  int epoch = 0;
  int step = 0;
  LossComponents parts;
  double total = 0.0;
};

using LossTrace = std::vector<LossTraceRow>;

// SGD with momentum; weight decay on non-bias tensors only. Frozen groups
// are skipped entirely so their bytes never change.
// Update: g = grad + wd*theta; v = mu*v + g; theta -= lr*v.
class SgdOptimizer {
 public:
  SgdOptimizer(const DetectorState& state, double momentum, double weight_decay);
  void step(DetectorState& state, const DetectorGrads& grads, double lr,
            TransferStrategy strategy);

 private:
  DetectorGrads velocity_;
  double momentum_;
  double weight_decay_;
};

// Thrown when a training loss goes non-finite; carries the offending step.
struct DivergenceError : std::runtime_error {
  DivergenceError(const std::string& stage, int epoch, int step, double value);
  std::string stage;
  int epoch;
  int step;
  double value;
};

// SGD on L_rpn + L_loc + L_cls over the base split with the step-decayed
// learning rate; the agnostic extractor stays at its seeded initialization.
DetectorState pretrain(const DatasetSplit& base_split, const TrainConfig& cfg,
                       LossTrace* trace = nullptr);

// Union of the exemplar scenes (base annotations visible) and the K-shot
// novel scenes (only their own novel annotations visible), shuffled per
// seed. `exposure_out`, when given, receives the per-scene exposure sets
// that encode that split-of-origin visibility.
DatasetSplit build_transfer_set(const std::vector<Scene>& novel_shots,
                                const std::vector<ClassId>& novel_classes,
                                const ExemplarSet& exemplars,
                                const std::vector<Scene>& base_scenes,
                                const std::set<ClassId>& base_visible, std::uint64_t seed,
                                SceneExposure* exposure_out = nullptr);

// One incremental step: optionally precompute distillation targets under
// the incoming state, register the new classes, then optimize the total
// loss under the strategy's trainable mask. `session_index` seeds the
// sampling substreams and labels the trace.
DetectorState transfer_session(DetectorState state, const SessionRecipe& recipe,
                               const TrainConfig& cfg, const DatasetSplit& transfer_set,
                               const std::vector<ClassId>& new_classes, int session_index,
                               LossTrace* trace = nullptr,
                               const DistillTargetStore* reused_store = nullptr,
                               DistillTargetStore* store_out = nullptr,
                               const SceneExposure* exposure = nullptr);

struct SessionResult {
  int session_index = 0;
  DetectorState state;
  EvalReport report;
};

// Applies transfer_session per task-sequence session and evaluates after
// each one on all classes observed so far. In continual mode the shots of
// a finished session join the exemplar memory and later sessions distill
// it as an old class.
std::vector<SessionResult> run_task_sequence(const DetectorState& pretrained,
                                             const TaskSequence& sequence,
                                             const SessionRecipe& recipe,
                                             const TrainConfig& cfg,
                                             const DatasetSplit& base_split,
                                             const DatasetSplit& test_split,
                                             const std::vector<ClassId>& base_classes,
                                             LossTrace* trace = nullptr,
                                             ExemplarSet* exemplars_out = nullptr,
                                             std::vector<DistillTargetStore>* stores_out = nullptr);

std::string to_string(TransferStrategy s);
TransferStrategy strategy_from_string(const std::string& s);

} // namespace ifsd
