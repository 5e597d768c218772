#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

// Core domain types for the incremental few-shot detection lab: classes,
// boxes, scenes, dataset splits and task sequences. All types are plain
// value objects; nothing here owns a resource or mutates after construction.

namespace ifsd {

using ClassId = std::int32_t;

// Axis-aligned box in continuous scene units. Invariant: x_min < x_max,
// y_min < y_max (strictly positive area).
struct BoundingBox {
  double x_min = 0.0;
  double y_min = 0.0;
  double x_max = 0.0;
  double y_max = 0.0;

  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  double area() const { return width() * height(); }
  double center_x() const { return 0.5 * (x_min + x_max); }
  double center_y() const { return 0.5 * (y_min + y_max); }
  bool valid() const { return x_min < x_max && y_min < y_max; }
};

// An annotated object: box, class, and the latent feature the synthetic
// world attached to it (fixed dimension across a dataset).
struct Instance {
  BoundingBox box;
  ClassId class_id = 0;
  Eigen::VectorXd latent_feature;
};

// A candidate region. matched_gt is the index of the max-IoU ground-truth
// instance, -1 when the proposal overlaps nothing (max_iou == 0).
struct Proposal {
  BoundingBox box;
  int matched_gt = -1;
  double max_iou = 0.0;
};

struct Scene {
  std::int64_t scene_id = 0;
  double extent_w = 0.0;
  double extent_h = 0.0;
  std::vector<Instance> instances;
  std::vector<Proposal> proposals;
};

// Scenes plus the set of classes whose annotations are exposed for
// training/evaluation purposes in this split.
struct DatasetSplit {
  std::vector<Scene> scenes;
  std::set<ClassId> visible_classes;
};

enum class TaskMode { Typical, Continual };

// One incremental step: the classes to register and their K-shot scenes.
struct SessionTask {
  std::vector<ClassId> new_classes;
  std::vector<Scene> shot_scenes;
};

// Typical mode: one session carrying all novel classes. Continual mode:
// one session per novel class, in registration order.
struct TaskSequence {
  TaskMode mode = TaskMode::Typical;
  std::vector<SessionTask> sessions;
};

// Exact rectangle IoU: intersection area over union area. Symmetric,
// in [0,1], zero for disjoint boxes, one only for identical boxes.
double iou(const BoundingBox& a, const BoundingBox& b);

// 2xy/(x+y), defined as 0 when x+y == 0 so aggregate reports stay total
// when one domain scores zero.
double harmonic_mean(double x, double y);

// Standard box-delta parameterization: center offsets normalized by the
// reference box size, log width/height ratios.
Eigen::Vector4d encode_box_deltas(const BoundingBox& reference, const BoundingBox& target);
BoundingBox apply_box_deltas(const BoundingBox& reference, const Eigen::Vector4d& deltas);

// Regroups the per-class canonical sessions of `seq` into the requested
// mode. Typical merges everything into a single session; continual expects
// (and returns) one class per session.
TaskSequence regroup_sequence(const TaskSequence& seq, TaskMode mode);

// Session class sets must be pairwise disjoint and disjoint from the base
// classes; throws std::invalid_argument otherwise.
void validate_sequence(const TaskSequence& seq, const std::set<ClassId>& base_classes);

} // namespace ifsd
