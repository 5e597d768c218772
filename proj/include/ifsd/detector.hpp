#pragma once

#include "ifsd/core.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <vector>

// The toy two-part detector: a frozen class-agnostic extractor (seeded
// random projection + tanh) followed by a trainable class-sensitive object
// feature extractor (two tanh layers) with objectness, classification and
// box-regression heads. Region features are IoU-weighted averages of the
// latent features of instances overlapping the region, standing in for ROI
// pooling. forward_region is pure; all gradients are analytic.

namespace ifsd {

enum class TransferStrategy { FixAll, FitAll, FitCse };

enum class ParamGroup { Agnostic, Cse, ObjectnessHead, ClassifierHead, BoxRegHead };

struct DetectorConfig {
  int d_world = 16;
  int d_feat = 32;
  int d_hidden = 64;
  int d_obj = 32;
};

// Classifier rows: background at row 0, class k at row k+1 in registration
// order. The registry is append-only so head rows stay aligned across
// sessions.
struct DetectorState {
  DetectorConfig dims;
  std::vector<ClassId> registered_classes;

  Eigen::MatrixXd agnostic_w; // d_feat x d_world, no bias
  Eigen::MatrixXd cse_w1;     // d_hidden x d_feat
  Eigen::VectorXd cse_b1;
  Eigen::MatrixXd cse_w2;     // d_obj x d_hidden
  Eigen::VectorXd cse_b2;
  Eigen::MatrixXd obj_w;      // 1 x d_obj
  Eigen::VectorXd obj_b;      // size 1
  Eigen::MatrixXd cls_w;      // (num_registered + 1) x d_obj
  Eigen::VectorXd cls_b;
  Eigen::MatrixXd box_w;      // 4 x d_obj
  Eigen::VectorXd box_b;

  int num_logits() const { return static_cast<int>(registered_classes.size()) + 1; }
  // Logit index of a registered class (background is index 0).
  int logit_index(ClassId c) const;
};

struct RegionOutput {
  Eigen::VectorXd logits;      // length num_registered + 1, background first
  double objectness = 0.0;
  Eigen::Vector4d box_deltas = Eigen::Vector4d::Zero();
  Eigen::VectorXd obj_feature; // post-CSE feature, reused by exemplar selection
};

// Upstream gradients with respect to a region's raw outputs.
struct RegionUpstream {
  Eigen::VectorXd d_logits;
  double d_objectness = 0.0;
  Eigen::Vector4d d_box_deltas = Eigen::Vector4d::Zero();
};

// Same shapes as the parameters; accumulated across regions.
struct DetectorGrads {
  Eigen::MatrixXd agnostic_w;
  Eigen::MatrixXd cse_w1;
  Eigen::VectorXd cse_b1;
  Eigen::MatrixXd cse_w2;
  Eigen::VectorXd cse_b2;
  Eigen::MatrixXd obj_w;
  Eigen::VectorXd obj_b;
  Eigen::MatrixXd cls_w;
  Eigen::VectorXd cls_b;
  Eigen::MatrixXd box_w;
  Eigen::VectorXd box_b;

  void set_zero();
  void zero_group(ParamGroup g);
};

DetectorGrads make_grads_like(const DetectorState& state);

// Visits every parameter tensor as (name, group, is_bias, tensor&). The
// functor must accept both MatrixXd& and VectorXd&.
template <class State, class F>
void visit_params(State& s, F&& f) {
  f("agnostic_w", ParamGroup::Agnostic, false, s.agnostic_w);
  f("cse_w1", ParamGroup::Cse, false, s.cse_w1);
  f("cse_b1", ParamGroup::Cse, true, s.cse_b1);
  f("cse_w2", ParamGroup::Cse, false, s.cse_w2);
  f("cse_b2", ParamGroup::Cse, true, s.cse_b2);
  f("obj_w", ParamGroup::ObjectnessHead, false, s.obj_w);
  f("obj_b", ParamGroup::ObjectnessHead, true, s.obj_b);
  f("cls_w", ParamGroup::ClassifierHead, false, s.cls_w);
  f("cls_b", ParamGroup::ClassifierHead, true, s.cls_b);
  f("box_w", ParamGroup::BoxRegHead, false, s.box_w);
  f("box_b", ParamGroup::BoxRegHead, true, s.box_b);
}

// Trainable parameter groups under a strategy. Pretraining uses the FitCse
// mask: the agnostic extractor is never trained except by FitAll.
std::vector<ParamGroup> trainable_groups(TransferStrategy strategy);
bool group_trainable(TransferStrategy strategy, ParamGroup g);

// Fresh detector with `base_classes` registered. Weights are seeded
// Gaussians scaled by 1/sqrt(fan_in); biases zero.
DetectorState init_detector(const DetectorConfig& dims, const std::vector<ClassId>& base_classes,
                            std::uint64_t seed);

// IoU-weighted average of latent features of instances overlapping `box`,
// with the uncovered remainder contributing the zero background feature
// (denominator max(1, sum of IoUs)); zero vector when nothing overlaps.
Eigen::VectorXd region_feature(const Scene& scene, const BoundingBox& box, int d_world);

RegionOutput forward_region(const DetectorState& state, const Scene& scene,
                            const BoundingBox& box);

// Accumulates exact analytic parameter gradients for the given upstream.
// Groups outside `strategy`'s trainable set are reported as zero (their
// accumulators are left untouched).
void backward_region(const DetectorState& state, const Scene& scene, const BoundingBox& box,
                     const RegionUpstream& upstream, DetectorGrads& grads,
                     TransferStrategy strategy = TransferStrategy::FitAll);

// Appends one classifier row per new class (Gaussian init, std 0.01, zero
// bias; seeded per class id). Existing rows, including background, are
// preserved bitwise. Throws on duplicate registration.
void register_classes(DetectorState& state, const std::vector<ClassId>& new_classes,
                      std::uint64_t seed);

// Versioned binary checkpoint: magic, dims, registered ids, parameter
// groups in fixed order as little-endian 64-bit floats. Round-trips
// bit-exactly.
void save_checkpoint(const std::filesystem::path& path, const DetectorState& state);
DetectorState load_checkpoint(const std::filesystem::path& path);
std::string checkpoint_bytes(const DetectorState& state);
DetectorState checkpoint_from_bytes(const std::string& bytes);

} // namespace ifsd
