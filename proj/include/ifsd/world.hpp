#pragma once

#include "ifsd/core.hpp"

#include <cstdint>

// Reproducible synthetic detection scenes. Each class draws instance
// latent features from a set of Gaussian modes with distinct means, so
// exemplar-selection quality over multi-mode class distributions is
// observable. Proposals are emitted per ground truth as shifted copies
// spanning a spread of IoUs around the positive threshold, plus background
// boxes; the learned objectness scoring still lives in the detector.

namespace ifsd {

struct WorldConfig {
  int num_base_classes = 4;
  int num_novel_classes = 5;
  int modes_per_class = 3;
  int d_world = 16;          // latent feature dimension
  int scenes_per_base_class = 12;
  int shots_K = 3;           // annotated instances per novel class
  int instances_per_scene_min = 2;
  int instances_per_scene_max = 4;
  double proposal_jitter = 0.6;   // noise scale on proposal box shifts, scene units
  double feature_noise = 0.15;    // per-mode isotropic stddev
  double extent = 100.0;          // scene width == height
  int test_scenes_per_class = 4;
  double novel_mode_offset = 0.0; // >0 anchors novel modes near base modes at this distance
  std::uint64_t seed = 1;
};

struct World {
  DatasetSplit base_split;   // base-class scenes, base classes visible
  TaskSequence novel_shots;  // canonical continual grouping, one class per session
  DatasetSplit test_split;   // held-out scenes over base and novel classes
};

// Deterministic per seed: identical config => bitwise-identical serialized
// output. Every real in the emitted scenes is quantized to its 9-significant
// -digit representation before IoU bookkeeping, so proposals revalidate
// exactly against iou() after a round-trip. Throws std::invalid_argument on
// bad configs, including instance counts beyond scene capacity.
World generate_world(const WorldConfig& cfg);

} // namespace ifsd
