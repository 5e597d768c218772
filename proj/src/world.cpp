#include "ifsd/world.hpp"

#include "ifsd/io.hpp"
#include "ifsd/rng.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace ifsd {

namespace {

// Relative box extents; scene capacity below derives from the largest size.
constexpr double kMinBoxFrac = 0.08;
constexpr double kMaxBoxFrac = 0.20;
constexpr double kBoxMargin = 12.0; // keeps room for shifted proposals
constexpr int kBackgroundPerInstance = 4;
constexpr int kBackgroundAttempts = 200;

// Target IoUs for the shifted-copy proposals. The 0.9 target is emitted
// without jitter so every instance is guaranteed a candidate above the
// positive threshold; 0.5 and 0.3 are also exact so they stay inside the
// [0.3, alpha] ignore band rather than wandering into background labels
// with object-like region features. Random background boxes are fully
// disjoint from every instance.
constexpr double kTargetIous[] = {0.9, 0.8, 0.72, 0.68, 0.5, 0.3};
constexpr bool kJitterTarget[] = {false, true, true, true, false, false};

void validate(const WorldConfig& cfg) {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("WorldConfig: " + msg); };
  if (cfg.num_base_classes < 1) fail("num_base_classes must be positive");
  if (cfg.num_novel_classes < 1) fail("num_novel_classes must be positive");
  if (cfg.modes_per_class < 1) fail("modes_per_class must be >= 1");
  if (cfg.d_world < 1) fail("d_world must be positive");
  if (cfg.scenes_per_base_class < 1) fail("scenes_per_base_class must be positive");
  if (cfg.shots_K < 1) fail("shots_K must be >= 1");
  if (cfg.test_scenes_per_class < 1) fail("test_scenes_per_class must be positive");
  if (cfg.instances_per_scene_min < 1 || cfg.instances_per_scene_max < cfg.instances_per_scene_min)
    fail("invalid instances_per_scene range");
  if (cfg.proposal_jitter < 0.0 || cfg.feature_noise < 0.0 || cfg.novel_mode_offset < 0.0)
    fail("noise scales must be non-negative");
  if (cfg.extent <= 4.0 * kBoxMargin) fail("extent too small for box placement");
  const int capacity =
      static_cast<int>((cfg.extent / (kMaxBoxFrac * cfg.extent)) *
                       (cfg.extent / (kMaxBoxFrac * cfg.extent)));
  if (cfg.instances_per_scene_max > capacity)
    fail("instances_per_scene exceeds scene capacity of " + std::to_string(capacity));
}

BoundingBox quantize_box(const BoundingBox& b) {
  BoundingBox q;
  q.x_min = quantize9(b.x_min);
  q.y_min = quantize9(b.y_min);
  q.x_max = quantize9(b.x_max);
  q.y_max = quantize9(b.y_max);
  return q;
}

BoundingBox random_instance_box(const WorldConfig& cfg, Rng& rng) {
  const double w = rng.uniform(kMinBoxFrac, kMaxBoxFrac) * cfg.extent;
  const double h = rng.uniform(kMinBoxFrac, kMaxBoxFrac) * cfg.extent;
  const double cx = rng.uniform(0.5 * w + kBoxMargin, cfg.extent - 0.5 * w - kBoxMargin);
  const double cy = rng.uniform(0.5 * h + kBoxMargin, cfg.extent - 0.5 * h - kBoxMargin);
  BoundingBox b;
  b.x_min = cx - 0.5 * w;
  b.x_max = cx + 0.5 * w;
  b.y_min = cy - 0.5 * h;
  b.y_max = cy + 0.5 * h;
  return quantize_box(b);
}

BoundingBox clamp_to_extent(BoundingBox b, double extent) {
  const double shift_x = std::max(0.0, -b.x_min) - std::max(0.0, b.x_max - extent);
  const double shift_y = std::max(0.0, -b.y_min) - std::max(0.0, b.y_max - extent);
  b.x_min += shift_x;
  b.x_max += shift_x;
  b.y_min += shift_y;
  b.y_max += shift_y;
  return b;
}

// Equal-size copy of `gt` shifted along one axis so rectangle IoU equals
// `target` exactly (before jitter): shift = extent*(1-t)/(1+t).
BoundingBox shifted_box(const BoundingBox& gt, double target, bool along_x, double sign) {
  BoundingBox b = gt;
  if (along_x) {
    const double dx = sign * gt.width() * (1.0 - target) / (1.0 + target);
    b.x_min += dx;
    b.x_max += dx;
  } else {
    const double dy = sign * gt.height() * (1.0 - target) / (1.0 + target);
    b.y_min += dy;
    b.y_max += dy;
  }
  return b;
}

// Recomputes max_iou/matched_gt for every proposal from the (already
// quantized) boxes; ties on max IoU resolve to the lower instance index.
void finalize_proposals(Scene& scene) {
  for (Proposal& p : scene.proposals) {
    p.max_iou = 0.0;
    p.matched_gt = -1;
    for (std::size_t i = 0; i < scene.instances.size(); ++i) {
      const double v = iou(p.box, scene.instances[i].box);
      if (v > p.max_iou) {
        p.max_iou = v;
        p.matched_gt = static_cast<int>(i);
      }
    }
    p.max_iou = quantize9(p.max_iou);
  }
}

void add_proposals(Scene& scene, const WorldConfig& cfg, Rng& rng) {
  for (const Instance& inst : scene.instances) {
    int axis_flip = 0;
    for (std::size_t ti = 0; ti < std::size(kTargetIous); ++ti) {
      const bool along_x = (axis_flip++ % 2) == 0;
      const double sign = rng.uniform() < 0.5 ? 1.0 : -1.0;
      BoundingBox b = shifted_box(inst.box, kTargetIous[ti], along_x, sign);
      if (kJitterTarget[ti] && cfg.proposal_jitter > 0.0) {
        const double jx = cfg.proposal_jitter * rng.normal();
        const double jy = cfg.proposal_jitter * rng.normal();
        b.x_min += jx;
        b.x_max += jx;
        b.y_min += jy;
        b.y_max += jy;
      }
      b = clamp_to_extent(b, cfg.extent);
      scene.proposals.push_back(Proposal{quantize_box(b), -1, 0.0});
    }
    for (int k = 0; k < kBackgroundPerInstance; ++k) {
      for (int attempt = 0; attempt < kBackgroundAttempts; ++attempt) {
        BoundingBox b = random_instance_box(cfg, rng);
        double worst = 0.0;
        for (const Instance& other : scene.instances)
          worst = std::max(worst, iou(b, other.box));
        if (worst == 0.0) {
          scene.proposals.push_back(Proposal{b, -1, 0.0});
          break;
        }
      }
    }
  }
  finalize_proposals(scene);
}

Eigen::VectorXd sample_feature(const Eigen::VectorXd& mode_mean, double noise, Rng& rng) {
  Eigen::VectorXd f = mode_mean;
  for (Eigen::Index i = 0; i < f.size(); ++i)
    f[i] = quantize9(f[i] + noise * rng.normal());
  return f;
}

} // namespace

World generate_world(const WorldConfig& cfg) {
  validate(cfg);
  Rng rng = substream(cfg.seed, "world");

  const int num_classes = cfg.num_base_classes + cfg.num_novel_classes;
  // modes[c][m]: mean of mode m for class c.
  std::vector<std::vector<Eigen::VectorXd>> modes(num_classes);
  for (int c = 0; c < num_classes; ++c) {
    modes[c].resize(cfg.modes_per_class);
    for (int m = 0; m < cfg.modes_per_class; ++m) {
      Eigen::VectorXd mean(cfg.d_world);
      for (int i = 0; i < cfg.d_world; ++i) mean[i] = rng.uniform(-1.0, 1.0);
      modes[c][m] = mean;
    }
  }
  if (cfg.novel_mode_offset > 0.0) {
    // Novel modes interpolate between two base modes, plus a jitter of the
    // configured size: they live inside the span of base variation, so
    // frozen base-trained features can read them, yet distinguishing them
    // from their base neighbours requires adaptation.
    for (int c = cfg.num_base_classes; c < num_classes; ++c) {
      for (int m = 0; m < cfg.modes_per_class; ++m) {
        const auto& a = modes[rng.uniform_index(cfg.num_base_classes)]
                             [rng.uniform_index(cfg.modes_per_class)];
        const auto& b = modes[rng.uniform_index(cfg.num_base_classes)]
                             [rng.uniform_index(cfg.modes_per_class)];
        const double lambda = rng.uniform(0.3, 0.7);
        Eigen::VectorXd dir(cfg.d_world);
        for (int i = 0; i < cfg.d_world; ++i) dir[i] = rng.normal();
        dir.normalize();
        modes[c][m] = lambda * a + (1.0 - lambda) * b + cfg.novel_mode_offset * dir;
      }
    }
  }

  std::int64_t next_scene_id = 0;

  // Builds one scene whose class list is given along with the per-class mode.
  auto build_scene = [&](const std::vector<std::pair<ClassId, int>>& class_modes) {
    Scene scene;
    scene.scene_id = next_scene_id++;
    scene.extent_w = cfg.extent;
    scene.extent_h = cfg.extent;
    const int min_count = std::max<int>(cfg.instances_per_scene_min,
                                        static_cast<int>(class_modes.size()));
    const int max_count = std::max(min_count, cfg.instances_per_scene_max);
    const int n_inst = rng.uniform_int(min_count, max_count);
    for (int i = 0; i < n_inst; ++i) {
      // One instance per listed class first, then random classes from the list.
      const auto& cm = (i < static_cast<int>(class_modes.size()))
                           ? class_modes[static_cast<std::size_t>(i)]
                           : class_modes[rng.uniform_index(class_modes.size())];
      Instance inst;
      inst.class_id = cm.first;
      inst.box = random_instance_box(cfg, rng);
      inst.latent_feature = sample_feature(modes[cm.first][cm.second], cfg.feature_noise, rng);
      scene.instances.push_back(std::move(inst));
    }
    add_proposals(scene, cfg, rng);
    return scene;
  };

  World world;

  // Base split: scenes_per_base_class scenes per class, primary mode cycling
  // through the class's modes. Even-indexed scenes stay single-class so every
  // (class, mode) pair has dedicated scenes; odd-indexed ones mix in up to
  // two other base classes.
  for (ClassId c = 0; c < cfg.num_base_classes; ++c) {
    for (int j = 0; j < cfg.scenes_per_base_class; ++j) {
      std::vector<std::pair<ClassId, int>> class_modes;
      class_modes.emplace_back(c, j % cfg.modes_per_class);
      if (j % 2 == 1 && cfg.num_base_classes > 1) {
        const int extras = rng.uniform_int(1, std::min(2, cfg.num_base_classes - 1));
        std::vector<ClassId> others;
        for (ClassId o = 0; o < cfg.num_base_classes; ++o)
          if (o != c) others.push_back(o);
        rng.shuffle(others);
        for (int e = 0; e < extras; ++e)
          class_modes.emplace_back(others[static_cast<std::size_t>(e)],
                                   static_cast<int>(rng.uniform_index(cfg.modes_per_class)));
      }
      world.base_split.scenes.push_back(build_scene(class_modes));
    }
    world.base_split.visible_classes.insert(c);
  }

  // Novel shots: K scenes per class, each carrying exactly one annotated
  // instance of that class (shot j draws from mode j % modes_per_class)
  // plus one or two base-class objects that stay unlabeled in the session,
  // the way few-shot annotation sets leave surrounding objects unmarked.
  world.novel_shots.mode = TaskMode::Continual;
  for (ClassId c = cfg.num_base_classes; c < num_classes; ++c) {
    SessionTask task;
    task.new_classes.push_back(c);
    for (int j = 0; j < cfg.shots_K; ++j) {
      Scene scene;
      scene.scene_id = next_scene_id++;
      scene.extent_w = cfg.extent;
      scene.extent_h = cfg.extent;
      Instance inst;
      inst.class_id = c;
      inst.box = random_instance_box(cfg, rng);
      inst.latent_feature =
          sample_feature(modes[c][j % cfg.modes_per_class], cfg.feature_noise, rng);
      scene.instances.push_back(std::move(inst));
      const int extras = rng.uniform_int(3, 4);
      for (int e = 0; e < extras; ++e) {
        Instance bystander;
        bystander.class_id = static_cast<ClassId>(rng.uniform_index(cfg.num_base_classes));
        bystander.box = random_instance_box(cfg, rng);
        bystander.latent_feature = sample_feature(
            modes[bystander.class_id][rng.uniform_index(cfg.modes_per_class)],
            cfg.feature_noise, rng);
        scene.instances.push_back(std::move(bystander));
      }
      add_proposals(scene, cfg, rng);
      task.shot_scenes.push_back(std::move(scene));
    }
    world.novel_shots.sessions.push_back(std::move(task));
  }

  // Held-out test split over all classes; extras may mix base and novel.
  for (ClassId c = 0; c < num_classes; ++c) {
    for (int j = 0; j < cfg.test_scenes_per_class; ++j) {
      std::vector<std::pair<ClassId, int>> class_modes;
      class_modes.emplace_back(c, j % cfg.modes_per_class);
      if (j % 2 == 1 && num_classes > 1) {
        const int extras = rng.uniform_int(1, std::min(2, num_classes - 1));
        std::vector<ClassId> others;
        for (ClassId o = 0; o < num_classes; ++o)
          if (o != c) others.push_back(o);
        rng.shuffle(others);
        for (int e = 0; e < extras; ++e)
          class_modes.emplace_back(others[static_cast<std::size_t>(e)],
                                   static_cast<int>(rng.uniform_index(cfg.modes_per_class)));
      }
      world.test_split.scenes.push_back(build_scene(class_modes));
    }
    world.test_split.visible_classes.insert(c);
  }

  return world;
}

} // namespace ifsd
