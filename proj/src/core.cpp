#include "ifsd/core.hpp"

#include <algorithm>
#include <cmath>

namespace ifsd {

double iou(const BoundingBox& a, const BoundingBox& b) {
  const double ix = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  const double iy = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  if (ix <= 0.0 || iy <= 0.0) return 0.0;
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return inter / uni;
}

double harmonic_mean(double x, double y) {
  const double s = x + y;
  if (s == 0.0) return 0.0;
  return 2.0 * x * y / s;
}

Eigen::Vector4d encode_box_deltas(const BoundingBox& reference, const BoundingBox& target) {
  Eigen::Vector4d t;
  t[0] = (target.center_x() - reference.center_x()) / reference.width();
  t[1] = (target.center_y() - reference.center_y()) / reference.height();
  t[2] = std::log(target.width() / reference.width());
  t[3] = std::log(target.height() / reference.height());
  return t;
}

BoundingBox apply_box_deltas(const BoundingBox& reference, const Eigen::Vector4d& deltas) {
  const double cx = reference.center_x() + deltas[0] * reference.width();
  const double cy = reference.center_y() + deltas[1] * reference.height();
  const double w = reference.width() * std::exp(deltas[2]);
  const double h = reference.height() * std::exp(deltas[3]);
  BoundingBox out;
  out.x_min = cx - 0.5 * w;
  out.x_max = cx + 0.5 * w;
  out.y_min = cy - 0.5 * h;
  out.y_max = cy + 0.5 * h;
  return out;
}

TaskSequence regroup_sequence(const TaskSequence& seq, TaskMode mode) {
  TaskSequence out;
  out.mode = mode;
  if (mode == TaskMode::Typical) {
    SessionTask merged;
    for (const auto& s : seq.sessions) {
      merged.new_classes.insert(merged.new_classes.end(), s.new_classes.begin(),
                                s.new_classes.end());
      merged.shot_scenes.insert(merged.shot_scenes.end(), s.shot_scenes.begin(),
                                s.shot_scenes.end());
    }
    out.sessions.push_back(std::move(merged));
    return out;
  }
  // Continual: one class per session.
  for (const auto& s : seq.sessions) {
    for (ClassId c : s.new_classes) {
      SessionTask single;
      single.new_classes.push_back(c);
      for (const auto& scene : s.shot_scenes) {
        bool has_class = false;
        for (const auto& inst : scene.instances) {
          if (inst.class_id == c) { has_class = true; break; }
        }
        if (has_class) single.shot_scenes.push_back(scene);
      }
      out.sessions.push_back(std::move(single));
    }
  }
  return out;
}

void validate_sequence(const TaskSequence& seq, const std::set<ClassId>& base_classes) {
  std::set<ClassId> seen;
  for (const auto& s : seq.sessions) {
    for (ClassId c : s.new_classes) {
      if (base_classes.count(c))
        throw std::invalid_argument("session class " + std::to_string(c) +
                                    " collides with a base class");
      if (!seen.insert(c).second)
        throw std::invalid_argument("class " + std::to_string(c) +
                                    " appears in more than one session");
    }
  }
  if (seq.mode == TaskMode::Continual) {
    for (const auto& s : seq.sessions) {
      if (s.new_classes.size() != 1)
        throw std::invalid_argument("continual sequence requires one class per session");
    }
  } else if (seq.sessions.size() != 1) {
    throw std::invalid_argument("typical sequence requires exactly one session");
  }
}

} // namespace ifsd
