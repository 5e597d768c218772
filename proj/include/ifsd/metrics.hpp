#pragma once

#include "ifsd/core.hpp"
#include "ifsd/detector.hpp"

#include <map>
#include <optional>
#include <string>
#include <vector>

// Detection metrics: AP averaged over IoU thresholds 0.5:0.05:0.95 with
// 101-point interpolation, the corresponding AR, per-domain (base/novel)
// means and their harmonic means. Inference applies box deltas, scores
// every foreground class per proposal, runs per-class NMS at IoU 0.5 and
// keeps the top 100 detections per scene.

namespace ifsd {

struct Detection {
  std::int64_t scene_id = 0;
  BoundingBox box;
  ClassId class_id = 0;
  double score = 0.0;
};

struct ClassMetrics {
  double ap = 0.0;
  double ar = 0.0;
};

struct EvalReport {
  std::optional<double> base_ap, base_ar;
  std::optional<double> novel_ap, novel_ar;
  std::optional<double> hm_ap, hm_ar;
  std::map<ClassId, ClassMetrics> per_class;
};

std::vector<double> default_iou_thresholds(); // {0.5, 0.55, ..., 0.95}

// Indices of `boxes` that survive greedy NMS: candidates in the given order
// are kept unless they overlap an already-kept box with IoU >= threshold.
std::vector<int> nms_keep(const std::vector<BoundingBox>& boxes, double iou_threshold);

std::vector<Detection> infer(const DetectorState& state, const Scene& scene,
                             int max_detections = 100);

// AP (x100) for one class over a split. Detections are matched greedily in
// descending score order to the unmatched ground truth with the highest
// IoU >= threshold; the precision-recall curve is integrated with 101-point
// interpolation and averaged over the thresholds.
double average_precision(const std::vector<Detection>& detections,
                         const std::vector<Scene>& scenes, ClassId class_id,
                         const std::vector<double>& iou_thresholds);

// Fraction of ground truths matched under the same greedy matching,
// averaged over the thresholds, x100.
double average_recall(const std::vector<Detection>& detections,
                      const std::vector<Scene>& scenes, ClassId class_id,
                      const std::vector<double>& iou_thresholds);

// Runs infer over the split and aggregates per-domain means. Classes with
// no ground truth in the split are excluded from the domain mean; a domain
// with no classes reports absent fields, and the harmonic means are absent
// whenever either side is.
EvalReport evaluate(const DetectorState& state, const DatasetSplit& test_split,
                    const std::vector<ClassId>& base_classes,
                    const std::vector<ClassId>& novel_classes);

// Structured text (single JSON line); full precision, absent fields omitted.
std::string report_to_text(const EvalReport& report);
EvalReport report_from_text(const std::string& text);

} // namespace ifsd
