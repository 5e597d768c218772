#include "ifsd/metrics.hpp"

#include "ifsd/io.hpp"
#include "ifsd/losses.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace ifsd {

namespace {

// Deterministic detection order: score descending, then scene id, class,
// and box coordinates as tie-breaks.
bool detection_before(const Detection& a, const Detection& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.scene_id != b.scene_id) return a.scene_id < b.scene_id;
  if (a.class_id != b.class_id) return a.class_id < b.class_id;
  if (a.box.x_min != b.box.x_min) return a.box.x_min < b.box.x_min;
  return a.box.y_min < b.box.y_min;
}

struct MatchCounts {
  int tp = 0;
  int fp = 0;
  std::vector<char> tp_flags; // per detection, in sorted order
};

// Greedy matching at one threshold. Detections must already be sorted by
// descending score; each one takes the unmatched same-scene ground truth
// with the highest IoU >= threshold (ties to the lower instance index).
MatchCounts greedy_match(const std::vector<const Detection*>& sorted,
                         const std::map<std::int64_t, std::vector<const Instance*>>& gts,
                         double threshold) {
  MatchCounts counts;
  counts.tp_flags.resize(sorted.size(), 0);
  std::map<std::int64_t, std::vector<char>> used;
  for (const auto& [sid, list] : gts) used[sid].assign(list.size(), 0);
  for (std::size_t d = 0; d < sorted.size(); ++d) {
    const Detection& det = *sorted[d];
    const auto it = gts.find(det.scene_id);
    int best = -1;
    double best_iou = 0.0;
    if (it != gts.end()) {
      auto& used_flags = used[det.scene_id];
      for (std::size_t g = 0; g < it->second.size(); ++g) {
        if (used_flags[g]) continue;
        const double v = iou(det.box, it->second[g]->box);
        if (v >= threshold && v > best_iou) {
          best_iou = v;
          best = static_cast<int>(g);
        }
      }
      if (best >= 0) used_flags[static_cast<std::size_t>(best)] = 1;
    }
    if (best >= 0) {
      counts.tp_flags[d] = 1;
      ++counts.tp;
    } else {
      ++counts.fp;
    }
  }
  return counts;
}

// 101-point interpolated AP from per-detection TP flags (score order).
double interpolated_ap(const std::vector<char>& tp_flags, int num_gt) {
  if (num_gt == 0) return 0.0;
  std::vector<double> precision, recall;
  int tp = 0, fp = 0;
  for (char flag : tp_flags) {
    if (flag) ++tp; else ++fp;
    precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(num_gt));
  }
  // Precision envelope: running max from the right.
  for (int i = static_cast<int>(precision.size()) - 2; i >= 0; --i)
    precision[static_cast<std::size_t>(i)] =
        std::max(precision[static_cast<std::size_t>(i)], precision[static_cast<std::size_t>(i) + 1]);
  double ap = 0.0;
  std::size_t idx = 0;
  for (int r = 0; r <= 100; ++r) {
    const double rec_threshold = static_cast<double>(r) / 100.0;
    while (idx < recall.size() && recall[idx] < rec_threshold) ++idx;
    if (idx < recall.size()) ap += precision[idx];
  }
  return ap / 101.0;
}

struct ClassEvalData {
  std::vector<const Detection*> sorted;
  std::map<std::int64_t, std::vector<const Instance*>> gts;
  int num_gt = 0;
};

ClassEvalData collect_class_data(const std::vector<Detection>& detections,
                                 const std::vector<Scene>& scenes, ClassId class_id) {
  ClassEvalData data;
  for (const Detection& d : detections)
    if (d.class_id == class_id) data.sorted.push_back(&d);
  std::sort(data.sorted.begin(), data.sorted.end(),
            [](const Detection* a, const Detection* b) { return detection_before(*a, *b); });
  for (const Scene& s : scenes) {
    for (const Instance& inst : s.instances) {
      if (inst.class_id == class_id) {
        data.gts[s.scene_id].push_back(&inst);
        ++data.num_gt;
      }
    }
  }
  return data;
}

} // namespace

std::vector<double> default_iou_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

std::vector<int> nms_keep(const std::vector<BoundingBox>& boxes, double iou_threshold) {
  std::vector<int> kept;
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    bool suppressed = false;
    for (int k : kept) {
      if (iou(boxes[i], boxes[static_cast<std::size_t>(k)]) >= iou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(static_cast<int>(i));
  }
  return kept;
}

std::vector<Detection> infer(const DetectorState& state, const Scene& scene,
                             int max_detections) {
  struct Candidate {
    BoundingBox box;
    ClassId class_id;
    double score;
    int proposal_index;
  };
  std::vector<Candidate> candidates;
  for (std::size_t pi = 0; pi < scene.proposals.size(); ++pi) {
    const Proposal& p = scene.proposals[pi];
    const RegionOutput out = forward_region(state, scene, p.box);
    const Eigen::VectorXd probs = scaled_softmax(out.logits, 1.0);
    BoundingBox refined = apply_box_deltas(p.box, out.box_deltas);
    // Clip to the scene extent; degenerate boxes are dropped.
    refined.x_min = std::clamp(refined.x_min, 0.0, scene.extent_w);
    refined.x_max = std::clamp(refined.x_max, 0.0, scene.extent_w);
    refined.y_min = std::clamp(refined.y_min, 0.0, scene.extent_h);
    refined.y_max = std::clamp(refined.y_max, 0.0, scene.extent_h);
    if (!refined.valid()) continue;
    for (std::size_t c = 0; c < state.registered_classes.size(); ++c) {
      Candidate cand;
      cand.box = refined;
      cand.class_id = state.registered_classes[c];
      cand.score = probs[static_cast<Eigen::Index>(c) + 1]; // background excluded
      cand.proposal_index = static_cast<int>(pi);
      candidates.push_back(cand);
    }
  }

  // Per-class NMS at IoU 0.5 in score order (proposal index breaks ties).
  std::vector<Detection> detections;
  std::map<ClassId, std::vector<Candidate>> by_class;
  for (const Candidate& c : candidates) by_class[c.class_id].push_back(c);
  for (auto& [cls, list] : by_class) {
    std::sort(list.begin(), list.end(), [](const Candidate& a, const Candidate& b) {
      if (a.score != b.score) return a.score > b.score;
      return a.proposal_index < b.proposal_index;
    });
    std::vector<BoundingBox> boxes;
    boxes.reserve(list.size());
    for (const Candidate& c : list) boxes.push_back(c.box);
    for (int k : nms_keep(boxes, 0.5)) {
      const Candidate& c = list[static_cast<std::size_t>(k)];
      detections.push_back({scene.scene_id, c.box, c.class_id, c.score});
    }
  }

  std::sort(detections.begin(), detections.end(), detection_before);
  if (static_cast<int>(detections.size()) > max_detections)
    detections.resize(static_cast<std::size_t>(max_detections));
  return detections;
}

double average_precision(const std::vector<Detection>& detections,
                         const std::vector<Scene>& scenes, ClassId class_id,
                         const std::vector<double>& iou_thresholds) {
  const ClassEvalData data = collect_class_data(detections, scenes, class_id);
  double sum = 0.0;
  for (double t : iou_thresholds) {
    const MatchCounts counts = greedy_match(data.sorted, data.gts, t);
    sum += interpolated_ap(counts.tp_flags, data.num_gt);
  }
  return 100.0 * sum / static_cast<double>(iou_thresholds.size());
}

double average_recall(const std::vector<Detection>& detections,
                      const std::vector<Scene>& scenes, ClassId class_id,
                      const std::vector<double>& iou_thresholds) {
  const ClassEvalData data = collect_class_data(detections, scenes, class_id);
  if (data.num_gt == 0) return 0.0;
  double sum = 0.0;
  for (double t : iou_thresholds) {
    const MatchCounts counts = greedy_match(data.sorted, data.gts, t);
    sum += static_cast<double>(counts.tp) / static_cast<double>(data.num_gt);
  }
  return 100.0 * sum / static_cast<double>(iou_thresholds.size());
}

EvalReport evaluate(const DetectorState& state, const DatasetSplit& test_split,
                    const std::vector<ClassId>& base_classes,
                    const std::vector<ClassId>& novel_classes) {
  std::vector<Detection> detections;
  for (const Scene& scene : test_split.scenes) {
    const std::vector<Detection> dets = infer(state, scene);
    detections.insert(detections.end(), dets.begin(), dets.end());
  }
  const std::vector<double> thresholds = default_iou_thresholds();

  EvalReport report;
  auto eval_domain = [&](const std::vector<ClassId>& classes, std::optional<double>& ap_out,
                         std::optional<double>& ar_out) {
    if (classes.empty()) return;
    double ap_sum = 0.0, ar_sum = 0.0;
    int counted = 0;
    for (ClassId c : classes) {
      const ClassEvalData data = collect_class_data(detections, test_split.scenes, c);
      if (data.num_gt == 0) continue; // no ground truth: excluded from the mean
      const double ap = average_precision(detections, test_split.scenes, c, thresholds);
      const double ar = average_recall(detections, test_split.scenes, c, thresholds);
      report.per_class[c] = {ap, ar};
      ap_sum += ap;
      ar_sum += ar;
      ++counted;
    }
    if (counted > 0) {
      ap_out = ap_sum / counted;
      ar_out = ar_sum / counted;
    }
  };
  eval_domain(base_classes, report.base_ap, report.base_ar);
  eval_domain(novel_classes, report.novel_ap, report.novel_ar);
  if (report.base_ap && report.novel_ap)
    report.hm_ap = harmonic_mean(*report.base_ap, *report.novel_ap);
  if (report.base_ar && report.novel_ar)
    report.hm_ar = harmonic_mean(*report.base_ar, *report.novel_ar);
  return report;
}

std::string report_to_text(const EvalReport& report) {
  std::string out = "{\"type\":\"eval_report\"";
  auto field = [&out](const char* name, const std::optional<double>& v) {
    if (v) {
      out += ",\"";
      out += name;
      out += "\":";
      out += format_g17(*v);
    }
  };
  field("base_ap", report.base_ap);
  field("base_ar", report.base_ar);
  field("novel_ap", report.novel_ap);
  field("novel_ar", report.novel_ar);
  field("hm_ap", report.hm_ap);
  field("hm_ar", report.hm_ar);
  out += ",\"per_class\":[";
  bool first = true;
  for (const auto& [cls, m] : report.per_class) {
    if (!first) out += ',';
    first = false;
    out += "{\"class\":";
    out += std::to_string(cls);
    out += ",\"ap\":";
    out += format_g17(m.ap);
    out += ",\"ar\":";
    out += format_g17(m.ar);
    out += '}';
  }
  out += "]}";
  return out;
}

EvalReport report_from_text(const std::string& text) {
  const nlohmann::json j = nlohmann::json::parse(text);
  if (j.at("type").get<std::string>() != "eval_report")
    throw std::runtime_error("expected an eval_report record");
  EvalReport r;
  auto field = [&j](const char* name) -> std::optional<double> {
    if (j.contains(name)) return j.at(name).get<double>();
    return std::nullopt;
  };
  r.base_ap = field("base_ap");
  r.base_ar = field("base_ar");
  r.novel_ap = field("novel_ap");
  r.novel_ar = field("novel_ar");
  r.hm_ap = field("hm_ap");
  r.hm_ar = field("hm_ar");
  for (const auto& pc : j.at("per_class")) {
    r.per_class[pc.at("class").get<ClassId>()] = {pc.at("ap").get<double>(),
                                                  pc.at("ar").get<double>()};
  }
  return r;
}

} // namespace ifsd
