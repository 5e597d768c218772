#include "ifsd/losses.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace ifsd {

namespace {

constexpr char kStoreMagic[8] = {'I', 'F', 'S', 'D', 'D', 'S', 'T', 'R'};
constexpr std::uint32_t kStoreVersion = 1;

// Log-sum-exp with max subtraction; shared by the loss terms.
double log_sum_exp(const Eigen::VectorXd& v) {
  const double m = v.maxCoeff();
  return m + std::log((v.array() - m).exp().sum());
}

Eigen::Vector4d loc_target(const Scene& scene, const RegionSample& sample) {
  const Proposal& p = scene.proposals[static_cast<std::size_t>(sample.proposal_index)];
  const Instance& gt = scene.instances[static_cast<std::size_t>(sample.matched_instance)];
  return encode_box_deltas(p.box, gt.box);
}

} // namespace

const Eigen::VectorXd& DistillTargetStore::at(const Key& key) const {
  const auto it = targets.find(key);
  if (it == targets.end())
    throw std::runtime_error("distillation target missing for scene " +
                             std::to_string(key.first) + " instance " +
                             std::to_string(key.second) +
                             " (store/session mismatch)");
  return it->second;
}

Eigen::VectorXd scaled_softmax(const Eigen::VectorXd& logits, double temperature) {
  const Eigen::VectorXd scaled = logits / temperature;
  const double m = scaled.maxCoeff();
  Eigen::VectorXd p = (scaled.array() - m).exp();
  p /= p.sum();
  return p;
}

std::vector<std::pair<const Proposal*, int>> select_positive_regions(const Scene& scene,
                                                                     double alpha) {
  std::vector<std::pair<const Proposal*, int>> out;
  for (const Proposal& p : scene.proposals) {
    if (p.max_iou > alpha) out.emplace_back(&p, p.matched_gt);
  }
  return out;
}

DistillTargetStore precompute_distill_targets(const DetectorState& old_state,
                                              const DatasetSplit& split, double temperature,
                                              bool include_background,
                                              const SceneExposure* exposure) {
  DistillTargetStore store;
  store.temperature_used = temperature;
  store.includes_background = include_background;
  for (const Scene& scene : split.scenes) {
    const std::set<ClassId>* visible = &split.visible_classes;
    if (exposure != nullptr) {
      const auto it = exposure->find(scene.scene_id);
      if (it != exposure->end()) visible = &it->second;
    }
    for (std::size_t i = 0; i < scene.instances.size(); ++i) {
      const Instance& inst = scene.instances[i];
      if (!visible->count(inst.class_id)) continue;
      const RegionOutput out = forward_region(old_state, scene, inst.box);
      Eigen::VectorXd logits;
      if (include_background) {
        logits = out.logits;
      } else {
        logits = out.logits.tail(out.logits.size() - 1);
      }
      store.targets[{scene.scene_id, static_cast<int>(i)}] =
          scaled_softmax(logits, temperature);
    }
  }
  return store;
}

double classification_loss(const std::vector<RegionOutput>& outputs,
                           const std::vector<int>& labels) {
  if (outputs.empty()) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    const Eigen::VectorXd& z = outputs[i].logits;
    sum += log_sum_exp(z) - z[labels[i]];
  }
  return sum / static_cast<double>(outputs.size());
}

double distillation_loss(const std::vector<RegionOutput>& outputs,
                         const std::vector<DistillTargetStore::Key>& keys,
                         const DistillTargetStore& store, double temperature) {
  if (outputs.empty()) return 0.0;
  if (temperature != store.temperature_used)
    throw std::runtime_error("distillation temperature differs from the store's");
  double sum = 0.0;
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    const Eigen::VectorXd& target = store.at(keys[i]);
    const Eigen::Index support = target.size();
    // Current distribution restricted to the stored support: the old-class
    // block is a prefix of the logits because the registry is append-only.
    Eigen::VectorXd old_block;
    if (store.includes_background) {
      old_block = outputs[i].logits.head(support);
    } else {
      old_block = outputs[i].logits.segment(1, support);
    }
    const Eigen::VectorXd scaled = old_block / temperature;
    const double lse = log_sum_exp(scaled);
    // -sum_i p_old[i] * log p_cur[i]
    sum += (target.array() * (lse - scaled.array())).sum();
  }
  return sum / static_cast<double>(outputs.size());
}

double smooth_l1(double residual) {
  const double a = std::abs(residual);
  return a < 1.0 ? 0.5 * residual * residual : a - 0.5;
}

double smooth_l1_grad(double residual) {
  if (residual > 1.0) return 1.0;
  if (residual < -1.0) return -1.0;
  return residual;
}

double localization_loss(const std::vector<RegionOutput>& outputs,
                         const std::vector<Eigen::Vector4d>& target_deltas) {
  if (outputs.empty()) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    for (int k = 0; k < 4; ++k)
      sum += smooth_l1(outputs[i].box_deltas[k] - target_deltas[i][k]);
  }
  return sum / static_cast<double>(outputs.size());
}

double objectness_loss(const std::vector<RegionOutput>& outputs,
                       const std::vector<int>& labels) {
  if (outputs.empty()) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    const double o = outputs[i].objectness;
    // log(1 + exp(-|o|)) form is stable for both signs.
    const double softplus = std::log1p(std::exp(-std::abs(o))) + std::max(o, 0.0);
    sum += softplus - static_cast<double>(labels[i]) * o;
  }
  return sum / static_cast<double>(outputs.size());
}

double total_loss(const LossComponents& parts, double temperature, const LossConfig& cfg) {
  double total = cfg.rpn_weight * parts.rpn + cfg.loc_weight * parts.loc + parts.cls;
  if (parts.has_kd) total += temperature * temperature * parts.kd;
  return total;
}

std::vector<RegionSample> build_region_batch(const std::vector<const Scene*>& scenes,
                                             const std::set<ClassId>& visible,
                                             const LossConfig& cfg, Rng& rng,
                                             const SceneExposure* exposure) {
  std::vector<RegionSample> batch;
  for (const Scene* scene : scenes) {
    const std::set<ClassId>* exposed = &visible;
    if (exposure != nullptr) {
      const auto it = exposure->find(scene->scene_id);
      if (it != exposure->end()) exposed = &it->second;
    }
    int positives = 0;
    std::vector<int> backgrounds;
    for (std::size_t pi = 0; pi < scene->proposals.size(); ++pi) {
      const Proposal& p = scene->proposals[pi];
      // Match against exposed annotations only. Objects whose class is not
      // exposed here are unannotated as far as training is concerned, so
      // regions on them fall through to the background set.
      double best_iou = 0.0;
      int best_gt = -1;
      for (std::size_t i = 0; i < scene->instances.size(); ++i) {
        const Instance& inst = scene->instances[i];
        if (!exposed->count(inst.class_id)) continue;
        const double v = iou(p.box, inst.box);
        if (v > best_iou) {
          best_iou = v;
          best_gt = static_cast<int>(i);
        }
      }
      if (best_iou > cfg.alpha) {
        batch.push_back({scene, static_cast<int>(pi), true, best_gt});
        ++positives;
      } else if (best_iou < cfg.background_iou) {
        backgrounds.push_back(static_cast<int>(pi));
      }
      // [background_iou, alpha] is the ignore band.
    }
    const int want = cfg.background_ratio * positives;
    if (static_cast<int>(backgrounds.size()) > want) {
      rng.shuffle(backgrounds);
      backgrounds.resize(static_cast<std::size_t>(want));
      std::sort(backgrounds.begin(), backgrounds.end());
    }
    for (int pi : backgrounds) batch.push_back({scene, pi, false, -1});
  }
  return batch;
}

BatchResult compute_batch(const DetectorState& state, const std::vector<RegionSample>& batch,
                          const DistillTargetStore* store, const LossConfig& cfg,
                          TransferStrategy strategy, DetectorGrads* grads) {
  BatchResult result;
  result.num_regions = static_cast<int>(batch.size());
  if (batch.empty()) return result;

  std::vector<RegionOutput> outputs;
  outputs.reserve(batch.size());
  std::vector<int> cls_labels(batch.size());
  std::vector<int> obj_labels(batch.size());

  std::vector<std::size_t> positive_idx;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const RegionSample& s = batch[i];
    const Proposal& p = s.scene->proposals[static_cast<std::size_t>(s.proposal_index)];
    outputs.push_back(forward_region(state, *s.scene, p.box));
    if (s.positive) {
      const Instance& gt = s.scene->instances[static_cast<std::size_t>(s.matched_instance)];
      cls_labels[i] = state.logit_index(gt.class_id);
      obj_labels[i] = 1;
      positive_idx.push_back(i);
    } else {
      cls_labels[i] = 0;
      obj_labels[i] = 0;
    }
  }
  result.num_positives = static_cast<int>(positive_idx.size());

  std::vector<RegionOutput> pos_outputs;
  std::vector<Eigen::Vector4d> pos_targets;
  std::vector<DistillTargetStore::Key> pos_keys;
  for (std::size_t i : positive_idx) {
    const RegionSample& s = batch[i];
    pos_outputs.push_back(outputs[i]);
    pos_targets.push_back(loc_target(*s.scene, s));
    pos_keys.emplace_back(s.scene->scene_id, s.matched_instance);
  }

  result.parts.cls = classification_loss(outputs, cls_labels);
  result.parts.rpn = objectness_loss(outputs, obj_labels);
  result.parts.loc = localization_loss(pos_outputs, pos_targets);
  if (store != nullptr) {
    result.parts.kd =
        distillation_loss(pos_outputs, pos_keys, *store, cfg.temperature);
    result.parts.has_kd = true;
  }
  result.total = total_loss(result.parts, cfg.temperature, cfg);

  if (grads == nullptr) return result;

  const double inv_n = 1.0 / static_cast<double>(batch.size());
  const double inv_pos =
      positive_idx.empty() ? 0.0 : 1.0 / static_cast<double>(positive_idx.size());
  const double T = cfg.temperature;

  std::size_t pos_cursor = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const RegionSample& s = batch[i];
    const Proposal& p = s.scene->proposals[static_cast<std::size_t>(s.proposal_index)];
    const RegionOutput& out = outputs[i];

    RegionUpstream up;
    up.d_logits = scaled_softmax(out.logits, 1.0) * inv_n;
    up.d_logits[cls_labels[i]] -= inv_n;

    const double sig = 1.0 / (1.0 + std::exp(-out.objectness));
    up.d_objectness =
        cfg.rpn_weight * (sig - static_cast<double>(obj_labels[i])) * inv_n;

    if (s.positive) {
      const Eigen::Vector4d& target = pos_targets[pos_cursor];
      for (int k = 0; k < 4; ++k)
        up.d_box_deltas[k] =
            cfg.loc_weight * smooth_l1_grad(out.box_deltas[k] - target[k]) * inv_pos;

      if (store != nullptr) {
        const Eigen::VectorXd& old_p = store->at(pos_keys[pos_cursor]);
        const Eigen::Index support = old_p.size();
        const Eigen::Index offset = store->includes_background ? 0 : 1;
        const Eigen::VectorXd cur_p =
            scaled_softmax(out.logits.segment(offset, support), T);
        // d(T^2 * mean CE)/dz = T * (p_cur - p_old) / N_pos on the old block.
        for (Eigen::Index k = 0; k < support; ++k)
          up.d_logits[offset + k] += T * (cur_p[k] - old_p[k]) * inv_pos;
      }
      ++pos_cursor;
    }

    backward_region(state, *s.scene, p.box, up, *grads, strategy);
  }
  return result;
}

void save_distill_store(const std::filesystem::path& path, const DistillTargetStore& store) {
  std::string out;
  out.append(kStoreMagic, sizeof(kStoreMagic));
  const std::uint32_t version = kStoreVersion;
  out.append(reinterpret_cast<const char*>(&version), sizeof(version));
  out.append(reinterpret_cast<const char*>(&store.temperature_used),
             sizeof(store.temperature_used));
  const std::uint8_t inc_bg = store.includes_background ? 1 : 0;
  out.append(reinterpret_cast<const char*>(&inc_bg), sizeof(inc_bg));
  const std::uint64_t count = store.targets.size();
  out.append(reinterpret_cast<const char*>(&count), sizeof(count));
  for (const auto& [key, vec] : store.targets) {
    const std::int64_t scene_id = key.first;
    const std::int32_t inst = key.second;
    const std::uint32_t len = static_cast<std::uint32_t>(vec.size());
    out.append(reinterpret_cast<const char*>(&scene_id), sizeof(scene_id));
    out.append(reinterpret_cast<const char*>(&inst), sizeof(inst));
    out.append(reinterpret_cast<const char*>(&len), sizeof(len));
    out.append(reinterpret_cast<const char*>(vec.data()), sizeof(double) * vec.size());
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for writing: " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

DistillTargetStore load_distill_store(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for reading: " + path.string());
  std::ostringstream buf;
  buf << f.rdbuf();
  const std::string in = buf.str();
  std::size_t off = 0;
  auto take = [&in, &off](void* dst, std::size_t n) {
    if (off + n > in.size()) throw std::runtime_error("truncated distillation store");
    std::memcpy(dst, in.data() + off, n);
    off += n;
  };
  char magic[8];
  take(magic, sizeof(magic));
  if (std::memcmp(magic, kStoreMagic, sizeof(magic)) != 0)
    throw std::runtime_error("bad distillation store magic");
  std::uint32_t version;
  take(&version, sizeof(version));
  if (version != kStoreVersion) throw std::runtime_error("unsupported store version");
  DistillTargetStore store;
  take(&store.temperature_used, sizeof(store.temperature_used));
  std::uint8_t inc_bg;
  take(&inc_bg, sizeof(inc_bg));
  store.includes_background = inc_bg != 0;
  std::uint64_t count;
  take(&count, sizeof(count));
  for (std::uint64_t i = 0; i < count; ++i) {
    std::int64_t scene_id;
    std::int32_t inst;
    std::uint32_t len;
    take(&scene_id, sizeof(scene_id));
    take(&inst, sizeof(inst));
    take(&len, sizeof(len));
    Eigen::VectorXd vec(len);
    take(vec.data(), sizeof(double) * len);
    store.targets[{scene_id, inst}] = std::move(vec);
  }
  if (off != in.size()) throw std::runtime_error("trailing bytes in distillation store");
  return store;
}

} // namespace ifsd
