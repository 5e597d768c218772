#include "ifsd/exemplar.hpp"

#include "ifsd/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace ifsd {

namespace {

int nearest_centroid(const Eigen::VectorXd& f, const std::vector<Eigen::VectorXd>& centroids) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < centroids.size(); ++k) {
    const double d = (f - centroids[k]).squaredNorm();
    if (d < best_d) { // ties keep the smaller index
      best_d = d;
      best = static_cast<int>(k);
    }
  }
  return best;
}

} // namespace

std::vector<ImageClassFeature> extract_image_class_features(const DetectorState& state,
                                                            const std::vector<Scene>& scenes) {
  std::vector<ImageClassFeature> out;
  for (const Scene& scene : scenes) {
    std::map<ClassId, std::pair<Eigen::VectorXd, int>> acc;
    for (const Instance& inst : scene.instances) {
      const RegionOutput r = forward_region(state, scene, inst.box);
      auto it = acc.find(inst.class_id);
      if (it == acc.end()) {
        acc.emplace(inst.class_id, std::make_pair(r.obj_feature, 1));
      } else {
        it->second.first += r.obj_feature;
        it->second.second += 1;
      }
    }
    for (auto& [cls, sum_count] : acc) {
      ImageClassFeature f;
      f.scene_id = scene.scene_id;
      f.class_id = cls;
      f.feature = sum_count.first / static_cast<double>(sum_count.second);
      out.push_back(std::move(f));
    }
  }
  return out;
}

KMeansResult kmeans(const std::vector<Eigen::VectorXd>& features, int k, std::uint64_t seed) {
  if (features.empty()) throw std::invalid_argument("kmeans: empty input");
  if (k < 1) throw std::invalid_argument("kmeans: k must be >= 1");
  const int n = static_cast<int>(features.size());
  KMeansResult result;

  if (n <= k) {
    // Each point is its own centroid; duplicates of the last fill up to k.
    for (int i = 0; i < k; ++i)
      result.centroids.push_back(features[static_cast<std::size_t>(std::min(i, n - 1))]);
    result.assignments.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) result.assignments[static_cast<std::size_t>(i)] = i;
    return result;
  }

  Rng rng = substream(seed, "kmeans");

  // k-means++ seeding.
  std::vector<Eigen::VectorXd>& centroids = result.centroids;
  centroids.push_back(features[rng.uniform_index(static_cast<std::uint64_t>(n))]);
  std::vector<double> dist2(static_cast<std::size_t>(n));
  while (static_cast<int>(centroids.size()) < k) {
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& c : centroids)
        best = std::min(best, (features[static_cast<std::size_t>(i)] - c).squaredNorm());
      dist2[static_cast<std::size_t>(i)] = best;
      total += best;
    }
    int chosen;
    if (total <= 0.0) {
      chosen = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(n)));
    } else {
      const double r = rng.uniform() * total;
      double cum = 0.0;
      chosen = n - 1;
      for (int i = 0; i < n; ++i) {
        cum += dist2[static_cast<std::size_t>(i)];
        if (cum >= r) {
          chosen = i;
          break;
        }
      }
    }
    centroids.push_back(features[static_cast<std::size_t>(chosen)]);
  }

  // Lloyd's iterations.
  std::vector<int>& assign = result.assignments;
  assign.assign(static_cast<std::size_t>(n), -1);
  for (int iter = 0; iter < 100; ++iter) {
    bool changed = false;
    for (int i = 0; i < n; ++i) {
      const int a = nearest_centroid(features[static_cast<std::size_t>(i)], centroids);
      if (a != assign[static_cast<std::size_t>(i)]) {
        assign[static_cast<std::size_t>(i)] = a;
        changed = true;
      }
    }
    if (!changed) break;
    for (int c = 0; c < k; ++c) {
      Eigen::VectorXd sum = Eigen::VectorXd::Zero(features[0].size());
      int count = 0;
      for (int i = 0; i < n; ++i) {
        if (assign[static_cast<std::size_t>(i)] == c) {
          sum += features[static_cast<std::size_t>(i)];
          ++count;
        }
      }
      if (count > 0) centroids[static_cast<std::size_t>(c)] = sum / count;
      // Empty clusters keep their previous centroid.
    }
  }
  return result;
}

ClassCentroids cluster_class_features(const std::vector<ImageClassFeature>& features, int k,
                                      std::uint64_t seed) {
  std::map<ClassId, std::vector<Eigen::VectorXd>> by_class;
  for (const auto& f : features) by_class[f.class_id].push_back(f.feature);
  ClassCentroids out;
  for (const auto& [cls, feats] : by_class) {
    // Per-class substream keeps clustering independent of other classes.
    out[cls] = kmeans(feats, k, seed ^ (0x517cc1b727220a95ULL * (std::uint64_t(cls) + 1)))
                   .centroids;
  }
  return out;
}

void assign_clusters(std::vector<ImageClassFeature>& features, const ClassCentroids& centroids) {
  for (auto& f : features) {
    const auto it = centroids.find(f.class_id);
    if (it == centroids.end())
      throw std::invalid_argument("no centroids for class " + std::to_string(f.class_id));
    f.cluster_assignment = nearest_centroid(f.feature, it->second);
  }
}

ExemplarSet select_exemplars_clustering(const std::vector<ImageClassFeature>& features,
                                        const ClassCentroids& centroids, int k) {
  ExemplarSet set;
  set.method = ExemplarMethod::Clustering;

  // Group features per scene and precompute each scene's mean distance to
  // its assigned centroids.
  struct SceneEntry {
    std::int64_t scene_id;
    std::vector<std::pair<ClassId, int>> pairs;
    double mean_distance;
    bool selected = false;
  };
  std::map<std::int64_t, std::vector<const ImageClassFeature*>> by_scene;
  for (const auto& f : features) {
    if (f.cluster_assignment < 0)
      throw std::invalid_argument("features must be assigned to clusters first");
    by_scene[f.scene_id].push_back(&f);
  }
  std::vector<SceneEntry> entries;
  for (const auto& [sid, feats] : by_scene) {
    SceneEntry e;
    e.scene_id = sid;
    double sum = 0.0;
    for (const ImageClassFeature* f : feats) {
      e.pairs.emplace_back(f->class_id, f->cluster_assignment);
      const auto& cents = centroids.at(f->class_id);
      sum += (f->feature - cents[static_cast<std::size_t>(f->cluster_assignment)]).norm();
    }
    e.mean_distance = sum / static_cast<double>(feats.size());
    entries.push_back(std::move(e));
  }

  const std::size_t target = centroids.size() * static_cast<std::size_t>(k);
  while (set.covered.size() < target) {
    int best = -1;
    for (std::size_t i = 0; i < entries.size(); ++i) {
      const SceneEntry& e = entries[i];
      if (e.selected) continue;
      bool eligible = true;
      for (const auto& pr : e.pairs) {
        if (set.covered.count(pr)) { eligible = false; break; }
      }
      if (!eligible) continue;
      // Strict < keeps the smaller scene id on ties (entries are id-ordered).
      if (best < 0 || e.mean_distance < entries[static_cast<std::size_t>(best)].mean_distance)
        best = static_cast<int>(i);
    }
    if (best < 0) break; // no eligible scene: early stop
    SceneEntry& chosen = entries[static_cast<std::size_t>(best)];
    chosen.selected = true;
    set.scene_ids.push_back(chosen.scene_id);
    for (const auto& pr : chosen.pairs) set.covered.insert(pr);
  }
  return set;
}

ExemplarSet select_exemplars_random(const std::vector<Scene>& scenes, int count,
                                    std::uint64_t seed) {
  ExemplarSet set;
  set.method = ExemplarMethod::Random;
  set.seed = seed;
  std::vector<std::int64_t> ids;
  ids.reserve(scenes.size());
  for (const Scene& s : scenes) ids.push_back(s.scene_id);
  Rng rng = substream(seed, "random_exemplar");
  rng.shuffle(ids);
  const std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(std::max(count, 0)),
                                                 ids.size());
  set.scene_ids.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(take));
  return set;
}

ExemplarSet select_exemplars_classmean(const std::vector<ImageClassFeature>& features, int k) {
  ExemplarSet set;
  set.method = ExemplarMethod::ClassMean;

  std::map<ClassId, std::vector<const ImageClassFeature*>> by_class;
  for (const auto& f : features) by_class[f.class_id].push_back(&f);
  for (auto& [cls, feats] : by_class) {
    std::sort(feats.begin(), feats.end(),
              [](const ImageClassFeature* a, const ImageClassFeature* b) {
                return a->scene_id < b->scene_id;
              });
  }

  std::set<std::int64_t> chosen;
  for (const auto& [cls, feats] : by_class) {
    Eigen::VectorXd class_mean = Eigen::VectorXd::Zero(feats[0]->feature.size());
    for (const auto* f : feats) class_mean += f->feature;
    class_mean /= static_cast<double>(feats.size());

    Eigen::VectorXd running_sum = Eigen::VectorXd::Zero(class_mean.size());
    std::vector<bool> used(feats.size(), false);
    const int take = std::min<int>(k, static_cast<int>(feats.size()));
    for (int t = 1; t <= take; ++t) {
      int best = -1;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < feats.size(); ++i) {
        if (used[i]) continue;
        const double d =
            (class_mean - (running_sum + feats[i]->feature) / static_cast<double>(t)).norm();
        if (d < best_d) { // ties keep the smallest scene id (feats are id-ordered)
          best_d = d;
          best = static_cast<int>(i);
        }
      }
      used[static_cast<std::size_t>(best)] = true;
      running_sum += feats[static_cast<std::size_t>(best)]->feature;
      const std::int64_t sid = feats[static_cast<std::size_t>(best)]->scene_id;
      if (chosen.insert(sid).second) set.scene_ids.push_back(sid);
    }
  }
  return set;
}

std::set<std::pair<ClassId, int>> coverage(const std::vector<std::int64_t>& scene_ids,
                                           const std::vector<ImageClassFeature>& features) {
  std::set<std::int64_t> ids(scene_ids.begin(), scene_ids.end());
  std::set<std::pair<ClassId, int>> out;
  for (const auto& f : features) {
    if (f.cluster_assignment >= 0 && ids.count(f.scene_id))
      out.emplace(f.class_id, f.cluster_assignment);
  }
  return out;
}

std::string to_string(ExemplarMethod m) {
  switch (m) {
    case ExemplarMethod::None: return "none";
    case ExemplarMethod::Clustering: return "clustering";
    case ExemplarMethod::Random: return "random";
    case ExemplarMethod::ClassMean: return "class_mean";
  }
  return "none";
}

ExemplarMethod exemplar_method_from_string(const std::string& s) {
  if (s == "none") return ExemplarMethod::None;
  if (s == "clustering") return ExemplarMethod::Clustering;
  if (s == "random") return ExemplarMethod::Random;
  if (s == "class_mean") return ExemplarMethod::ClassMean;
  throw std::invalid_argument("unknown exemplar method: " + s);
}

std::string exemplar_set_to_text(const ExemplarSet& set) {
  std::string out = "{\"type\":\"exemplar_set\",\"method\":\"";
  out += to_string(set.method);
  out += "\",\"seed\":";
  out += std::to_string(set.seed);
  out += ",\"scenes\":[";
  for (std::size_t i = 0; i < set.scene_ids.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(set.scene_ids[i]);
  }
  out += "],\"covered\":[";
  bool first = true;
  for (const auto& [cls, cluster] : set.covered) {
    if (!first) out += ',';
    first = false;
    out += '[';
    out += std::to_string(cls);
    out += ',';
    out += std::to_string(cluster);
    out += ']';
  }
  out += "]}";
  return out;
}

ExemplarSet exemplar_set_from_text(const std::string& text) {
  const nlohmann::json j = nlohmann::json::parse(text);
  if (j.at("type").get<std::string>() != "exemplar_set")
    throw std::runtime_error("expected an exemplar_set record");
  ExemplarSet set;
  set.method = exemplar_method_from_string(j.at("method").get<std::string>());
  set.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& s : j.at("scenes")) set.scene_ids.push_back(s.get<std::int64_t>());
  for (const auto& pr : j.at("covered"))
    set.covered.emplace(pr.at(0).get<ClassId>(), pr.at(1).get<int>());
  return set;
}

} // namespace ifsd
