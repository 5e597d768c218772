#pragma once

#include "ifsd/core.hpp"
#include "ifsd/detector.hpp"

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

// Clustering-based exemplar selection over base-class data, plus the
// random and class-mean (herding) baselines. Features are the detector's
// post-CSE object features at ground-truth boxes under the pre-trained
// model, averaged per (scene, class).

namespace ifsd {

struct ImageClassFeature {
  std::int64_t scene_id = 0;
  ClassId class_id = 0;
  Eigen::VectorXd feature;      // mean obj_feature over the scene's instances of class_id
  int cluster_assignment = -1;  // nearest centroid index, set by assign_clusters
};

// class -> K centroid vectors. Classes with fewer than K distinct features
// duplicate the last centroid, shrinking their reachable coverage.
using ClassCentroids = std::map<ClassId, std::vector<Eigen::VectorXd>>;

enum class ExemplarMethod { None, Clustering, Random, ClassMean };

struct ExemplarSet {
  std::vector<std::int64_t> scene_ids;                 // selection order
  std::set<std::pair<ClassId, int>> covered;           // (class, cluster) pairs R
  ExemplarMethod method = ExemplarMethod::None;
  std::uint64_t seed = 0;
};

struct KMeansResult {
  std::vector<Eigen::VectorXd> centroids;
  std::vector<int> assignments; // nearest centroid per input feature
};

// One entry per (scene, distinct class) pair; scenes without annotations
// contribute nothing. Order: scenes as given, classes by id within a scene.
std::vector<ImageClassFeature> extract_image_class_features(const DetectorState& state,
                                                            const std::vector<Scene>& scenes);

// Lloyd's iterations from k-means++ seeding until the assignment fixpoint
// or 100 iterations; deterministic per seed. n < k duplicates the last
// point. Throws on empty input.
KMeansResult kmeans(const std::vector<Eigen::VectorXd>& features, int k, std::uint64_t seed);

// Runs kmeans per class over the per-image class features.
ClassCentroids cluster_class_features(const std::vector<ImageClassFeature>& features, int k,
                                      std::uint64_t seed);

// Fills each feature's cluster_assignment with its nearest centroid
// (ties to the smaller index).
void assign_clusters(std::vector<ImageClassFeature>& features, const ClassCentroids& centroids);

// Greedy cluster-coverage selection: repeatedly pick, among scenes none of
// whose (class, cluster) pairs are covered yet, the scene with the smallest
// mean distance of its features to their assigned centroids (ties to the
// smaller scene id); stop at full coverage or when no eligible scene
// remains. May return fewer than num_base_classes*K scenes; uncovered pairs
// are reported via `covered`.
ExemplarSet select_exemplars_clustering(const std::vector<ImageClassFeature>& features,
                                        const ClassCentroids& centroids, int k);

// Uniform sample without replacement; count larger than the pool is clamped.
ExemplarSet select_exemplars_random(const std::vector<Scene>& scenes, int count,
                                    std::uint64_t seed);

// Herding per class toward the class mean feature, K scenes per class,
// union deduplicated (first selection wins).
ExemplarSet select_exemplars_classmean(const std::vector<ImageClassFeature>& features, int k);

// (class, cluster) pairs reachable from the given scene ids' assignments;
// used to audit how many modes a selection covers.
std::set<std::pair<ClassId, int>> coverage(const std::vector<std::int64_t>& scene_ids,
                                           const std::vector<ImageClassFeature>& features);

// Structured-text (single JSON line) round-trip for audit and reuse.
std::string exemplar_set_to_text(const ExemplarSet& set);
ExemplarSet exemplar_set_from_text(const std::string& text);

std::string to_string(ExemplarMethod m);
ExemplarMethod exemplar_method_from_string(const std::string& s);

} // namespace ifsd
