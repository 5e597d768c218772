#include <doctest.h>

#include "ifsd/detector.hpp"
#include "ifsd/rng.hpp"

#include <cmath>

using namespace ifsd;

namespace {

constexpr int kDWorld = 5;

Scene two_instance_scene() {
  // Equal-size boxes shifted along x so the IoUs with the probe box
  // [0,0,10,10] are exactly 0.8 and 0.4: shift = w(1-t)/(1+t).
  Scene s;
  s.scene_id = 1;
  s.extent_w = s.extent_h = 40.0;
  Instance a;
  const double dx_a = 10.0 * (1.0 - 0.8) / (1.0 + 0.8);
  a.box = {dx_a, 0.0, 10.0 + dx_a, 10.0};
  a.class_id = 0;
  a.latent_feature = Eigen::VectorXd::LinSpaced(kDWorld, 1.0, 5.0);
  Instance b;
  const double dx_b = 10.0 * (1.0 - 0.4) / (1.0 + 0.4);
  b.box = {dx_b, 0.0, 10.0 + dx_b, 10.0};
  b.class_id = 1;
  b.latent_feature = Eigen::VectorXd::LinSpaced(kDWorld, -2.0, 2.0);
  s.instances = {a, b};
  return s;
}

DetectorState small_state(int num_classes = 2, std::uint64_t seed = 3) {
  DetectorConfig dims;
  dims.d_world = kDWorld;
  dims.d_feat = 6;
  dims.d_hidden = 7;
  dims.d_obj = 4;
  std::vector<ClassId> classes;
  for (int c = 0; c < num_classes; ++c) classes.push_back(c);
  return init_detector(dims, classes, seed);
}

RegionUpstream random_upstream(const DetectorState& state, Rng& rng) {
  RegionUpstream up;
  up.d_logits = Eigen::VectorXd::Zero(state.num_logits());
  for (int i = 0; i < state.num_logits(); ++i) up.d_logits[i] = rng.normal();
  up.d_objectness = rng.normal();
  for (int k = 0; k < 4; ++k) up.d_box_deltas[k] = rng.normal();
  return up;
}

// Scalar objective J = gz.z + go.o + gd.d whose parameter gradient is
// exactly what backward_region accumulates.
double probe_objective(const DetectorState& state, const Scene& scene, const BoundingBox& box,
                       const RegionUpstream& up) {
  const RegionOutput out = forward_region(state, scene, box);
  return up.d_logits.dot(out.logits) + up.d_objectness * out.objectness +
         up.d_box_deltas.dot(out.box_deltas);
}

} // namespace

TEST_CASE("disjoint box yields the zero-feature forward pass") {
  const Scene s = two_instance_scene();
  DetectorState state = small_state();
  const BoundingBox far{30.0, 30.0, 35.0, 35.0};
  CHECK(region_feature(s, far, kDWorld).norm() == 0.0);
  const RegionOutput out = forward_region(state, s, far);
  // Zero input: logits are the biases propagated through the net.
  const Eigen::VectorXd a = (state.agnostic_w * Eigen::VectorXd::Zero(kDWorld)).array().tanh();
  const Eigen::VectorXd h = (state.cse_w1 * a + state.cse_b1).array().tanh();
  const Eigen::VectorXd f = (state.cse_w2 * h + state.cse_b2).array().tanh();
  const Eigen::VectorXd expected = state.cls_w * f + state.cls_b;
  CHECK((out.logits - expected).norm() == 0.0);
}

TEST_CASE("exact ground-truth box of a lone instance returns its feature") {
  Scene s = two_instance_scene();
  s.instances.resize(1);
  DetectorState state = small_state();
  const Eigen::VectorXd r = region_feature(s, s.instances[0].box, kDWorld);
  CHECK((r - s.instances[0].latent_feature).norm() == doctest::Approx(0.0));
}

TEST_CASE("region feature is the IoU-weighted average") {
  const Scene s = two_instance_scene();
  const BoundingBox probe{0.0, 0.0, 10.0, 10.0};
  const Eigen::VectorXd r = region_feature(s, probe, kDWorld);
  const Eigen::VectorXd expected =
      (0.8 * s.instances[0].latent_feature + 0.4 * s.instances[1].latent_feature) / 1.2;
  CHECK((r - expected).norm() == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("zero upstream produces zero gradients") {
  const Scene s = two_instance_scene();
  const DetectorState state = small_state();
  DetectorGrads grads = make_grads_like(state);
  RegionUpstream up;
  up.d_logits = Eigen::VectorXd::Zero(state.num_logits());
  backward_region(state, s, {0, 0, 10, 10}, up, grads);
  visit_params(grads, [](const char*, ParamGroup, bool, const auto& g) {
    CHECK(g.norm() == 0.0);
  });
}

TEST_CASE("analytic gradients match central finite differences") {
  const Scene s = two_instance_scene();
  DetectorState state = small_state();
  const BoundingBox probe{0.0, 0.0, 10.0, 10.0};
  Rng rng(11);
  const RegionUpstream up = random_upstream(state, rng);

  DetectorGrads grads = make_grads_like(state);
  backward_region(state, s, probe, up, grads, TransferStrategy::FitAll);

  const double eps = 1e-5;
  visit_params(state, [&](const char* name, ParamGroup, bool, auto& param) {
    // Matching gradient tensor by name.
    visit_params(grads, [&](const char* gname, ParamGroup, bool, auto& gtensor) {
      if (std::string(gname) != name) return;
      const int checks = std::min<int>(20, static_cast<int>(param.size()));
      for (int k = 0; k < checks; ++k) {
        const Eigen::Index idx =
            static_cast<Eigen::Index>(rng.uniform_index(static_cast<std::uint64_t>(param.size())));
        double* slot = param.data() + idx;
        const double saved = *slot;
        *slot = saved + eps;
        const double plus = probe_objective(state, s, probe, up);
        *slot = saved - eps;
        const double minus = probe_objective(state, s, probe, up);
        *slot = saved;
        const double fd = (plus - minus) / (2.0 * eps);
        const double an = *(gtensor.data() + idx);
        const double rel = std::abs(fd - an) / std::max({1e-8, std::abs(fd), std::abs(an)});
        CHECK(rel < 1e-4);
      }
    });
  });
}

TEST_CASE("frozen groups accumulate nothing under FitCse and FixAll") {
  const Scene s = two_instance_scene();
  const DetectorState state = small_state();
  Rng rng(13);
  const RegionUpstream up = random_upstream(state, rng);

  DetectorGrads grads = make_grads_like(state);
  backward_region(state, s, {0, 0, 10, 10}, up, grads, TransferStrategy::FitCse);
  CHECK(grads.agnostic_w.norm() == 0.0);
  CHECK(grads.cse_w1.norm() > 0.0);

  grads.set_zero();
  backward_region(state, s, {0, 0, 10, 10}, up, grads, TransferStrategy::FixAll);
  CHECK(grads.agnostic_w.norm() == 0.0);
  CHECK(grads.cse_w1.norm() == 0.0);
  CHECK(grads.obj_w.norm() == 0.0);
  CHECK(grads.cls_w.norm() > 0.0);
  CHECK(grads.box_w.norm() > 0.0);
}

TEST_CASE("strategy masks partition the parameter set") {
  // Every group is either always-frozen (agnostic), CSE, or a head; each
  // strategy's trainable set matches its definition.
  CHECK(!group_trainable(TransferStrategy::FitCse, ParamGroup::Agnostic));
  CHECK(!group_trainable(TransferStrategy::FixAll, ParamGroup::Agnostic));
  CHECK(group_trainable(TransferStrategy::FitAll, ParamGroup::Agnostic));
  CHECK(group_trainable(TransferStrategy::FitCse, ParamGroup::Cse));
  CHECK(!group_trainable(TransferStrategy::FixAll, ParamGroup::Cse));
  CHECK(!group_trainable(TransferStrategy::FixAll, ParamGroup::ObjectnessHead));
  for (ParamGroup g : {ParamGroup::ClassifierHead, ParamGroup::BoxRegHead}) {
    CHECK(group_trainable(TransferStrategy::FixAll, g));
    CHECK(group_trainable(TransferStrategy::FitCse, g));
    CHECK(group_trainable(TransferStrategy::FitAll, g));
  }
}

TEST_CASE("registering classes preserves old rows bitwise") {
  DetectorState state = small_state(3, /*seed=*/21);
  const Scene s = two_instance_scene();
  const RegionOutput before = forward_region(state, s, {0, 0, 10, 10});

  register_classes(state, {7}, /*seed=*/42);
  CHECK(state.num_logits() == 5);
  CHECK(state.logit_index(7) == 4);
  const RegionOutput after = forward_region(state, s, {0, 0, 10, 10});
  for (int i = 0; i < 4; ++i) CHECK(after.logits[i] == before.logits[i]);
  CHECK(state.cls_b[4] == 0.0);

  CHECK_THROWS_AS(register_classes(state, {7}, 42), std::invalid_argument);
  CHECK_THROWS_AS(register_classes(state, {0}, 42), std::invalid_argument);
}

TEST_CASE("continual and batched registration agree") {
  DetectorState one_shot = small_state(2, 5);
  DetectorState stepwise = small_state(2, 5);
  register_classes(one_shot, {10, 11, 12, 13, 14}, /*seed=*/9);
  for (ClassId c : {10, 11, 12, 13, 14}) register_classes(stepwise, {c}, /*seed=*/9);
  CHECK(one_shot.cls_w.rows() == stepwise.cls_w.rows());
  CHECK((one_shot.cls_w - stepwise.cls_w).norm() == 0.0);
  CHECK((one_shot.cls_b - stepwise.cls_b).norm() == 0.0);
  // Old rows bitwise equal to the pre-registration state.
  const DetectorState original = small_state(2, 5);
  CHECK(one_shot.cls_w.topRows(3) == original.cls_w);
}

TEST_CASE("initialization is deterministic per seed") {
  const DetectorState a = small_state(2, 17);
  const DetectorState b = small_state(2, 17);
  const DetectorState c = small_state(2, 18);
  CHECK(checkpoint_bytes(a) == checkpoint_bytes(b));
  CHECK(checkpoint_bytes(a) != checkpoint_bytes(c));
}

TEST_CASE("checkpoints round-trip bit-exactly") {
  DetectorState state = small_state(3, 23);
  register_classes(state, {9}, 1);
  const std::string bytes = checkpoint_bytes(state);
  const DetectorState back = checkpoint_from_bytes(bytes);
  CHECK(checkpoint_bytes(back) == bytes);
  CHECK(back.registered_classes == state.registered_classes);
  CHECK(back.dims.d_obj == state.dims.d_obj);

  CHECK_THROWS(checkpoint_from_bytes("garbage"));
  std::string truncated = bytes;
  truncated.resize(truncated.size() / 2);
  CHECK_THROWS(checkpoint_from_bytes(truncated));
}
