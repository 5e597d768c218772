#include <doctest.h>

#include "ifsd/io.hpp"
#include "ifsd/rng.hpp"

#include <filesystem>

using namespace ifsd;

namespace {

Scene make_scene(std::int64_t id, Rng& rng) {
  Scene s;
  s.scene_id = id;
  s.extent_w = 100.0;
  s.extent_h = 100.0;
  for (int i = 0; i < 3; ++i) {
    Instance inst;
    const double x = quantize9(rng.uniform(0.0, 80.0));
    const double y = quantize9(rng.uniform(0.0, 80.0));
    inst.box = {x, y, quantize9(x + rng.uniform(2.0, 15.0)), quantize9(y + rng.uniform(2.0, 15.0))};
    inst.class_id = i % 2;
    inst.latent_feature = Eigen::VectorXd::Zero(4);
    for (int k = 0; k < 4; ++k) inst.latent_feature[k] = quantize9(rng.normal());
    s.instances.push_back(inst);
  }
  Proposal p;
  p.box = s.instances[0].box;
  p.matched_gt = 0;
  p.max_iou = 1.0;
  s.proposals.push_back(p);
  Proposal bg;
  bg.box = {90.0, 90.0, 95.0, 95.0};
  s.proposals.push_back(bg);
  return s;
}

} // namespace

TEST_CASE("scene line round-trip is exact after quantization") {
  Rng rng(42);
  for (int i = 0; i < 10; ++i) {
    const Scene s = make_scene(i, rng);
    const std::string line = scene_to_line(s);
    const Scene back = scene_from_line(line);
    CHECK(back.scene_id == s.scene_id);
    REQUIRE(back.instances.size() == s.instances.size());
    for (std::size_t k = 0; k < s.instances.size(); ++k) {
      CHECK(back.instances[k].box.x_min == s.instances[k].box.x_min);
      CHECK(back.instances[k].box.y_max == s.instances[k].box.y_max);
      CHECK(back.instances[k].class_id == s.instances[k].class_id);
      CHECK(back.instances[k].latent_feature == s.instances[k].latent_feature);
    }
    REQUIRE(back.proposals.size() == s.proposals.size());
    CHECK(back.proposals[0].matched_gt == 0);
    CHECK(back.proposals[1].matched_gt == -1);
    // Re-serialization is byte-identical.
    CHECK(scene_to_line(back) == line);
  }
}

TEST_CASE("reals are emitted with nine significant digits") {
  CHECK(format_g9(1.0 / 3.0) == "0.333333333");
  CHECK(format_g9(100.0) == "100");
  CHECK(quantize9(1.0 / 3.0) == 0.333333333);
  // Quantization is idempotent.
  Rng rng(7);
  for (int i = 0; i < 100; ++i) {
    const double x = rng.normal() * 1e3;
    CHECK(quantize9(quantize9(x)) == quantize9(x));
  }
}

TEST_CASE("split and sequence files round-trip") {
  Rng rng(9);
  DatasetSplit split;
  split.visible_classes = {0, 1};
  for (int i = 0; i < 4; ++i) split.scenes.push_back(make_scene(i, rng));

  const std::filesystem::path dir =
      std::filesystem::temp_directory_path() / "ifsd_io_test";
  std::filesystem::create_directories(dir);
  save_split(dir / "split.jsonl", split);
  const DatasetSplit back = load_split(dir / "split.jsonl");
  CHECK(back.visible_classes == split.visible_classes);
  CHECK(back.scenes.size() == split.scenes.size());
  CHECK(split_to_text(back) == split_to_text(split));

  TaskSequence seq;
  seq.mode = TaskMode::Continual;
  for (ClassId c = 2; c < 4; ++c) {
    SessionTask t;
    t.new_classes = {c};
    t.shot_scenes.push_back(make_scene(100 + c, rng));
    seq.sessions.push_back(t);
  }
  save_sequence(dir / "tasks.jsonl", seq);
  const TaskSequence seq_back = load_sequence(dir / "tasks.jsonl");
  CHECK(seq_back.mode == TaskMode::Continual);
  REQUIRE(seq_back.sessions.size() == 2);
  CHECK(seq_back.sessions[1].new_classes[0] == 3);
  CHECK(sequence_to_text(seq_back) == sequence_to_text(seq));
  std::filesystem::remove_all(dir);
}

TEST_CASE("malformed records are rejected") {
  CHECK_THROWS(scene_from_line("{\"type\":\"other\"}"));
  CHECK_THROWS(split_from_text(""));
  CHECK_THROWS(split_from_text("{\"type\":\"split_header\",\"visible_classes\":[],"
                               "\"scene_count\":2}\n"));
  CHECK_THROWS(sequence_from_text("not json"));
}
