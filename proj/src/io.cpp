#include "ifsd/io.hpp"

#include <json.hpp>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace ifsd {

namespace {

using nlohmann::json;

void append_real(std::string& out, double x) { out += format_g9(x); }

void append_box(std::string& out, const BoundingBox& b) {
  out += '[';
  append_real(out, b.x_min);
  out += ',';
  append_real(out, b.y_min);
  out += ',';
  append_real(out, b.x_max);
  out += ',';
  append_real(out, b.y_max);
  out += ']';
}

BoundingBox box_from_json(const json& j) {
  BoundingBox b;
  b.x_min = j.at(0).get<double>();
  b.y_min = j.at(1).get<double>();
  b.x_max = j.at(2).get<double>();
  b.y_max = j.at(3).get<double>();
  return b;
}

} // namespace

std::string format_g9(double x) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", x);
  return buf;
}

std::string format_g17(double x) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

double quantize9(double x) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", x);
  return std::strtod(buf, nullptr);
}

std::string scene_to_line(const Scene& scene) {
  std::string out;
  out.reserve(256 + 128 * scene.instances.size() + 64 * scene.proposals.size());
  out += "{\"type\":\"scene\",\"id\":";
  out += std::to_string(scene.scene_id);
  out += ",\"extent\":[";
  append_real(out, scene.extent_w);
  out += ',';
  append_real(out, scene.extent_h);
  out += "],\"instances\":[";
  for (std::size_t i = 0; i < scene.instances.size(); ++i) {
    const Instance& inst = scene.instances[i];
    if (i) out += ',';
    out += "{\"box\":";
    append_box(out, inst.box);
    out += ",\"class\":";
    out += std::to_string(inst.class_id);
    out += ",\"feature\":[";
    for (Eigen::Index k = 0; k < inst.latent_feature.size(); ++k) {
      if (k) out += ',';
      append_real(out, inst.latent_feature[k]);
    }
    out += "]}";
  }
  out += "],\"proposals\":[";
  for (std::size_t i = 0; i < scene.proposals.size(); ++i) {
    const Proposal& p = scene.proposals[i];
    if (i) out += ',';
    out += "{\"box\":";
    append_box(out, p.box);
    out += ",\"matched_gt\":";
    out += std::to_string(p.matched_gt);
    out += ",\"max_iou\":";
    append_real(out, p.max_iou);
    out += '}';
  }
  out += "]}";
  return out;
}

Scene scene_from_line(const std::string& line) {
  const json j = json::parse(line);
  if (j.at("type").get<std::string>() != "scene")
    throw std::runtime_error("expected a scene record");
  Scene scene;
  scene.scene_id = j.at("id").get<std::int64_t>();
  scene.extent_w = j.at("extent").at(0).get<double>();
  scene.extent_h = j.at("extent").at(1).get<double>();
  for (const auto& ji : j.at("instances")) {
    Instance inst;
    inst.box = box_from_json(ji.at("box"));
    inst.class_id = ji.at("class").get<ClassId>();
    const auto& jf = ji.at("feature");
    inst.latent_feature.resize(static_cast<Eigen::Index>(jf.size()));
    for (std::size_t k = 0; k < jf.size(); ++k)
      inst.latent_feature[static_cast<Eigen::Index>(k)] = jf.at(k).get<double>();
    scene.instances.push_back(std::move(inst));
  }
  for (const auto& jp : j.at("proposals")) {
    Proposal p;
    p.box = box_from_json(jp.at("box"));
    p.matched_gt = jp.at("matched_gt").get<int>();
    p.max_iou = jp.at("max_iou").get<double>();
    scene.proposals.push_back(p);
  }
  return scene;
}

std::string split_to_text(const DatasetSplit& split) {
  std::string out = "{\"type\":\"split_header\",\"visible_classes\":[";
  bool first = true;
  for (ClassId c : split.visible_classes) {
    if (!first) out += ',';
    first = false;
    out += std::to_string(c);
  }
  out += "],\"scene_count\":";
  out += std::to_string(split.scenes.size());
  out += "}\n";
  for (const Scene& s : split.scenes) {
    out += scene_to_line(s);
    out += '\n';
  }
  return out;
}

DatasetSplit split_from_text(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("empty split file");
  const json header = json::parse(line);
  if (header.at("type").get<std::string>() != "split_header")
    throw std::runtime_error("expected a split header");
  DatasetSplit split;
  for (const auto& c : header.at("visible_classes"))
    split.visible_classes.insert(c.get<ClassId>());
  const auto count = header.at("scene_count").get<std::size_t>();
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    split.scenes.push_back(scene_from_line(line));
  }
  if (split.scenes.size() != count)
    throw std::runtime_error("split scene count mismatch");
  return split;
}

std::string sequence_to_text(const TaskSequence& seq) {
  std::string out = "{\"type\":\"task_header\",\"mode\":\"";
  out += (seq.mode == TaskMode::Typical) ? "typical" : "continual";
  out += "\",\"session_count\":";
  out += std::to_string(seq.sessions.size());
  out += "}\n";
  for (const SessionTask& s : seq.sessions) {
    out += "{\"type\":\"session\",\"new_classes\":[";
    for (std::size_t i = 0; i < s.new_classes.size(); ++i) {
      if (i) out += ',';
      out += std::to_string(s.new_classes[i]);
    }
    out += "],\"scene_count\":";
    out += std::to_string(s.shot_scenes.size());
    out += "}\n";
    for (const Scene& scene : s.shot_scenes) {
      out += scene_to_line(scene);
      out += '\n';
    }
  }
  return out;
}

TaskSequence sequence_from_text(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("empty task file");
  const json header = json::parse(line);
  if (header.at("type").get<std::string>() != "task_header")
    throw std::runtime_error("expected a task header");
  TaskSequence seq;
  seq.mode = header.at("mode").get<std::string>() == "typical" ? TaskMode::Typical
                                                               : TaskMode::Continual;
  const auto session_count = header.at("session_count").get<std::size_t>();
  for (std::size_t s = 0; s < session_count; ++s) {
    if (!std::getline(in, line)) throw std::runtime_error("truncated task file");
    const json js = json::parse(line);
    if (js.at("type").get<std::string>() != "session")
      throw std::runtime_error("expected a session record");
    SessionTask task;
    for (const auto& c : js.at("new_classes")) task.new_classes.push_back(c.get<ClassId>());
    const auto scene_count = js.at("scene_count").get<std::size_t>();
    for (std::size_t k = 0; k < scene_count; ++k) {
      if (!std::getline(in, line)) throw std::runtime_error("truncated task file");
      task.shot_scenes.push_back(scene_from_line(line));
    }
    seq.sessions.push_back(std::move(task));
  }
  return seq;
}

void write_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open for reading: " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void save_split(const std::filesystem::path& path, const DatasetSplit& split) {
  write_file(path, split_to_text(split));
}

DatasetSplit load_split(const std::filesystem::path& path) {
  return split_from_text(read_file(path));
}

void save_sequence(const std::filesystem::path& path, const TaskSequence& seq) {
  write_file(path, sequence_to_text(seq));
}

TaskSequence load_sequence(const std::filesystem::path& path) {
  return sequence_from_text(read_file(path));
}

} // namespace ifsd
