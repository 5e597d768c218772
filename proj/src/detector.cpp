#include "ifsd/detector.hpp"

#include "ifsd/rng.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace ifsd {

namespace {

constexpr char kCheckpointMagic[8] = {'I', 'F', 'S', 'D', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;

struct ForwardCache {
  Eigen::VectorXd region;   // r
  Eigen::VectorXd agnostic; // a = tanh(Wa r)
  Eigen::VectorXd hidden;   // h = tanh(W1 a + b1)
  Eigen::VectorXd feature;  // f = tanh(W2 h + b2)
};

ForwardCache run_forward(const DetectorState& s, const Scene& scene, const BoundingBox& box) {
  ForwardCache c;
  c.region = region_feature(scene, box, s.dims.d_world);
  c.agnostic = (s.agnostic_w * c.region).array().tanh();
  c.hidden = (s.cse_w1 * c.agnostic + s.cse_b1).array().tanh();
  // Linear output layer: object features keep enough magnitude for the
  // heads to train within the short transfer schedules.
  c.feature = s.cse_w2 * c.hidden + s.cse_b2;
  return c;
}

void append_u32(std::string& out, std::uint32_t v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof(v));
}

void append_i32(std::string& out, std::int32_t v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint32_t read_u32(const std::string& in, std::size_t& off) {
  std::uint32_t v;
  if (off + sizeof(v) > in.size()) throw std::runtime_error("truncated checkpoint");
  std::memcpy(&v, in.data() + off, sizeof(v));
  off += sizeof(v);
  return v;
}

std::int32_t read_i32(const std::string& in, std::size_t& off) {
  std::int32_t v;
  if (off + sizeof(v) > in.size()) throw std::runtime_error("truncated checkpoint");
  std::memcpy(&v, in.data() + off, sizeof(v));
  off += sizeof(v);
  return v;
}

} // namespace

int DetectorState::logit_index(ClassId c) const {
  for (std::size_t i = 0; i < registered_classes.size(); ++i)
    if (registered_classes[i] == c) return static_cast<int>(i) + 1;
  throw std::invalid_argument("class " + std::to_string(c) + " is not registered");
}

void DetectorGrads::set_zero() {
  visit_params(*this, [](const char*, ParamGroup, bool, auto& p) { p.setZero(); });
}

void DetectorGrads::zero_group(ParamGroup g) {
  visit_params(*this, [g](const char*, ParamGroup pg, bool, auto& p) {
    if (pg == g) p.setZero();
  });
}

DetectorGrads make_grads_like(const DetectorState& state) {
  DetectorGrads g;
  g.agnostic_w = Eigen::MatrixXd::Zero(state.agnostic_w.rows(), state.agnostic_w.cols());
  g.cse_w1 = Eigen::MatrixXd::Zero(state.cse_w1.rows(), state.cse_w1.cols());
  g.cse_b1 = Eigen::VectorXd::Zero(state.cse_b1.size());
  g.cse_w2 = Eigen::MatrixXd::Zero(state.cse_w2.rows(), state.cse_w2.cols());
  g.cse_b2 = Eigen::VectorXd::Zero(state.cse_b2.size());
  g.obj_w = Eigen::MatrixXd::Zero(state.obj_w.rows(), state.obj_w.cols());
  g.obj_b = Eigen::VectorXd::Zero(state.obj_b.size());
  g.cls_w = Eigen::MatrixXd::Zero(state.cls_w.rows(), state.cls_w.cols());
  g.cls_b = Eigen::VectorXd::Zero(state.cls_b.size());
  g.box_w = Eigen::MatrixXd::Zero(state.box_w.rows(), state.box_w.cols());
  g.box_b = Eigen::VectorXd::Zero(state.box_b.size());
  return g;
}

std::vector<ParamGroup> trainable_groups(TransferStrategy strategy) {
  switch (strategy) {
    case TransferStrategy::FixAll:
      return {ParamGroup::ClassifierHead, ParamGroup::BoxRegHead};
    case TransferStrategy::FitAll:
      return {ParamGroup::Agnostic, ParamGroup::Cse, ParamGroup::ObjectnessHead,
              ParamGroup::ClassifierHead, ParamGroup::BoxRegHead};
    case TransferStrategy::FitCse:
      return {ParamGroup::Cse, ParamGroup::ObjectnessHead, ParamGroup::ClassifierHead,
              ParamGroup::BoxRegHead};
  }
  return {};
}

bool group_trainable(TransferStrategy strategy, ParamGroup g) {
  const auto groups = trainable_groups(strategy);
  return std::find(groups.begin(), groups.end(), g) != groups.end();
}

DetectorState init_detector(const DetectorConfig& dims, const std::vector<ClassId>& base_classes,
                            std::uint64_t seed) {
  DetectorState s;
  s.dims = dims;
  s.registered_classes = base_classes;
  Rng rng = substream(seed, "init");
  auto gaussian = [&rng](Eigen::Index rows, Eigen::Index cols, double std_scale) {
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = std_scale * rng.normal();
    return m;
  };
  const int num_rows = static_cast<int>(base_classes.size()) + 1;
  s.agnostic_w = gaussian(dims.d_feat, dims.d_world, 1.0 / std::sqrt(double(dims.d_world)));
  s.cse_w1 = gaussian(dims.d_hidden, dims.d_feat, 1.0 / std::sqrt(double(dims.d_feat)));
  s.cse_b1 = Eigen::VectorXd::Zero(dims.d_hidden);
  // Gain 4 on the linear output layer; see run_forward.
  s.cse_w2 = gaussian(dims.d_obj, dims.d_hidden, 4.0 / std::sqrt(double(dims.d_hidden)));
  s.cse_b2 = Eigen::VectorXd::Zero(dims.d_obj);
  s.obj_w = gaussian(1, dims.d_obj, 1.0 / std::sqrt(double(dims.d_obj)));
  s.obj_b = Eigen::VectorXd::Zero(1);
  s.cls_w = gaussian(num_rows, dims.d_obj, 1.0 / std::sqrt(double(dims.d_obj)));
  s.cls_b = Eigen::VectorXd::Zero(num_rows);
  // Near-zero box regressor: initial detections stay at their proposals.
  s.box_w = gaussian(4, dims.d_obj, 0.01);
  s.box_b = Eigen::VectorXd::Zero(4);
  return s;
}

Eigen::VectorXd region_feature(const Scene& scene, const BoundingBox& box, int d_world) {
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(d_world);
  double weight_sum = 0.0;
  for (const Instance& inst : scene.instances) {
    const double w = iou(box, inst.box);
    if (w > 0.0) {
      acc += w * inst.latent_feature;
      weight_sum += w;
    }
  }
  // The uncovered remainder of the box contributes the zero background
  // feature, so poorly aligned boxes yield proportionally weaker features.
  if (weight_sum > 0.0) acc /= std::max(1.0, weight_sum);
  return acc;
}

RegionOutput forward_region(const DetectorState& state, const Scene& scene,
                            const BoundingBox& box) {
  const ForwardCache c = run_forward(state, scene, box);
  RegionOutput out;
  out.logits = state.cls_w * c.feature + state.cls_b;
  out.objectness = (state.obj_w * c.feature)(0) + state.obj_b(0);
  out.box_deltas = state.box_w * c.feature + state.box_b;
  out.obj_feature = c.feature;
  return out;
}

void backward_region(const DetectorState& state, const Scene& scene, const BoundingBox& box,
                     const RegionUpstream& upstream, DetectorGrads& grads,
                     TransferStrategy strategy) {
  const ForwardCache c = run_forward(state, scene, box);
  const Eigen::VectorXd& gz = upstream.d_logits;
  const double go = upstream.d_objectness;
  const Eigen::Vector4d& gd = upstream.d_box_deltas;

  if (group_trainable(strategy, ParamGroup::ClassifierHead)) {
    grads.cls_w.noalias() += gz * c.feature.transpose();
    grads.cls_b += gz;
  }
  if (group_trainable(strategy, ParamGroup::ObjectnessHead)) {
    grads.obj_w.noalias() += go * c.feature.transpose();
    grads.obj_b(0) += go;
  }
  if (group_trainable(strategy, ParamGroup::BoxRegHead)) {
    grads.box_w.noalias() += gd * c.feature.transpose();
    grads.box_b += gd;
  }

  if (!group_trainable(strategy, ParamGroup::Cse) &&
      !group_trainable(strategy, ParamGroup::Agnostic))
    return;

  Eigen::VectorXd gf = state.cls_w.transpose() * gz;
  gf.noalias() += state.obj_w.transpose() * go;
  gf.noalias() += state.box_w.transpose() * gd;
  const Eigen::VectorXd& gf_pre = gf; // output layer is linear

  const Eigen::VectorXd gh = state.cse_w2.transpose() * gf_pre;
  const Eigen::VectorXd gh_pre = gh.array() * (1.0 - c.hidden.array() * c.hidden.array());

  if (group_trainable(strategy, ParamGroup::Cse)) {
    grads.cse_w2.noalias() += gf_pre * c.hidden.transpose();
    grads.cse_b2 += gf_pre;
    grads.cse_w1.noalias() += gh_pre * c.agnostic.transpose();
    grads.cse_b1 += gh_pre;
  }

  if (group_trainable(strategy, ParamGroup::Agnostic)) {
    const Eigen::VectorXd ga = state.cse_w1.transpose() * gh_pre;
    const Eigen::VectorXd ga_pre =
        ga.array() * (1.0 - c.agnostic.array() * c.agnostic.array());
    grads.agnostic_w.noalias() += ga_pre * c.region.transpose();
  }
}

void register_classes(DetectorState& state, const std::vector<ClassId>& new_classes,
                      std::uint64_t seed) {
  for (ClassId c : new_classes) {
    for (ClassId existing : state.registered_classes)
      if (existing == c)
        throw std::invalid_argument("class " + std::to_string(c) + " already registered");
  }
  const int old_rows = state.num_logits();
  const int added = static_cast<int>(new_classes.size());
  Eigen::MatrixXd new_w(old_rows + added, state.dims.d_obj);
  Eigen::VectorXd new_b(old_rows + added);
  new_w.topRows(old_rows) = state.cls_w;
  new_b.head(old_rows) = state.cls_b;
  for (int i = 0; i < added; ++i) {
    // Seeded per class id so continual and one-shot registration agree.
    Rng rng = substream(seed, "register", static_cast<std::uint64_t>(new_classes[i]));
    for (int k = 0; k < state.dims.d_obj; ++k) new_w(old_rows + i, k) = 0.01 * rng.normal();
    new_b(old_rows + i) = 0.0;
  }
  state.cls_w = std::move(new_w);
  state.cls_b = std::move(new_b);
  state.registered_classes.insert(state.registered_classes.end(), new_classes.begin(),
                                  new_classes.end());
}

std::string checkpoint_bytes(const DetectorState& state) {
  std::string out;
  out.append(kCheckpointMagic, sizeof(kCheckpointMagic));
  append_u32(out, kCheckpointVersion);
  append_i32(out, state.dims.d_world);
  append_i32(out, state.dims.d_feat);
  append_i32(out, state.dims.d_hidden);
  append_i32(out, state.dims.d_obj);
  append_u32(out, static_cast<std::uint32_t>(state.registered_classes.size()));
  for (ClassId c : state.registered_classes) append_i32(out, c);
  visit_params(const_cast<DetectorState&>(state),
               [&out](const char*, ParamGroup, bool, const auto& p) {
                 append_u32(out, static_cast<std::uint32_t>(p.rows()));
                 append_u32(out, static_cast<std::uint32_t>(p.cols()));
                 out.append(reinterpret_cast<const char*>(p.data()),
                            sizeof(double) * static_cast<std::size_t>(p.size()));
               });
  return out;
}

DetectorState checkpoint_from_bytes(const std::string& bytes) {
  std::size_t off = 0;
  if (bytes.size() < sizeof(kCheckpointMagic) ||
      std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0)
    throw std::runtime_error("bad checkpoint magic");
  off += sizeof(kCheckpointMagic);
  if (read_u32(bytes, off) != kCheckpointVersion)
    throw std::runtime_error("unsupported checkpoint version");
  DetectorState s;
  s.dims.d_world = read_i32(bytes, off);
  s.dims.d_feat = read_i32(bytes, off);
  s.dims.d_hidden = read_i32(bytes, off);
  s.dims.d_obj = read_i32(bytes, off);
  const std::uint32_t num_classes = read_u32(bytes, off);
  s.registered_classes.resize(num_classes);
  for (std::uint32_t i = 0; i < num_classes; ++i) s.registered_classes[i] = read_i32(bytes, off);
  visit_params(s, [&bytes, &off](const char* name, ParamGroup, bool, auto& p) {
    const std::uint32_t rows = read_u32(bytes, off);
    const std::uint32_t cols = read_u32(bytes, off);
    p.resize(rows, cols);
    const std::size_t nbytes = sizeof(double) * static_cast<std::size_t>(p.size());
    if (off + nbytes > bytes.size())
      throw std::runtime_error(std::string("truncated checkpoint at ") + name);
    std::memcpy(p.data(), bytes.data() + off, nbytes);
    off += nbytes;
  });
  if (off != bytes.size()) throw std::runtime_error("trailing bytes in checkpoint");
  return s;
}

void save_checkpoint(const std::filesystem::path& path, const DetectorState& state) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  const std::string bytes = checkpoint_bytes(state);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

DetectorState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open for reading: " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return checkpoint_from_bytes(buf.str());
}

} // namespace ifsd
