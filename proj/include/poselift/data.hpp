#pragma once

#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "poselift/common.hpp"
#include "poselift/objectives.hpp"
#include "poselift/rng.hpp"
#include "poselift/rotation.hpp"
#include "poselift/topology.hpp"

namespace poselift {

// Canonical skeleton configuration for all-identity bone rotations: bone
// lengths in millimeters plus unit directions, in canonical edge order.
struct RestPose {
  std::vector<std::string> bone_names;  // child joint names, edge order
  std::vector<Vec3> directions;
  std::vector<double> lengths_mm;

  int num_bones() const { return static_cast<int>(lengths_mm.size()); }

  double mean_bone_length() const {
    double total = 0.0;
    for (double l : lengths_mm) total += l;
    return total / static_cast<double>(lengths_mm.size());
  }

  // Unit bone vector: rest direction scaled to unit length (directions are
  // stored normalized already; re-normalize defensively on load).
  Vec3 unit_bone(int e) const { return directions[static_cast<size_t>(e)]; }

  void validate(const SkeletonTopology& topo) const {
    if (num_bones() != topo.num_edges() ||
        static_cast<int>(directions.size()) != topo.num_edges() ||
        static_cast<int>(bone_names.size()) != topo.num_edges())
      throw data_error("rest pose: expected " + std::to_string(topo.num_edges()) +
                       " bones");
    std::vector<int> children = topo.edge_children();
    for (int e = 0; e < topo.num_edges(); ++e) {
      if (bone_names[static_cast<size_t>(e)] !=
          topo.joint_names[static_cast<size_t>(children[static_cast<size_t>(e)])])
        throw data_error("rest pose: bone " + std::to_string(e) + " is '" +
                         bone_names[static_cast<size_t>(e)] +
                         "' but topology expects '" +
                         topo.joint_names[static_cast<size_t>(
                             children[static_cast<size_t>(e)])] +
                         "'");
      if (lengths_mm[static_cast<size_t>(e)] <= 0.0)
        throw data_error("rest pose: non-positive length for bone '" +
                         bone_names[static_cast<size_t>(e)] + "'");
      const Vec3& d = directions[static_cast<size_t>(e)];
      if (std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) < 1e-9)
        throw data_error("rest pose: zero direction for bone '" +
                         bone_names[static_cast<size_t>(e)] + "'");
    }
  }

  static RestPose from_json(const nlohmann::json& j) {
    RestPose rp;
    rp.bone_names = j.at("bones").get<std::vector<std::string>>();
    rp.lengths_mm = j.at("lengths_mm").get<std::vector<double>>();
    for (const auto& d : j.at("directions")) {
      Vec3 v{d.at(0).get<double>(), d.at(1).get<double>(), d.at(2).get<double>()};
      double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
      if (n > 0) {
        v[0] /= n;
        v[1] /= n;
        v[2] /= n;
      }
      rp.directions.push_back(v);
    }
    return rp;
  }

  nlohmann::json to_json() const {
    nlohmann::json dirs = nlohmann::json::array();
    for (const Vec3& d : directions) dirs.push_back({d[0], d[1], d[2]});
    return nlohmann::json{{"version", 1},
                          {"bones", bone_names},
                          {"directions", dirs},
                          {"lengths_mm", lengths_mm}};
  }

  static RestPose load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw data_error("rest pose: cannot open " + path);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw data_error("rest pose: bad JSON in " + path + ": " + e.what());
    }
    return from_json(j);
  }
};

// T-pose-like canonical skeleton, axes in camera convention (x right, y down,
// z toward the scene). Mirrored in data/rest_pose.json.
inline const char* default_rest_pose_json() {
  return R"({
  "version": 1,
  "bones": ["RHip", "RKnee", "RAnkle", "LHip", "LKnee", "LAnkle",
            "Spine", "Thorax", "Neck", "Head",
            "LShoulder", "LElbow", "LWrist",
            "RShoulder", "RElbow", "RWrist"],
  "directions": [[-1,0,0],[0,1,0],[0,1,0],[1,0,0],[0,1,0],[0,1,0],
                 [0,-1,0],[0,-1,0],[0,-1,0],[0,-1,0],
                 [1,0,0],[1,0,0],[1,0,0],
                 [-1,0,0],[-1,0,0],[-1,0,0]],
  "lengths_mm": [130, 450, 450, 130, 450, 450,
                 230, 230, 120, 115,
                 150, 280, 250,
                 150, 280, 250]
})";
}

inline RestPose default_rest_pose() {
  return RestPose::from_json(nlohmann::json::parse(default_rest_pose_json()));
}

// Pinhole camera; the pelvis is placed pelvis_distance_mm in front of it.
struct CameraModel {
  double f = 1000.0;
  Vec2 c{500.0, 500.0};
  double pelvis_distance_mm = 5000.0;
  double image_width = 1000.0;
  double image_height = 1000.0;
};

// One training record. joints3d are root-relative camera-space millimeters;
// rotations are the 16 parent-relative bone rotations.
struct PoseSample {
  std::string id;
  std::vector<Vec2> joints2d;  // pixels
  double image_width = 0.0;
  double image_height = 0.0;
  Joints3d joints3d;
  BoneRotations rotations;
  double camera_f = 0.0;
  Vec2 camera_c{0.0, 0.0};
};

// ---------------------------------------------------------------------------
// Forward kinematics and projection.
// ---------------------------------------------------------------------------

// Root at the origin; child = parent + (global rotation accumulated along the
// chain) · (rest direction × length).
inline Joints3d fk(const BoneRotations& rotations, const RestPose& rest,
                   const SkeletonTopology& topo) {
  int ne = topo.num_edges();
  if (static_cast<int>(rotations.size()) != ne)
    throw shape_error("fk: expected " + std::to_string(ne) + " rotations, got " +
                      std::to_string(rotations.size()));
  rest.validate(topo);
  std::vector<int> children = topo.edge_children();
  Joints3d joints(static_cast<size_t>(topo.num_joints()), Vec3{0, 0, 0});
  std::vector<RotMat3> global(static_cast<size_t>(ne));
  std::vector<bool> done(static_cast<size_t>(ne), false);

  // Process bones parent-first; a bone is ready once its parent bone (if any)
  // is done. Each sweep resolves at least one bone of a valid tree.
  for (int resolved = 0; resolved < ne;) {
    for (int e = 0; e < ne; ++e) {
      if (done[static_cast<size_t>(e)]) continue;
      int child = children[static_cast<size_t>(e)];
      int parent_joint = topo.parent[static_cast<size_t>(child)];
      int parent_edge = parent_joint == topo.root ? -1 : topo.edge_of_joint(parent_joint);
      if (parent_edge >= 0 && !done[static_cast<size_t>(parent_edge)]) continue;
      RotMat3 g = parent_edge >= 0
                      ? rot::multiply(global[static_cast<size_t>(parent_edge)],
                                      rotations[static_cast<size_t>(e)])
                      : rotations[static_cast<size_t>(e)];
      global[static_cast<size_t>(e)] = g;
      Vec3 bone = rot::apply(g, Vec3{rest.directions[static_cast<size_t>(e)][0] *
                                         rest.lengths_mm[static_cast<size_t>(e)],
                                     rest.directions[static_cast<size_t>(e)][1] *
                                         rest.lengths_mm[static_cast<size_t>(e)],
                                     rest.directions[static_cast<size_t>(e)][2] *
                                         rest.lengths_mm[static_cast<size_t>(e)]});
      const Vec3& pp = joints[static_cast<size_t>(parent_joint)];
      joints[static_cast<size_t>(child)] = {pp[0] + bone[0], pp[1] + bone[1],
                                            pp[2] + bone[2]};
      done[static_cast<size_t>(e)] = true;
      ++resolved;
    }
  }
  return joints;
}

// x_img = f·X/Z + c, pelvis placed pelvis_distance_mm down the optical axis.
inline std::vector<Vec2> project(const Joints3d& joints3d, const CameraModel& cam) {
  std::vector<Vec2> out;
  out.reserve(joints3d.size());
  for (size_t i = 0; i < joints3d.size(); ++i) {
    double z = joints3d[i][2] + cam.pelvis_distance_mm;
    if (z <= 0.0)
      throw numeric_error("project: non-positive depth at joint " +
                          std::to_string(i));
    out.push_back({cam.f * joints3d[i][0] / z + cam.c[0],
                   cam.f * joints3d[i][1] / z + cam.c[1]});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Input normalization and edge features.
// ---------------------------------------------------------------------------

// x' = 2x/w − 1; y is scaled by the same 2/w factor so aspect is preserved.
inline std::vector<Vec2> normalize_2d(const std::vector<Vec2>& joints2d,
                                      double image_width, double image_height) {
  (void)image_height;
  if (image_width <= 0.0) throw data_error("normalize_2d: non-positive width");
  std::vector<Vec2> out;
  out.reserve(joints2d.size());
  for (const Vec2& p : joints2d)
    out.push_back({2.0 * p[0] / image_width - 1.0, 2.0 * p[1] / image_width - 1.0});
  return out;
}

inline Joints3d root_relative(const Joints3d& joints3d, int root = 0) {
  Joints3d out = joints3d;
  Vec3 r = joints3d[static_cast<size_t>(root)];
  for (Vec3& p : out) {
    p[0] -= r[0];
    p[1] -= r[1];
    p[2] -= r[2];
  }
  return out;
}

// Per-bone parent-relative 2D rotation, flattened row-major to 4 features.
// Root-adjacent bones use the image +Y axis as pseudo-parent direction.
inline std::vector<std::array<double, 4>> edge_features(
    const std::vector<Vec2>& joints2d_norm, const SkeletonTopology& topo) {
  if (static_cast<int>(joints2d_norm.size()) != topo.num_joints())
    throw shape_error("edge_features: expected " +
                      std::to_string(topo.num_joints()) + " joints");
  std::vector<std::array<double, 4>> out;
  out.reserve(static_cast<size_t>(topo.num_edges()));
  for (int child : topo.edge_children()) {
    int parent = topo.parent[static_cast<size_t>(child)];
    Vec2 child_dir{joints2d_norm[static_cast<size_t>(child)][0] -
                       joints2d_norm[static_cast<size_t>(parent)][0],
                   joints2d_norm[static_cast<size_t>(child)][1] -
                       joints2d_norm[static_cast<size_t>(parent)][1]};
    Vec2 parent_dir{0.0, 1.0};
    if (parent != topo.root) {
      int gp = topo.parent[static_cast<size_t>(parent)];
      parent_dir = {joints2d_norm[static_cast<size_t>(parent)][0] -
                        joints2d_norm[static_cast<size_t>(gp)][0],
                    joints2d_norm[static_cast<size_t>(parent)][1] -
                        joints2d_norm[static_cast<size_t>(gp)][1]};
    }
    RotMat2 r = rot::bone_rot2d(parent_dir, child_dir);
    out.push_back({r[0], r[1], r[2], r[3]});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic generation.
// ---------------------------------------------------------------------------

struct EulerLimits {
  std::array<double, 2> z{-30, 30};
  std::array<double, 2> x{-30, 30};
  std::array<double, 2> y{-30, 30};
};

using AngleLimits = std::map<std::string, EulerLimits>;

// Anatomically plausible per-joint boxes (degrees). These keep synthetic
// data learnable; they are not a biomechanical model.
inline AngleLimits default_angle_limits() {
  AngleLimits lim;
  EulerLimits hips{{-45, 45}, {-45, 45}, {-30, 30}};
  EulerLimits knees{{-10, 10}, {0, 120}, {-10, 10}};
  EulerLimits ankles{{-20, 20}, {-20, 20}, {-20, 20}};
  EulerLimits torso{{-30, 30}, {-30, 30}, {-30, 30}};
  EulerLimits neck{{-30, 30}, {-30, 30}, {-30, 30}};
  EulerLimits head{{-20, 20}, {-20, 20}, {-20, 20}};
  EulerLimits shoulders{{-60, 60}, {-60, 60}, {-45, 45}};
  EulerLimits elbows{{-70, 70}, {-20, 20}, {-70, 70}};
  EulerLimits wrists{{-25, 25}, {-25, 25}, {-25, 25}};
  lim["RHip"] = hips;
  lim["LHip"] = hips;
  lim["RKnee"] = knees;
  lim["LKnee"] = knees;
  lim["RAnkle"] = ankles;
  lim["LAnkle"] = ankles;
  lim["Spine"] = torso;
  lim["Thorax"] = torso;
  lim["Neck"] = neck;
  lim["Head"] = head;
  lim["RShoulder"] = shoulders;
  lim["LShoulder"] = shoulders;
  lim["RElbow"] = elbows;
  lim["LElbow"] = elbows;
  lim["RWrist"] = wrists;
  lim["LWrist"] = wrists;
  return lim;
}

// Samples per-bone Euler ZXY within per-joint limits, runs fk + project, and
// stores the ground-truth rotations. Deterministic given the rng state.
inline std::vector<PoseSample> synth_generate(
    int n, SplitMix64& rng, const AngleLimits& limits, const RestPose& rest,
    const SkeletonTopology& topo, const CameraModel& cam = CameraModel{}) {
  std::vector<PoseSample> samples;
  samples.reserve(static_cast<size_t>(n));
  std::vector<int> children = topo.edge_children();
  EulerLimits fallback;
  for (int i = 0; i < n; ++i) {
    PoseSample s;
    char idbuf[32];
    std::snprintf(idbuf, sizeof(idbuf), "synth-%06d", i);
    s.id = idbuf;
    s.rotations.reserve(children.size());
    for (int child : children) {
      const std::string& name = topo.joint_names[static_cast<size_t>(child)];
      auto it = limits.find(name);
      const EulerLimits& el = it == limits.end() ? fallback : it->second;
      EulerZXY e{rng.uniform(el.z[0], el.z[1]), rng.uniform(el.x[0], el.x[1]),
                 rng.uniform(el.y[0], el.y[1])};
      s.rotations.push_back(rot::euler_zxy_to_mat(e));
    }
    s.joints3d = fk(s.rotations, rest, topo);
    s.joints2d = project(s.joints3d, cam);
    s.image_width = cam.image_width;
    s.image_height = cam.image_height;
    s.camera_f = cam.f;
    s.camera_c = cam.c;
    samples.push_back(std::move(s));
  }
  return samples;
}

// ---------------------------------------------------------------------------
// JSONL dataset IO.
// ---------------------------------------------------------------------------

inline nlohmann::json sample_to_json(const PoseSample& s) {
  nlohmann::json j2d = nlohmann::json::array();
  for (const Vec2& p : s.joints2d) j2d.push_back({p[0], p[1]});
  nlohmann::json j;
  j["id"] = s.id;
  j["joints2d"] = j2d;
  j["image_width"] = s.image_width;
  j["image_height"] = s.image_height;
  if (!s.joints3d.empty()) {
    nlohmann::json j3d = nlohmann::json::array();
    for (const Vec3& p : s.joints3d) j3d.push_back({p[0], p[1], p[2]});
    j["joints3d"] = j3d;
  }
  if (!s.rotations.empty()) {
    nlohmann::json rots = nlohmann::json::array();
    for (const RotMat3& r : s.rotations) {
      nlohmann::json m = nlohmann::json::array();
      for (int row = 0; row < 3; ++row)
        m.push_back({r(row, 0), r(row, 1), r(row, 2)});
      rots.push_back(m);
    }
    j["rotations"] = rots;
  }
  j["camera_f"] = s.camera_f;
  j["camera_c"] = {s.camera_c[0], s.camera_c[1]};
  return j;
}

inline void write_jsonl(const std::string& path,
                        const std::vector<PoseSample>& samples) {
  std::ofstream out(path);
  if (!out) throw data_error("write_jsonl: cannot open " + path);
  for (const PoseSample& s : samples) out << sample_to_json(s).dump() << "\n";
  if (!out) throw data_error("write_jsonl: write failed for " + path);
}

// Reads newline-delimited samples, validating invariants; failures carry the
// 1-based line number. With require_labels=false, joints3d/rotations may be
// absent (prediction inputs).
inline std::vector<PoseSample> read_jsonl(const std::string& path,
                                          const SkeletonTopology& topo,
                                          bool require_labels = true) {
  std::ifstream in(path);
  if (!in) throw data_error("read_jsonl: cannot open " + path);
  std::vector<PoseSample> samples;
  std::string line;
  int lineno = 0;
  auto fail = [&](const std::string& msg) -> data_error {
    return data_error("read_jsonl: " + path + " line " + std::to_string(lineno) +
                      ": " + msg);
  };
  auto check_finite = [&](double v, const char* field) {
    if (!std::isfinite(v)) throw fail(std::string("non-finite value in ") + field);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw fail(std::string("bad JSON: ") + e.what());
    }
    PoseSample s;
    try {
      s.id = j.at("id").get<std::string>();
      const auto& j2d = j.at("joints2d");
      if (static_cast<int>(j2d.size()) != topo.num_joints())
        throw fail("joints2d has " + std::to_string(j2d.size()) + " joints, need " +
                   std::to_string(topo.num_joints()));
      for (const auto& p : j2d) {
        Vec2 v{p.at(0).get<double>(), p.at(1).get<double>()};
        check_finite(v[0], "joints2d");
        check_finite(v[1], "joints2d");
        s.joints2d.push_back(v);
      }
      s.image_width = j.at("image_width").get<double>();
      s.image_height = j.at("image_height").get<double>();
      if (s.image_width <= 0 || s.image_height <= 0)
        throw fail("non-positive image size");
      if (j.contains("camera_f")) s.camera_f = j.at("camera_f").get<double>();
      if (j.contains("camera_c"))
        s.camera_c = {j.at("camera_c").at(0).get<double>(),
                      j.at("camera_c").at(1).get<double>()};

      bool has3d = j.contains("joints3d");
      bool hasrot = j.contains("rotations");
      if (require_labels && (!has3d || !hasrot))
        throw fail("missing joints3d/rotations");
      if (has3d) {
        const auto& j3d = j.at("joints3d");
        if (static_cast<int>(j3d.size()) != topo.num_joints())
          throw fail("joints3d has " + std::to_string(j3d.size()) +
                     " joints, need " + std::to_string(topo.num_joints()));
        for (const auto& p : j3d) {
          Vec3 v{p.at(0).get<double>(), p.at(1).get<double>(),
                 p.at(2).get<double>()};
          check_finite(v[0], "joints3d");
          check_finite(v[1], "joints3d");
          check_finite(v[2], "joints3d");
          s.joints3d.push_back(v);
        }
      }
      if (hasrot) {
        const auto& rots = j.at("rotations");
        if (static_cast<int>(rots.size()) != topo.num_edges())
          throw fail("rotations has " + std::to_string(rots.size()) +
                     " bones, need " + std::to_string(topo.num_edges()));
        int bone = 0;
        for (const auto& m : rots) {
          RotMat3 r;
          for (int row = 0; row < 3; ++row)
            for (int col = 0; col < 3; ++col) {
              r(row, col) = m.at(static_cast<size_t>(row))
                                .at(static_cast<size_t>(col))
                                .get<double>();
              check_finite(r(row, col), "rotations");
            }
          if (!rot::is_valid(r, 1e-9))
            throw fail("bone " + std::to_string(bone) +
                       " rotation is not orthonormal det-+1");
          s.rotations.push_back(r);
          ++bone;
        }
      }
    } catch (const data_error&) {
      throw;
    } catch (const nlohmann::json::exception& e) {
      throw fail(std::string("schema violation: ") + e.what());
    }
    samples.push_back(std::move(s));
  }
  return samples;
}

}  // namespace poselift
