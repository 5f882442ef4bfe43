#pragma once

#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "poselift/common.hpp"

namespace poselift {

// Rooted kinematic tree. Edge i is identified with the i-th non-root joint in
// joint-index order: edge = (parent[child], child).
struct SkeletonTopology {
  std::vector<std::string> joint_names;
  std::vector<int> parent;  // -1 marks the root
  int root = -1;

  int num_joints() const { return static_cast<int>(joint_names.size()); }
  int num_edges() const { return num_joints() - 1; }

  // Canonical edge ordering: children sorted by joint index.
  std::vector<int> edge_children() const {
    std::vector<int> children;
    for (int j = 0; j < num_joints(); ++j)
      if (j != root) children.push_back(j);
    return children;
  }

  // Edge index for a non-root joint, -1 for the root.
  int edge_of_joint(int joint) const {
    if (joint == root) return -1;
    int e = 0;
    for (int j = 0; j < joint; ++j)
      if (j != root) ++e;
    return e;
  }

  int index_of(const std::string& name) const {
    for (int j = 0; j < num_joints(); ++j)
      if (joint_names[static_cast<size_t>(j)] == name) return j;
    throw data_error("topology: no joint named '" + name + "'");
  }

  void validate() const {
    int n = num_joints();
    if (n < 2) throw data_error("topology: need at least 2 joints");
    if (static_cast<int>(parent.size()) != n)
      throw data_error("topology: parents length " +
                       std::to_string(parent.size()) + " != joints length " +
                       std::to_string(n));
    int roots = 0;
    for (int j = 0; j < n; ++j) {
      int p = parent[static_cast<size_t>(j)];
      if (p == -1) {
        ++roots;
        if (j != root)
          throw data_error("topology: root mismatch at joint '" +
                           joint_names[static_cast<size_t>(j)] + "'");
      } else if (p < 0 || p >= n) {
        throw data_error("topology: joint '" + joint_names[static_cast<size_t>(j)] +
                         "' has out-of-range parent " + std::to_string(p));
      } else if (p == j) {
        throw data_error("topology: joint '" + joint_names[static_cast<size_t>(j)] +
                         "' is its own parent");
      }
    }
    if (roots != 1)
      throw data_error("topology: expected exactly one root, found " +
                       std::to_string(roots));
    // Every joint must reach the root without revisiting (acyclic, no orphans).
    for (int j = 0; j < n; ++j) {
      int steps = 0;
      int cur = j;
      while (cur != root) {
        cur = parent[static_cast<size_t>(cur)];
        if (++steps > n)
          throw data_error("topology: cycle detected at joint '" +
                           joint_names[static_cast<size_t>(j)] + "'");
      }
    }
  }

  static SkeletonTopology from_json(const nlohmann::json& j) {
    SkeletonTopology topo;
    if (!j.contains("joints") || !j.contains("parents"))
      throw data_error("topology: JSON needs 'joints' and 'parents'");
    topo.joint_names = j.at("joints").get<std::vector<std::string>>();
    topo.parent = j.at("parents").get<std::vector<int>>();
    for (size_t i = 0; i < topo.parent.size(); ++i)
      if (topo.parent[i] == -1) topo.root = static_cast<int>(i);
    topo.validate();
    return topo;
  }

  nlohmann::json to_json() const {
    return nlohmann::json{{"version", 1}, {"joints", joint_names}, {"parents", parent}};
  }

  static SkeletonTopology load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw data_error("topology: cannot open " + path);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw data_error("topology: bad JSON in " + path + ": " + e.what());
    }
    return from_json(j);
  }
};

// 17-joint skeleton in Human3.6M convention: pelvis-rooted, right leg,
// left leg, spine-head chain, then left and right arms off the thorax.
// Frozen here and mirrored in data/h36m_topology.json.
inline const char* default_topology_json() {
  return R"({
  "version": 1,
  "joints": ["Pelvis", "RHip", "RKnee", "RAnkle", "LHip", "LKnee", "LAnkle",
             "Spine", "Thorax", "Neck", "Head",
             "LShoulder", "LElbow", "LWrist",
             "RShoulder", "RElbow", "RWrist"],
  "parents": [-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15]
})";
}

inline SkeletonTopology default_topology() {
  return SkeletonTopology::from_json(nlohmann::json::parse(default_topology_json()));
}

}  // namespace poselift
