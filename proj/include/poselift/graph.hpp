#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "poselift/common.hpp"
#include "poselift/tensor.hpp"
#include "poselift/topology.hpp"

namespace poselift {

inline const std::vector<std::string>& node_group_names() {
  static const std::vector<std::string> names{"self", "parent", "child"};
  return names;
}

inline const std::vector<std::string>& edge_group_names() {
  static const std::vector<std::string> names{"self", "parent", "child", "junction"};
  return names;
}

// Every matrix the propagation rules need, derived once from a topology.
// All tensors are plain constants (no gradient); safe for concurrent reads.
struct GraphMatrices {
  int num_joints = 0;
  int num_edges = 0;
  std::vector<int> edge_child;   // canonical order: children sorted by index
  std::vector<int> edge_parent_joint;
  std::vector<int> edge_parent;  // edge-tree parent, -1 for root-incident edges

  Tensor A_v;  // (N_v, N_v) binary node adjacency
  Tensor A_e;  // (N_e, N_e) binary edge adjacency
  Tensor T;    // (N_v, N_e) binary incidence

  std::map<std::string, Tensor> node_groups;  // masks partitioning A_v + I
  std::map<std::string, Tensor> edge_groups;  // masks partitioning A_e + I

  Tensor norm_A_v;  // D̂^{-1/2} Â D̂^{-1/2}
  Tensor norm_A_e;
  std::vector<Tensor> norm_node_groups;  // per-group, full-graph degrees
  std::vector<Tensor> norm_edge_groups;
};

// Symmetric degree normalization Ã = D̂^{-1/2} Â D̂^{-1/2}, Â = A + I when
// add_self_loops.
inline Tensor normalize_adjacency(const Tensor& A, bool add_self_loops) {
  if (A.rank() != 2 || A.size(0) != A.size(1))
    throw shape_error("normalize_adjacency: need square matrix, got " +
                      detail::shape_str(A.shape()));
  int64_t n = A.size(0);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < n; ++j) {
      double v = A.at({i, j});
      if (v != 0.0 && v != 1.0)
        throw numeric_error("normalize_adjacency: entries must be binary");
      if (v != A.at({j, i}))
        throw numeric_error("normalize_adjacency: matrix not symmetric");
    }
  Tensor ahat = Tensor::zeros({n, n});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < n; ++j)
      ahat.at_mut({i, j}) = A.at({i, j}) + (add_self_loops && i == j ? 1.0 : 0.0);
  std::vector<double> dinv(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    double deg = 0.0;
    for (int64_t j = 0; j < n; ++j) deg += ahat.at({i, j});
    if (deg <= 0.0)
      throw numeric_error("normalize_adjacency: zero-degree row " +
                          std::to_string(i) + " with self-loops disabled");
    dinv[static_cast<size_t>(i)] = 1.0 / std::sqrt(deg);
  }
  Tensor out = Tensor::zeros({n, n});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < n; ++j)
      out.at_mut({i, j}) = ahat.at({i, j}) * dinv[static_cast<size_t>(i)] *
                           dinv[static_cast<size_t>(j)];
  return out;
}

// Per-group normalization using the FULL graph degrees of Â, so the group
// matrices sum exactly to normalize_adjacency(A, true).
inline std::vector<Tensor> group_normalize(const Tensor& A,
                                           const std::vector<Tensor>& masks) {
  if (A.rank() != 2 || A.size(0) != A.size(1))
    throw shape_error("group_normalize: need square matrix");
  int64_t n = A.size(0);
  // Masks must partition Â = A + I exactly.
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < n; ++j) {
      double ahat = A.at({i, j}) + (i == j ? 1.0 : 0.0);
      double cover = 0.0;
      for (const Tensor& m : masks) {
        double v = m.at({i, j});
        if (v != 0.0 && v != 1.0)
          throw numeric_error("group_normalize: mask entries must be binary");
        cover += v;
      }
      if (cover != ahat)
        throw numeric_error("group_normalize: masks do not partition A+I at (" +
                            std::to_string(i) + "," + std::to_string(j) + ")");
    }
  std::vector<double> dinv(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    double deg = 1.0;  // self loop
    for (int64_t j = 0; j < n; ++j) deg += A.at({i, j});
    dinv[static_cast<size_t>(i)] = 1.0 / std::sqrt(deg);
  }
  std::vector<Tensor> out;
  out.reserve(masks.size());
  for (const Tensor& m : masks) {
    Tensor g = Tensor::zeros({n, n});
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < n; ++j) {
        double ahat = A.at({i, j}) + (i == j ? 1.0 : 0.0);
        g.at_mut({i, j}) = ahat * m.at({i, j}) * dinv[static_cast<size_t>(i)] *
                           dinv[static_cast<size_t>(j)];
      }
    out.push_back(std::move(g));
  }
  return out;
}

inline GraphMatrices build_matrices(const SkeletonTopology& topo) {
  topo.validate();
  GraphMatrices gm;
  int nv = topo.num_joints();
  int ne = topo.num_edges();
  gm.num_joints = nv;
  gm.num_edges = ne;
  gm.edge_child = topo.edge_children();
  gm.edge_parent_joint.resize(static_cast<size_t>(ne));
  for (int e = 0; e < ne; ++e)
    gm.edge_parent_joint[static_cast<size_t>(e)] =
        topo.parent[static_cast<size_t>(gm.edge_child[static_cast<size_t>(e)])];

  gm.A_v = Tensor::zeros({nv, nv});
  gm.T = Tensor::zeros({nv, ne});
  for (int e = 0; e < ne; ++e) {
    int c = gm.edge_child[static_cast<size_t>(e)];
    int p = gm.edge_parent_joint[static_cast<size_t>(e)];
    gm.A_v.at_mut({p, c}) = 1.0;
    gm.A_v.at_mut({c, p}) = 1.0;
    gm.T.at_mut({p, e}) = 1.0;
    gm.T.at_mut({c, e}) = 1.0;
  }

  // Node neighbor groups: self = I, parent(i,j)=1 iff j is i's tree parent,
  // child(i,j)=1 iff j is i's tree child.
  Tensor g_self = Tensor::zeros({nv, nv});
  Tensor g_parent = Tensor::zeros({nv, nv});
  Tensor g_child = Tensor::zeros({nv, nv});
  for (int j = 0; j < nv; ++j) {
    g_self.at_mut({j, j}) = 1.0;
    int p = topo.parent[static_cast<size_t>(j)];
    if (p >= 0) {
      g_parent.at_mut({j, p}) = 1.0;
      g_child.at_mut({p, j}) = 1.0;
    }
  }
  gm.node_groups["self"] = g_self;
  gm.node_groups["parent"] = g_parent;
  gm.node_groups["child"] = g_child;

  // Edge tree: edge e's parent is the edge whose child node equals e's
  // parent node; root-incident edges have none.
  gm.edge_parent.assign(static_cast<size_t>(ne), -1);
  for (int e = 0; e < ne; ++e) {
    int pj = gm.edge_parent_joint[static_cast<size_t>(e)];
    if (pj != topo.root)
      gm.edge_parent[static_cast<size_t>(e)] = topo.edge_of_joint(pj);
  }

  gm.A_e = Tensor::zeros({ne, ne});
  Tensor e_self = Tensor::zeros({ne, ne});
  Tensor e_parent = Tensor::zeros({ne, ne});
  Tensor e_child = Tensor::zeros({ne, ne});
  Tensor e_junction = Tensor::zeros({ne, ne});
  for (int e = 0; e < ne; ++e) e_self.at_mut({e, e}) = 1.0;
  auto shares_node = [&](int a, int b) {
    int ac = gm.edge_child[static_cast<size_t>(a)];
    int ap = gm.edge_parent_joint[static_cast<size_t>(a)];
    int bc = gm.edge_child[static_cast<size_t>(b)];
    int bp = gm.edge_parent_joint[static_cast<size_t>(b)];
    return ac == bc || ac == bp || ap == bc || ap == bp;
  };
  for (int a = 0; a < ne; ++a)
    for (int b = 0; b < ne; ++b) {
      if (a == b || !shares_node(a, b)) continue;
      gm.A_e.at_mut({a, b}) = 1.0;
      if (gm.edge_parent[static_cast<size_t>(a)] == b)
        e_parent.at_mut({a, b}) = 1.0;
      else if (gm.edge_parent[static_cast<size_t>(b)] == a)
        e_child.at_mut({a, b}) = 1.0;
      else
        e_junction.at_mut({a, b}) = 1.0;  // siblings at a branch point
    }
  gm.edge_groups["self"] = e_self;
  gm.edge_groups["parent"] = e_parent;
  gm.edge_groups["child"] = e_child;
  gm.edge_groups["junction"] = e_junction;

  gm.norm_A_v = normalize_adjacency(gm.A_v, true);
  gm.norm_A_e = normalize_adjacency(gm.A_e, true);
  std::vector<Tensor> node_masks;
  for (const auto& name : node_group_names())
    node_masks.push_back(gm.node_groups.at(name));
  std::vector<Tensor> edge_masks;
  for (const auto& name : edge_group_names())
    edge_masks.push_back(gm.edge_groups.at(name));
  gm.norm_node_groups = group_normalize(gm.A_v, node_masks);
  gm.norm_edge_groups = group_normalize(gm.A_e, edge_masks);
  return gm;
}

}  // namespace poselift
