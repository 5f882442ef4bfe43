#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "poselift/common.hpp"
#include "poselift/config.hpp"
#include "poselift/graph.hpp"
#include "poselift/rng.hpp"
#include "poselift/tensor.hpp"

namespace poselift {

struct ForwardContext {
  Mode mode = Mode::eval;
  SplitMix64* dropout_rng = nullptr;
  // Test knob: zero the position features fed into the orientation head,
  // to verify that wiring is live.
  bool ori_zero_position_feed = false;
};

// One graph-convolution path (node or edge stream).
struct ConvLayerParams {
  Tensor P;                // cross-stream projection; absent in node_only layers
  std::vector<Tensor> W;   // 1 weight (basic kernels) or one per neighbor group
  std::vector<Tensor> A;   // learnable adjacency; empty when static
  BatchNormState bn;

  bool has_projection() const { return !P.data().empty(); }
};

struct NeModuleParams {
  ConvLayerParams node;
  ConvLayerParams edge;
};

struct SeParams {
  Tensor w_squeeze;  // (C, C/d)
  Tensor w_excite;   // (C/d, C)
};

struct ModelParams {
  NeModuleParams input_module;
  std::vector<std::vector<NeModuleParams>> blocks;
  SeParams pos_se;
  Tensor pos_fc_w, pos_fc_b;
  SeParams ori_se;
  Tensor ori_fc1_w, ori_fc1_b;
  BatchNormState ori_bn;
  Tensor ori_fc2_w, ori_fc2_b;
};

struct ModelOutput {
  Tensor pos3d;  // (B, Nv, 3), root row forced to zero
  Tensor rot6d;  // (B, Ne, 6)
};

// ---------------------------------------------------------------------------
// Initialization.
// ---------------------------------------------------------------------------

namespace detail_net {

inline Tensor init_weight(int64_t fan_in, int64_t fan_out, SplitMix64& rng) {
  double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
  return Tensor::uniform({fan_in, fan_out}, -bound, bound, rng, true);
}

inline Tensor init_adaptive(const Tensor& static_adj, double noise_std,
                            SplitMix64& noise_rng) {
  Tensor a = Tensor::from_data(static_adj.shape(), static_adj.data(), true);
  if (noise_std > 0.0)
    for (double& v : a.data()) v += noise_std * noise_rng.normal();
  return a;
}

struct LayerDims {
  int64_t self_in;   // own stream input width
  int64_t cross_in;  // other stream input width (0 = no projection)
  int64_t out;
};

// Adaptive-adjacency noise draws come from a separate stream so that
// toggling adaptivity does not reshuffle the weight initialization.
inline ConvLayerParams init_conv_layer(const LayerDims& dims, int group_count,
                                       bool adaptive, bool split,
                                       const std::vector<Tensor>& static_groups,
                                       const Tensor& static_full,
                                       double noise_std, SplitMix64& rng,
                                       SplitMix64& noise_rng) {
  ConvLayerParams p;
  if (dims.cross_in > 0) p.P = init_weight(dims.cross_in, dims.self_in, rng);
  int weights = split ? group_count : 1;
  for (int g = 0; g < weights; ++g)
    p.W.push_back(init_weight(dims.self_in, dims.out, rng));
  if (adaptive) {
    if (split) {
      for (const Tensor& s : static_groups)
        p.A.push_back(init_adaptive(s, noise_std, noise_rng));
    } else {
      p.A.push_back(init_adaptive(static_full, noise_std, noise_rng));
    }
  }
  p.bn = BatchNormState::init(dims.out);
  return p;
}

}  // namespace detail_net

// Weights ~ uniform(−sqrt(1/F_in), +sqrt(1/F_in)); adaptive adjacency starts
// at the static normalized group matrix plus N(0, adj_noise_std) noise;
// batchnorm gamma=1, beta=0. Same seed, same bits.
inline ModelParams init_params(const ModelConfig& cfg, const GraphMatrices& gm,
                               SplitMix64& rng, double adj_noise_std = 1e-4) {
  cfg.validate();
  ModelParams mp;
  bool split = cfg.kernels == Kernels::split;
  bool ad_v = cfg.adjacency_v == Adjacency::adaptive;
  bool ad_e = cfg.adjacency_e == Adjacency::adaptive;
  int64_t c = cfg.channels;
  SplitMix64 noise_rng = rng.fork(0xada9);

  auto node_layer = [&](int64_t self_in, int64_t cross_in, int64_t out) {
    return detail_net::init_conv_layer({self_in, cross_in, out}, 3, ad_v, split,
                                       gm.norm_node_groups, gm.norm_A_v,
                                       adj_noise_std, rng, noise_rng);
  };
  auto edge_layer = [&](int64_t self_in, int64_t cross_in, int64_t out) {
    return detail_net::init_conv_layer({self_in, cross_in, out}, 4, ad_e, split,
                                       gm.norm_edge_groups, gm.norm_A_e,
                                       adj_noise_std, rng, noise_rng);
  };

  if (cfg.node_only) {
    // Both slots become node-type layers on the single node stream; the
    // input consumes node features concatenated with scattered edge features.
    mp.input_module.node = node_layer(2 + 4, 0, c);
    mp.input_module.edge = node_layer(c, 0, c);
  } else {
    mp.input_module.node = node_layer(2, 4, c);
    mp.input_module.edge = edge_layer(4, 2, c);
  }
  mp.blocks.resize(static_cast<size_t>(cfg.blocks));
  for (int b = 0; b < cfg.blocks; ++b)
    for (int m = 0; m < cfg.ne_modules_per_block; ++m) {
      NeModuleParams mod;
      if (cfg.node_only) {
        mod.node = node_layer(c, 0, c);
        mod.edge = node_layer(c, 0, c);
      } else {
        mod.node = node_layer(c, c, c);
        mod.edge = edge_layer(c, c, c);
      }
      mp.blocks[static_cast<size_t>(b)].push_back(std::move(mod));
    }

  int64_t cd = c / cfg.squeeze_ratio;
  mp.pos_se.w_squeeze = detail_net::init_weight(c, cd, rng);
  mp.pos_se.w_excite = detail_net::init_weight(cd, c, rng);
  mp.pos_fc_w = detail_net::init_weight(c, 3, rng);
  mp.pos_fc_b = Tensor::zeros({3}, true);
  mp.ori_se.w_squeeze = detail_net::init_weight(c, cd, rng);
  mp.ori_se.w_excite = detail_net::init_weight(cd, c, rng);
  mp.ori_fc1_w = detail_net::init_weight(c + 6, c, rng);
  mp.ori_fc1_b = Tensor::zeros({c}, true);
  mp.ori_bn = BatchNormState::init(c);
  mp.ori_fc2_w = detail_net::init_weight(c, 6, rng);
  mp.ori_fc2_b = Tensor::zeros({6}, true);
  return mp;
}

// ---------------------------------------------------------------------------
// Parameter registry (checkpoint naming).
// ---------------------------------------------------------------------------

// Names follow "block{i}.ne{j}.{node|edge}.{P|W|Wg{k}|A|Ag{k}|bn.*}" plus
// "input.*", "pos_head.*" and "ori_head.*"; the full table is in the README.
inline std::vector<std::pair<std::string, Tensor>> param_registry(
    const ModelParams& mp) {
  std::vector<std::pair<std::string, Tensor>> reg;
  auto add_bn = [&](const std::string& prefix, const BatchNormState& bn) {
    reg.emplace_back(prefix + ".bn.gamma", bn.gamma);
    reg.emplace_back(prefix + ".bn.beta", bn.beta);
    reg.emplace_back(prefix + ".bn.running_mean", bn.running_mean);
    reg.emplace_back(prefix + ".bn.running_var", bn.running_var);
  };
  auto add_conv = [&](const std::string& prefix, const ConvLayerParams& p) {
    if (p.has_projection()) reg.emplace_back(prefix + ".P", p.P);
    if (p.W.size() == 1) {
      reg.emplace_back(prefix + ".W", p.W[0]);
    } else {
      for (size_t g = 0; g < p.W.size(); ++g)
        reg.emplace_back(prefix + ".Wg" + std::to_string(g), p.W[g]);
    }
    if (p.A.size() == 1) {
      reg.emplace_back(prefix + ".A", p.A[0]);
    } else {
      for (size_t g = 0; g < p.A.size(); ++g)
        reg.emplace_back(prefix + ".Ag" + std::to_string(g), p.A[g]);
    }
    add_bn(prefix, p.bn);
  };
  auto add_module = [&](const std::string& prefix, const NeModuleParams& m) {
    add_conv(prefix + ".node", m.node);
    add_conv(prefix + ".edge", m.edge);
  };
  add_module("input", mp.input_module);
  for (size_t b = 0; b < mp.blocks.size(); ++b)
    for (size_t m = 0; m < mp.blocks[b].size(); ++m)
      add_module("block" + std::to_string(b) + ".ne" + std::to_string(m),
                 mp.blocks[b][m]);
  reg.emplace_back("pos_head.se.Wsq", mp.pos_se.w_squeeze);
  reg.emplace_back("pos_head.se.Wex", mp.pos_se.w_excite);
  reg.emplace_back("pos_head.fc.W", mp.pos_fc_w);
  reg.emplace_back("pos_head.fc.b", mp.pos_fc_b);
  reg.emplace_back("ori_head.se.Wsq", mp.ori_se.w_squeeze);
  reg.emplace_back("ori_head.se.Wex", mp.ori_se.w_excite);
  reg.emplace_back("ori_head.fc1.W", mp.ori_fc1_w);
  reg.emplace_back("ori_head.fc1.b", mp.ori_fc1_b);
  add_bn("ori_head", mp.ori_bn);
  reg.emplace_back("ori_head.fc2.W", mp.ori_fc2_w);
  reg.emplace_back("ori_head.fc2.b", mp.ori_fc2_b);
  return reg;
}

inline std::vector<Tensor> trainable_params(const ModelParams& mp) {
  std::vector<Tensor> out;
  for (auto& [name, t] : param_registry(mp))
    if (t.requires_grad()) out.push_back(t);
  return out;
}

inline int64_t count_params(const ModelParams& mp) {
  int64_t n = 0;
  for (const Tensor& t : trainable_params(mp)) n += t.numel();
  return n;
}

// ---------------------------------------------------------------------------
// Forward passes.
// ---------------------------------------------------------------------------

// Squeeze-and-excitation gate: X' = X ⊙ sigmoid(W_ex·relu(W_sq·X̄)) with X̄
// the per-channel mean over the node/edge axis.
inline Tensor se_block(const Tensor& x, const Tensor& w_squeeze,
                       const Tensor& w_excite, int64_t squeeze_ratio) {
  int64_t c = x.shape().back();
  if (squeeze_ratio <= 0 || c % squeeze_ratio != 0)
    throw shape_error("se_block: channels " + std::to_string(c) +
                      " not divisible by squeeze ratio " +
                      std::to_string(squeeze_ratio));
  if (w_squeeze.size(0) != c || w_squeeze.size(1) != c / squeeze_ratio)
    throw shape_error("se_block: squeeze weight shape mismatch");
  Tensor pooled = mean_axis(x, 1, true);  // (B,1,C)
  Tensor gate = sigmoid(matmul(relu(matmul(pooled, w_squeeze)), w_excite));
  return mul(x, gate);
}

namespace detail_net {

// σ(Σ_g Ã_g · inner · W_g) with batchnorm → ReLU → dropout. `inner` already
// contains the cross-stream term.
inline Tensor conv_path(const Tensor& inner, ConvLayerParams& p,
                        const std::vector<Tensor>& static_groups,
                        const Tensor& static_full, const ModelConfig& cfg,
                        ForwardContext& ctx) {
  bool split = p.W.size() > 1;
  Tensor acc;
  if (split) {
    for (size_t g = 0; g < p.W.size(); ++g) {
      const Tensor& adj = p.A.empty() ? static_groups[g] : p.A[g];
      Tensor term = matmul(matmul(adj, inner), p.W[g]);
      acc = g == 0 ? term : add(acc, term);
    }
  } else {
    const Tensor& adj = p.A.empty() ? static_full : p.A[0];
    acc = matmul(matmul(adj, inner), p.W[0]);
  }
  Tensor h = relu(batchnorm(acc, p.bn, ctx.mode));
  if (cfg.dropout > 0.0 && ctx.mode == Mode::train) {
    if (!ctx.dropout_rng)
      throw config_error("forward: training with dropout requires an rng");
    h = dropout(h, cfg.dropout, ctx.mode, *ctx.dropout_rng);
  }
  return h;
}

}  // namespace detail_net

// Edge-aware node / node-aware edge convolution module (Eq. 2 / Eq. 3 form).
// Both outputs are computed from the module inputs (simultaneous update).
inline std::pair<Tensor, Tensor> node_edge_forward(const Tensor& h_v,
                                                   const Tensor& h_e,
                                                   const GraphMatrices& gm,
                                                   NeModuleParams& params,
                                                   const ModelConfig& cfg,
                                                   ForwardContext& ctx) {
  if (h_v.rank() != 3 || h_v.size(1) != gm.num_joints)
    throw shape_error("node_edge_forward: node features " +
                      detail::shape_str(h_v.shape()) + " want (B," +
                      std::to_string(gm.num_joints) + ",F)");
  if (cfg.node_only) {
    // Both slots are node-type layers on the node stream; h_e is ignored here
    // (it was folded into the stream at the input module).
    Tensor h1 = detail_net::conv_path(h_v, params.node, gm.norm_node_groups,
                                      gm.norm_A_v, cfg, ctx);
    Tensor h2 = detail_net::conv_path(h1, params.edge, gm.norm_node_groups,
                                      gm.norm_A_v, cfg, ctx);
    return {h2, h_e};
  }
  if (h_e.rank() != 3 || h_e.size(1) != gm.num_edges)
    throw shape_error("node_edge_forward: edge features " +
                      detail::shape_str(h_e.shape()) + " want (B," +
                      std::to_string(gm.num_edges) + ",F)");

  Tensor inner_v = add(matmul(gm.T, matmul(h_e, params.node.P)), h_v);
  Tensor inner_e = add(matmul(transpose(gm.T), matmul(h_v, params.edge.P)), h_e);
  Tensor out_v = detail_net::conv_path(inner_v, params.node, gm.norm_node_groups,
                                       gm.norm_A_v, cfg, ctx);
  Tensor out_e = detail_net::conv_path(inner_e, params.edge, gm.norm_edge_groups,
                                       gm.norm_A_e, cfg, ctx);
  return {out_v, out_e};
}

namespace detail_net {

// Constant selection matrices derived from the edge list.
inline Tensor selection_matrix(const std::vector<int>& joint_per_edge, int nv) {
  int ne = static_cast<int>(joint_per_edge.size());
  Tensor sel = Tensor::zeros({ne, nv});
  for (int e = 0; e < ne; ++e)
    sel.at_mut({e, joint_per_edge[static_cast<size_t>(e)]}) = 1.0;
  return sel;
}

}  // namespace detail_net

// Full pipeline per the architecture: input NE module, `blocks` residual
// blocks of ne_modules_per_block NE modules each (residual add on both
// streams), then the position head and the orientation head (which consumes
// the predicted positions gathered per bone).
inline ModelOutput model_forward(const Tensor& pose2d, const Tensor& edge_feat,
                                 ModelParams& mp, const GraphMatrices& gm,
                                 const ModelConfig& cfg, ForwardContext& ctx) {
  if (pose2d.rank() != 3 || pose2d.size(1) != gm.num_joints ||
      pose2d.size(2) != 2)
    throw shape_error("model_forward: pose2d " +
                      detail::shape_str(pose2d.shape()) + " want (B," +
                      std::to_string(gm.num_joints) + ",2)");
  if (edge_feat.rank() != 3 || edge_feat.size(1) != gm.num_edges ||
      edge_feat.size(2) != 4)
    throw shape_error("model_forward: edge features " +
                      detail::shape_str(edge_feat.shape()) + " want (B," +
                      std::to_string(gm.num_edges) + ",4)");

  Tensor sel_parent = detail_net::selection_matrix(gm.edge_parent_joint,
                                                   gm.num_joints);
  Tensor sel_child = detail_net::selection_matrix(gm.edge_child, gm.num_joints);

  Tensor h_v, h_e;
  if (cfg.node_only) {
    Tensor scattered = matmul(transpose(sel_child), edge_feat);  // (B,Nv,4)
    h_v = concat({pose2d, scattered});
    auto [v, e] = node_edge_forward(h_v, edge_feat, gm, mp.input_module, cfg, ctx);
    h_v = v;
  } else {
    auto [v, e] = node_edge_forward(pose2d, edge_feat, gm, mp.input_module, cfg, ctx);
    h_v = v;
    h_e = e;
  }
  for (auto& block : mp.blocks) {
    Tensor block_in_v = h_v;
    Tensor block_in_e = h_e;
    for (auto& module : block) {
      auto [v, e] = node_edge_forward(h_v, h_e, gm, module, cfg, ctx);
      h_v = v;
      h_e = e;
    }
    h_v = add(h_v, block_in_v);
    if (!cfg.node_only) h_e = add(h_e, block_in_e);
  }

  // Position head: SE gate then per-joint linear to xyz; root forced to zero.
  Tensor pos_feat = se_block(h_v, mp.pos_se.w_squeeze, mp.pos_se.w_excite,
                             cfg.squeeze_ratio);
  Tensor pos = add(matmul(pos_feat, mp.pos_fc_w), mp.pos_fc_b);
  Tensor root_mask = Tensor::full({gm.num_joints, 1}, 1.0);
  // Root = joint with no parent edge; find it as the one not in edge_child.
  {
    std::vector<bool> has_parent(static_cast<size_t>(gm.num_joints), false);
    for (int c : gm.edge_child) has_parent[static_cast<size_t>(c)] = true;
    for (int j = 0; j < gm.num_joints; ++j)
      if (!has_parent[static_cast<size_t>(j)]) root_mask.at_mut({j, 0}) = 0.0;
  }
  pos = mul(pos, root_mask);

  // Orientation head: per bone, SE-gated edge features concatenated with the
  // predicted parent and child joint positions, then FC → BN → ReLU → FC.
  Tensor ori_in = cfg.node_only ? matmul(sel_child, h_v) : h_e;
  Tensor ori_feat = se_block(ori_in, mp.ori_se.w_squeeze, mp.ori_se.w_excite,
                             cfg.squeeze_ratio);
  Tensor par_pos = matmul(sel_parent, pos);
  Tensor chd_pos = matmul(sel_child, pos);
  if (ctx.ori_zero_position_feed) {
    par_pos = scale(par_pos, 0.0);
    chd_pos = scale(chd_pos, 0.0);
  }
  Tensor cat = concat({ori_feat, par_pos, chd_pos});
  Tensor h = add(matmul(cat, mp.ori_fc1_w), mp.ori_fc1_b);
  h = relu(batchnorm(h, mp.ori_bn, ctx.mode));
  Tensor rot6d = add(matmul(h, mp.ori_fc2_w), mp.ori_fc2_b);
  return {pos, rot6d};
}

}  // namespace poselift
