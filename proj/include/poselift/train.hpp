#pragma once

#include <iostream>
#include <numeric>
#include <string>
#include <vector>

#include "json.hpp"
#include "poselift/checkpoint.hpp"
#include "poselift/config.hpp"
#include "poselift/data.hpp"
#include "poselift/graph.hpp"
#include "poselift/network.hpp"
#include "poselift/objectives.hpp"
#include "poselift/optim.hpp"

namespace poselift {

// ---------------------------------------------------------------------------
// Batch assembly.
// ---------------------------------------------------------------------------

struct Batch {
  Tensor pose2d;     // (B, Nv, 2) width-normalized
  Tensor edge_feat;  // (B, Ne, 4) flattened 2D bone rotations
  LossTargets targets;
  bool has_labels = false;
};

inline Batch make_batch(const std::vector<PoseSample>& samples,
                        const std::vector<int>& indices,
                        const SkeletonTopology& topo, const RestPose& rest) {
  int64_t b = static_cast<int64_t>(indices.size());
  int64_t nv = topo.num_joints();
  int64_t ne = topo.num_edges();
  Batch batch;
  batch.pose2d = Tensor::zeros({b, nv, 2});
  batch.edge_feat = Tensor::zeros({b, ne, 4});
  bool labels = !samples.empty() &&
                !samples[static_cast<size_t>(indices[0])].joints3d.empty();
  batch.has_labels = labels;
  if (labels) {
    batch.targets.joints3d = Tensor::zeros({b, nv, 3});
    batch.targets.rotations = Tensor::zeros({b, ne, 3, 3});
  }
  batch.targets.sel_child =
      detail_net::selection_matrix(topo.edge_children(), static_cast<int>(nv));
  batch.targets.bone_units = Tensor::zeros({b, ne, 3});

  for (int64_t i = 0; i < b; ++i) {
    const PoseSample& s = samples[static_cast<size_t>(indices[static_cast<size_t>(i)])];
    auto norm = normalize_2d(s.joints2d, s.image_width, s.image_height);
    auto feats = edge_features(norm, topo);
    for (int64_t j = 0; j < nv; ++j) {
      batch.pose2d.at_mut({i, j, 0}) = norm[static_cast<size_t>(j)][0];
      batch.pose2d.at_mut({i, j, 1}) = norm[static_cast<size_t>(j)][1];
    }
    for (int64_t e = 0; e < ne; ++e) {
      for (int64_t k = 0; k < 4; ++k)
        batch.edge_feat.at_mut({i, e, k}) = feats[static_cast<size_t>(e)]
                                                 [static_cast<size_t>(k)];
      for (int64_t k = 0; k < 3; ++k)
        batch.targets.bone_units.at_mut({i, e, k}) =
            rest.directions[static_cast<size_t>(e)][static_cast<size_t>(k)];
    }
    if (labels) {
      Joints3d rel = root_relative(s.joints3d, topo.root);
      for (int64_t j = 0; j < nv; ++j)
        for (int64_t k = 0; k < 3; ++k)
          batch.targets.joints3d.at_mut({i, j, k}) =
              rel[static_cast<size_t>(j)][static_cast<size_t>(k)];
      for (int64_t e = 0; e < ne; ++e)
        for (int64_t r = 0; r < 3; ++r)
          for (int64_t c = 0; c < 3; ++c)
            batch.targets.rotations.at_mut({i, e, r, c}) =
                s.rotations[static_cast<size_t>(e)](static_cast<int>(r),
                                                    static_cast<int>(c));
    }
  }
  return batch;
}

inline std::vector<int> all_indices(size_t n) {
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  return idx;
}

// ---------------------------------------------------------------------------
// Model runtime: params + optimizer + rng streams for one training run.
// ---------------------------------------------------------------------------

struct EvalMetrics {
  double mpjpe_p1_mm = 0.0;
  double mpjpe_p2_mm = 0.0;
  double mpjae_rad = 0.0;
  double maa = 0.0;  // fraction; the CLI reports maa_pct = 100 * maa

  nlohmann::json to_json() const {
    return nlohmann::json{{"mpjpe_p1_mm", mpjpe_p1_mm},
                          {"mpjpe_p2_mm", mpjpe_p2_mm},
                          {"mpjae_rad", mpjae_rad},
                          {"maa_pct", 100.0 * maa}};
  }
};

class Trainer {
 public:
  Trainer(const ModelConfig& cfg, const SkeletonTopology& topo,
          double adj_noise_std = 1e-4)
      : cfg_(cfg),
        topo_(topo),
        gm_(build_matrices(topo)),
        rest_(default_rest_pose()),
        init_rng_(SplitMix64(cfg.seed).fork(1)),
        dropout_rng_(SplitMix64(cfg.seed).fork(2)),
        shuffle_rng_(SplitMix64(cfg.seed).fork(3)) {
    params_ = init_params(cfg_, gm_, init_rng_, adj_noise_std);
    trainables_ = trainable_params(params_);
    adam_ = AdamState::init(trainables_);
  }

  const ModelConfig& config() const { return cfg_; }
  const SkeletonTopology& topology() const { return topo_; }
  const GraphMatrices& matrices() const { return gm_; }
  const RestPose& rest_pose() const { return rest_; }
  ModelParams& params() { return params_; }
  SplitMix64& shuffle_rng() { return shuffle_rng_; }

  Batch batch_for(const std::vector<PoseSample>& samples,
                  const std::vector<int>& indices) const {
    return make_batch(samples, indices, topo_, rest_);
  }

  // One optimizer step on a labeled batch; returns the total loss value.
  double train_step(const Batch& batch, double lr) {
    ForwardContext ctx{Mode::train, &dropout_rng_, false};
    ModelOutput out = model_forward(batch.pose2d, batch.edge_feat, params_, gm_,
                                    cfg_, ctx);
    LossValue lv = combined_loss(out.pos3d, out.rot6d, batch.targets, cfg_);
    for (Tensor& p : trainables_) p.zero_grad();
    lv.total.backward();
    adam_step(trainables_, adam_, lr);
    return lv.total.item();
  }

  ModelOutput forward_eval(const Batch& batch) {
    ForwardContext ctx{Mode::eval, nullptr, false};
    return model_forward(batch.pose2d, batch.edge_feat, params_, gm_, cfg_, ctx);
  }

  // Eval-mode metrics over a labeled sample set, batched deterministically.
  EvalMetrics evaluate(const std::vector<PoseSample>& samples,
                       int batch_size = 256, bool p2_with_scale = true) {
    std::vector<Joints3d> pred_pos, gt_pos;
    std::vector<BoneRotations> pred_rot, gt_rot;
    predict(samples, batch_size, &pred_pos, &pred_rot);
    for (const PoseSample& s : samples) {
      gt_pos.push_back(root_relative(s.joints3d, topo_.root));
      gt_rot.push_back(s.rotations);
    }
    EvalMetrics m;
    m.mpjpe_p1_mm = metric_mpjpe_p1(pred_pos, gt_pos);
    m.mpjpe_p2_mm = metric_mpjpe_p2(pred_pos, gt_pos, p2_with_scale);
    m.mpjae_rad = metric_mpjae(pred_rot, gt_rot);
    m.maa = metric_maa(pred_rot, gt_rot);
    return m;
  }

  // Eval-mode inference: positions (mm, root-relative) and recovered bone
  // rotation matrices per sample.
  void predict(const std::vector<PoseSample>& samples, int batch_size,
               std::vector<Joints3d>* positions,
               std::vector<BoneRotations>* rotations) {
    int64_t nv = topo_.num_joints();
    int64_t ne = topo_.num_edges();
    for (size_t start = 0; start < samples.size();
         start += static_cast<size_t>(batch_size)) {
      std::vector<int> idx;
      for (size_t i = start;
           i < std::min(samples.size(), start + static_cast<size_t>(batch_size));
           ++i)
        idx.push_back(static_cast<int>(i));
      Batch batch = batch_for(samples, idx);
      ModelOutput out = forward_eval(batch);
      for (size_t bi = 0; bi < idx.size(); ++bi) {
        if (positions) {
          Joints3d pose(static_cast<size_t>(nv));
          for (int64_t j = 0; j < nv; ++j)
            pose[static_cast<size_t>(j)] = {
                out.pos3d.at({static_cast<int64_t>(bi), j, 0}),
                out.pos3d.at({static_cast<int64_t>(bi), j, 1}),
                out.pos3d.at({static_cast<int64_t>(bi), j, 2})};
          positions->push_back(std::move(pose));
        }
        if (rotations) {
          BoneRotations rots;
          rots.reserve(static_cast<size_t>(ne));
          for (int64_t e = 0; e < ne; ++e) {
            Rot6D v;
            for (int64_t k = 0; k < 6; ++k)
              v[static_cast<size_t>(k)] =
                  out.rot6d.at({static_cast<int64_t>(bi), e, k});
            rots.push_back(rot::from_6d_guarded(v));
          }
          rotations->push_back(std::move(rots));
        }
      }
    }
  }

 private:
  ModelConfig cfg_;
  SkeletonTopology topo_;
  GraphMatrices gm_;
  RestPose rest_;
  SplitMix64 init_rng_;
  SplitMix64 dropout_rng_;
  SplitMix64 shuffle_rng_;
  ModelParams params_;
  std::vector<Tensor> trainables_;
  AdamState adam_;
};

// ---------------------------------------------------------------------------
// Training loop.
// ---------------------------------------------------------------------------

struct TrainResult {
  std::vector<double> step_losses;
  EvalMetrics final_train;
  EvalMetrics final_val;
  int64_t param_count = 0;
};

inline nlohmann::json run_manifest(const RunConfig& rc,
                                   const SkeletonTopology& topo) {
  return nlohmann::json{{"config", run_config_to_json(rc)},
                        {"topology", topo.to_json()}};
}

// Epoch loop: seeded shuffle, minibatches (remainder kept), combined loss,
// Adam, step decay every 5 epochs. Emits one JSON line per epoch and writes
// the checkpoint plus its manifest after every epoch.
inline TrainResult run_training(const RunConfig& rc, const SkeletonTopology& topo,
                                const std::vector<PoseSample>& train,
                                const std::vector<PoseSample>& val,
                                std::ostream* json_log = nullptr,
                                std::ostream* human_log = nullptr) {
  rc.validate();
  if (train.empty()) throw data_error("train: empty training set");
  Trainer trainer(rc.model, topo);
  TrainResult result;
  result.param_count = count_params(trainer.params());
  if (human_log)
    *human_log << "training on " << train.size() << " samples, "
               << result.param_count << " parameters\n";

  std::vector<int> order = all_indices(train.size());
  for (int epoch = 0; epoch < rc.epochs; ++epoch) {
    double lr = lr_at_epoch(rc.lr, rc.lr_decay, epoch);
    // Seeded Fisher-Yates shuffle.
    SplitMix64& rng = trainer.shuffle_rng();
    for (size_t i = order.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(rng.next_u64() % i);
      std::swap(order[i - 1], order[j]);
    }
    double epoch_loss = 0.0;
    int batches = 0;
    for (size_t start = 0; start < order.size();
         start += static_cast<size_t>(rc.batch_size)) {
      std::vector<int> idx(order.begin() + static_cast<long>(start),
                           order.begin() +
                               static_cast<long>(std::min(
                                   order.size(),
                                   start + static_cast<size_t>(rc.batch_size))));
      Batch batch = trainer.batch_for(train, idx);
      double loss = trainer.train_step(batch, lr);
      result.step_losses.push_back(loss);
      epoch_loss += loss;
      ++batches;
    }
    epoch_loss /= std::max(1, batches);

    EvalMetrics train_m = trainer.evaluate(train, rc.batch_size);
    EvalMetrics val_m = val.empty() ? EvalMetrics{} : trainer.evaluate(val, rc.batch_size);
    if (json_log) {
      nlohmann::json line{{"epoch", epoch},
                          {"lr", lr},
                          {"train_loss", epoch_loss},
                          {"train_mpjpe_p1", train_m.mpjpe_p1_mm},
                          {"train_mpjae", train_m.mpjae_rad}};
      if (!val.empty()) {
        line["val_mpjpe_p1"] = val_m.mpjpe_p1_mm;
        line["val_mpjae"] = val_m.mpjae_rad;
      }
      *json_log << line.dump() << "\n";
    }
    if (human_log)
      *human_log << "epoch " << epoch << " lr " << lr << " loss " << epoch_loss
                 << " train P1 " << train_m.mpjpe_p1_mm << "mm mpjae "
                 << train_m.mpjae_rad << "rad\n";
    if (!rc.checkpoint_out.empty()) {
      auto reg = param_registry(trainer.params());
      save_checkpoint(rc.checkpoint_out, reg);
      std::ofstream mf(rc.checkpoint_out + ".manifest.json");
      if (!mf)
        throw data_error("train: cannot write manifest next to " +
                         rc.checkpoint_out);
      mf << run_manifest(rc, topo).dump(2) << "\n";
    }
    result.final_train = train_m;
    result.final_val = val_m;
  }
  return result;
}

// Rebuild a model from a checkpoint plus its manifest.
struct LoadedModel {
  RunConfig config;
  SkeletonTopology topology;
  Trainer trainer;
};

inline LoadedModel load_model(const std::string& checkpoint_path) {
  std::ifstream mf(checkpoint_path + ".manifest.json");
  if (!mf)
    throw data_error("load_model: missing manifest " + checkpoint_path +
                     ".manifest.json");
  nlohmann::json manifest;
  try {
    mf >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw data_error(std::string("load_model: bad manifest JSON: ") + e.what());
  }
  RunConfig rc = run_config_from_json(manifest.at("config"));
  SkeletonTopology topo = SkeletonTopology::from_json(manifest.at("topology"));
  LoadedModel lm{rc, topo, Trainer(rc.model, topo)};
  auto reg = param_registry(lm.trainer.params());
  load_checkpoint_into(checkpoint_path, reg);
  return lm;
}

// ---------------------------------------------------------------------------
// Gradient-check suite (shared by the CLI and the acceptance tests).
// ---------------------------------------------------------------------------

struct GradCheckEntry {
  std::string op;
  double max_rel_err;
  double tolerance;
  bool ok() const { return max_rel_err < tolerance; }
};

inline std::vector<GradCheckEntry> gradcheck_suite(uint64_t seed = 12345) {
  std::vector<GradCheckEntry> results;
  SplitMix64 rng(seed);
  auto off_zero = [&rng](std::vector<int64_t> shape) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (double& v : t.data()) {
      double u = rng.uniform(0.1, 1.0);
      v = rng.uniform() < 0.5 ? -u : u;
    }
    return t;
  };
  auto check = [&results](const std::string& op, double tol,
                          const std::function<Tensor(const std::vector<Tensor>&)>& f,
                          std::vector<Tensor> inputs) {
    double err = grad_check(f, std::move(inputs));
    results.push_back({op, err, tol});
  };

  for (int trial = 0; trial < 3; ++trial) {
    std::vector<int64_t> shape{2 + trial, 3, 2 + trial};
    Tensor a = off_zero(shape);
    Tensor b = off_zero(shape);
    std::string suffix = "#" + std::to_string(trial);
    check("add" + suffix, 1e-6,
          [](const std::vector<Tensor>& in) { return sum_all(add(in[0], in[1])); },
          {a, b});
    check("sub" + suffix, 1e-6,
          [](const std::vector<Tensor>& in) { return sum_all(sub(in[0], in[1])); },
          {a, b});
    check("mul" + suffix, 1e-6,
          [](const std::vector<Tensor>& in) { return sum_all(mul(in[0], in[1])); },
          {a, b});
    check("div" + suffix, 1e-6,
          [](const std::vector<Tensor>& in) { return sum_all(div(in[0], in[1])); },
          {a, b});
    check("relu" + suffix, 1e-6,
          [](const std::vector<Tensor>& in) { return sum_all(relu(in[0])); }, {a});
    check("sigmoid" + suffix, 1e-6,
          [](const std::vector<Tensor>& in) { return sum_all(sigmoid(in[0])); },
          {a});
    check("abs" + suffix, 1e-6,
          [](const std::vector<Tensor>& in) { return sum_all(abs(in[0])); }, {a});
    check("scale" + suffix, 1e-6,
          [](const std::vector<Tensor>& in) { return sum_all(scale(in[0], 1.7)); },
          {a});
    Tensor pos = Tensor::uniform(shape, 0.5, 2.0, rng);
    check("sqrt" + suffix, 1e-6,
          [](const std::vector<Tensor>& in) { return sum_all(sqrt(in[0])); },
          {pos});
    Tensor m1 = Tensor::uniform({3 + trial, 4}, -1, 1, rng);
    Tensor m2 = Tensor::uniform({4, 2 + trial}, -1, 1, rng);
    check("matmul" + suffix, 1e-6,
          [](const std::vector<Tensor>& in) {
            return sum_all(matmul(in[0], in[1]));
          },
          {m1, m2});
    check("transpose" + suffix, 1e-6,
          [](const std::vector<Tensor>& in) {
            Tensor t = transpose(in[0]);
            return sum_all(mul(t, t));
          },
          {a});
    check("concat" + suffix, 1e-6,
          [](const std::vector<Tensor>& in) {
            Tensor c = concat({in[0], in[1]});
            return sum_all(mul(c, c));
          },
          {a, b});
    check("slice_last" + suffix, 1e-6,
          [](const std::vector<Tensor>& in) {
            Tensor s = slice_last(in[0], 0, 1);
            return sum_all(mul(s, s));
          },
          {a});
    check("sum_axis" + suffix, 1e-6,
          [](const std::vector<Tensor>& in) {
            Tensor s = sum_axis(in[0], 1, true);
            return sum_all(mul(s, s));
          },
          {a});
    check("batchnorm" + suffix, 1e-5,
          [](const std::vector<Tensor>& in) {
            BatchNormState bn = BatchNormState::init(in[0].shape().back());
            bn.gamma = in[1];
            bn.beta = in[2];
            Tensor y = batchnorm(in[0], bn, Mode::train);
            return sum_all(mul(y, y));
          },
          {a, Tensor::uniform({shape.back()}, 0.5, 1.5, rng),
           Tensor::uniform({shape.back()}, -0.5, 0.5, rng)});
    check("dropout" + suffix, 1e-6,
          [seed](const std::vector<Tensor>& in) {
            SplitMix64 drop_rng(seed ^ 0x9e37);
            return sum_all(dropout(in[0], 0.3, Mode::train, drop_rng));
          },
          {a});
  }

  // Squeeze-and-excitation block.
  {
    Tensor x = Tensor::uniform({2, 5, 4}, -1, 1, rng);
    Tensor wsq = Tensor::uniform({4, 2}, -1, 1, rng);
    Tensor wex = Tensor::uniform({2, 4}, -1, 1, rng);
    check("se_block", 1e-6,
          [](const std::vector<Tensor>& in) {
            Tensor y = se_block(in[0], in[1], in[2], 2);
            return sum_all(mul(y, y));
          },
          {x, wsq, wex});
  }

  // 6D recovery and the rotation losses.
  {
    auto separated_6d = [&rng]() {
      while (true) {
        std::array<double, 6> v;
        for (double& x : v) x = rng.uniform(-1.0, 1.0);
        double n1 = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
        if (n1 < 0.3) continue;
        double d = (v[0] * v[3] + v[1] * v[4] + v[2] * v[5]) / (n1 * n1);
        double ux = v[3] - d * v[0], uy = v[4] - d * v[1], uz = v[5] - d * v[2];
        if (std::sqrt(ux * ux + uy * uy + uz * uz) < 0.3) continue;
        return v;
      }
    };
    std::vector<double> vdata, gdata;
    for (int i = 0; i < 4; ++i) {
      auto v = separated_6d();
      vdata.insert(vdata.end(), v.begin(), v.end());
      RotMat3 g = rot::random_rotation(rng);
      gdata.insert(gdata.end(), g.m.begin(), g.m.end());
    }
    Tensor v6 = Tensor::from_data({1, 4, 6}, vdata);
    Tensor gt = Tensor::from_data({1, 4, 3, 3}, gdata);
    check("rot6d_to_matrix", 1e-6,
          [](const std::vector<Tensor>& in) {
            Tensor r = rot6d_to_matrix(in[0]);
            return sum_all(mul(r, r));
          },
          {v6});
    check("idev_loss", 1e-6,
          [&gt](const std::vector<Tensor>& in) { return idev_loss(in[0], gt); },
          {v6});
    Tensor xp = Tensor::uniform({1, 4, 3}, -2, 2, rng);
    Tensor xg = Tensor::uniform({1, 4, 3}, -2, 2, rng);
    check("ploss", 1e-6,
          [&gt, &xg](const std::vector<Tensor>& in) {
            return ploss(in[0], gt, in[1], xg);
          },
          {v6, xp});
    Tensor jp = Tensor::uniform({2, 5, 3}, -10, 10, rng);
    Tensor jg = Tensor::uniform({2, 5, 3}, -10, 10, rng);
    check("mpjpe_loss", 1e-6,
          [&jg](const std::vector<Tensor>& in) { return mpjpe_loss(in[0], jg); },
          {jp});
  }

  // Full combined loss through a small model, eval mode, wrt a weight slice.
  {
    ModelConfig cfg;
    cfg.channels = 8;
    cfg.blocks = 1;
    cfg.squeeze_ratio = 4;
    cfg.seed = seed;
    SkeletonTopology topo = default_topology();
    RestPose rest = default_rest_pose();
    SplitMix64 gen(seed + 9);
    auto samples = synth_generate(2, gen, default_angle_limits(), rest, topo);
    Batch batch = make_batch(samples, {0, 1}, topo, rest);
    // Meter-scale targets keep the loss O(1); central differences on an
    // mm^2-scale loss lose half their digits to cancellation.
    for (double& v : batch.targets.joints3d.data()) v *= 1e-3;
    GraphMatrices gm = build_matrices(topo);
    SplitMix64 init_rng(seed + 10);
    ModelParams mp = init_params(cfg, gm, init_rng);
    auto full_loss = [&](const std::vector<Tensor>&) {
      ForwardContext ctx{Mode::eval, nullptr, false};
      ModelOutput out =
          model_forward(batch.pose2d, batch.edge_feat, mp, gm, cfg, ctx);
      return combined_loss(out.pos3d, out.rot6d, batch.targets, cfg).total;
    };
    check("model_loss_wrt_node_P", 1e-5, full_loss, {mp.input_module.node.P});
    check("model_loss_wrt_block_W", 1e-5, full_loss,
          {mp.blocks[0][0].node.W[0]});
    check("model_loss_wrt_pos_fc", 1e-5, full_loss, {mp.pos_fc_w});
    check("model_loss_wrt_ori_fc2", 1e-5, full_loss, {mp.ori_fc2_w});
    check("model_loss_wrt_adaptive_A", 1e-5, full_loss,
          {mp.blocks[0][0].edge.A.empty() ? mp.blocks[0][0].edge.W[0]
                                          : mp.blocks[0][0].edge.A[0]});
  }
  return results;
}

}  // namespace poselift
