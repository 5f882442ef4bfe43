#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "poselift/objectives.hpp"
#include "poselift/rng.hpp"

using namespace poselift;

namespace {

Rot6D random_separated_6d(SplitMix64& rng) {
  while (true) {
    Rot6D v;
    for (double& x : v) x = rng.uniform(-1.0, 1.0);
    double n1 = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    if (n1 < 0.3) continue;
    double d = (v[0] * v[3] + v[1] * v[4] + v[2] * v[5]) / (n1 * n1);
    double ux = v[3] - d * v[0], uy = v[4] - d * v[1], uz = v[5] - d * v[2];
    if (std::sqrt(ux * ux + uy * uy + uz * uz) < 0.3) continue;
    return v;
  }
}

Tensor pack_6d(const std::vector<Rot6D>& rows, int64_t batch, int64_t bones) {
  std::vector<double> data;
  for (const Rot6D& r : rows) data.insert(data.end(), r.begin(), r.end());
  return Tensor::from_data({batch, bones, 6}, std::move(data));
}

Tensor pack_rotations(const std::vector<RotMat3>& rots, int64_t batch,
                      int64_t bones) {
  std::vector<double> data;
  for (const RotMat3& r : rots) data.insert(data.end(), r.m.begin(), r.m.end());
  return Tensor::from_data({batch, bones, 3, 3}, std::move(data));
}

// Loop oracles, written against plain arrays so they share no code with the
// tensor implementations they check.
double naive_mpjpe_loss(const Tensor& pred, const Tensor& gt) {
  int64_t b = pred.size(0), n = pred.size(1);
  double total = 0.0;
  for (int64_t i = 0; i < b; ++i)
    for (int64_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int64_t k = 0; k < 3; ++k) {
        double d = pred.at({i, j, k}) - gt.at({i, j, k});
        acc += d * d;
      }
      total += acc;
    }
  return total / static_cast<double>(b * n);
}

double naive_idev(const std::vector<RotMat3>& pred,
                  const std::vector<RotMat3>& gt) {
  double total = 0.0;
  for (size_t i = 0; i < pred.size(); ++i) {
    RotMat3 m = rot::multiply(rot::transpose(gt[i]), pred[i]);
    double acc = 0.0;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) {
        double d = (r == c ? 1.0 : 0.0) - m(r, c);
        acc += d * d;
      }
    total += std::sqrt(acc);
  }
  return total / static_cast<double>(pred.size());
}

}  // namespace

TEST(rot6d_op, matches_scalar_recovery_on_batch) {
  SplitMix64 rng(401);
  std::vector<Rot6D> rows;
  for (int i = 0; i < 8; ++i) rows.push_back(random_separated_6d(rng));
  Tensor v = pack_6d(rows, 2, 4);
  Tensor r = rot6d_to_matrix(v);
  ASSERT_EQ(r.shape(), (std::vector<int64_t>{2, 4, 3, 3}));
  for (int64_t b = 0; b < 2; ++b)
    for (int64_t e = 0; e < 4; ++e) {
      RotMat3 expect = rot::from_6d(rows[static_cast<size_t>(b * 4 + e)]);
      for (int64_t i = 0; i < 3; ++i)
        for (int64_t j = 0; j < 3; ++j)
          EXPECT_NEAR(r.at({b, e, i, j}), expect(static_cast<int>(i),
                                                 static_cast<int>(j)), 1e-14);
    }
}

TEST(rot6d_op, gradient_passes_fd) {
  SplitMix64 rng(402);
  std::vector<Rot6D> rows;
  for (int i = 0; i < 3; ++i) rows.push_back(random_separated_6d(rng));
  Tensor v = pack_6d(rows, 1, 3);
  Tensor w = Tensor::uniform({3, 3}, -1.0, 1.0, rng);
  double err = grad_check(
      [&w](const std::vector<Tensor>& in) {
        Tensor r = rot6d_to_matrix(in[0]);
        return sum_all(mul(r, mul(r, w)));  // mix entries so grads are nontrivial
      },
      {v});
  EXPECT_LT(err, 1e-6);
}

TEST(rot6d_op, degenerate_rows_become_identity_with_stopped_gradient) {
  uint64_t before = rot::degeneracy_counter().load();
  SplitMix64 rng(403);
  Rot6D good = random_separated_6d(rng);
  std::vector<double> data(good.begin(), good.end());
  data.insert(data.end(), {0, 0, 0, 0, 1, 0});        // zero first column
  data.insert(data.end(), {1, 0, 0, 2, 0, 0});        // parallel columns
  Tensor v = Tensor::from_data({3, 6}, std::move(data), true);
  Tensor r = rot6d_to_matrix(v);
  EXPECT_EQ(rot::degeneracy_counter().load(), before + 2);
  for (int64_t e = 1; e < 3; ++e)
    for (int64_t i = 0; i < 3; ++i)
      for (int64_t j = 0; j < 3; ++j)
        EXPECT_NEAR(r.at({e, i, j}), i == j ? 1.0 : 0.0, 1e-15);
  sum_all(mul(r, r)).backward();
  // Gradient flows to the healthy row only.
  const auto& g = v.grad();
  double good_norm = 0.0, bad_norm = 0.0;
  for (size_t i = 0; i < 6; ++i) good_norm += std::fabs(g[i]);
  for (size_t i = 6; i < 18; ++i) bad_norm += std::fabs(g[i]);
  EXPECT_GT(good_norm, 0.0);
  EXPECT_EQ(bad_norm, 0.0);
}

TEST(losses, mpjpe_loss_examples) {
  Tensor same = Tensor::uniform({2, 5, 3}, -1, 1, *new SplitMix64(404));
  EXPECT_DOUBLE_EQ(mpjpe_loss(same, same).item(), 0.0);

  Tensor pred = Tensor::from_data({1, 1, 3}, {3, 4, 0});
  Tensor gt = Tensor::zeros({1, 1, 3});
  EXPECT_DOUBLE_EQ(mpjpe_loss(pred, gt).item(), 25.0);

  SplitMix64 rng(405);
  Tensor p = Tensor::uniform({3, 7, 3}, -100, 100, rng);
  Tensor g = Tensor::uniform({3, 7, 3}, -100, 100, rng);
  EXPECT_NEAR(mpjpe_loss(p, g).item(), naive_mpjpe_loss(p, g), 1e-12 * 1e4);

  EXPECT_THROW(mpjpe_loss(Tensor::zeros({1, 2, 3}), Tensor::zeros({1, 3, 3})),
               shape_error);
}

TEST(losses, mpjpe_gradient) {
  SplitMix64 rng(406);
  Tensor p = Tensor::uniform({2, 4, 3}, -1, 1, rng);
  Tensor g = Tensor::uniform({2, 4, 3}, -1, 1, rng);
  EXPECT_LT(grad_check([&g](const std::vector<Tensor>& in) {
              return mpjpe_loss(in[0], g);
            }, {p}), 1e-6);
}

TEST(losses, idev_examples) {
  SplitMix64 rng(407);
  // Equal rotations -> 0.
  std::vector<RotMat3> rots;
  std::vector<Rot6D> embeds;
  for (int i = 0; i < 4; ++i) {
    RotMat3 r = rot::random_rotation(rng);
    rots.push_back(r);
    embeds.push_back(rot::to_6d(r));
  }
  Tensor loss_zero = idev_loss(pack_6d(embeds, 1, 4), pack_rotations(rots, 1, 4));
  EXPECT_NEAR(loss_zero.item(), 0.0, 1e-9);

  // 180 degrees about Z vs identity: ‖I − R‖_F = 2√2.
  RotMat3 half_turn = rot::rot_z(rot::kPi);
  Tensor loss_ht = idev_loss(pack_6d({rot::to_6d(half_turn)}, 1, 1),
                             pack_rotations({RotMat3::identity()}, 1, 1));
  EXPECT_NEAR(loss_ht.item(), 2.0 * std::sqrt(2.0), 1e-12);

  // Loop oracle on random pairs.
  std::vector<RotMat3> gts;
  std::vector<Rot6D> preds;
  std::vector<RotMat3> pred_mats;
  for (int i = 0; i < 6; ++i) {
    gts.push_back(rot::random_rotation(rng));
    Rot6D v = random_separated_6d(rng);
    preds.push_back(v);
    pred_mats.push_back(rot::from_6d(v));
  }
  Tensor loss = idev_loss(pack_6d(preds, 2, 3), pack_rotations(gts, 2, 3));
  EXPECT_NEAR(loss.item(), naive_idev(pred_mats, gts), 1e-12);
}

TEST(losses, idev_gradient_through_6d_path) {
  SplitMix64 rng(408);
  std::vector<Rot6D> preds;
  std::vector<RotMat3> gts;
  for (int i = 0; i < 4; ++i) {
    preds.push_back(random_separated_6d(rng));
    gts.push_back(rot::random_rotation(rng));
  }
  Tensor v = pack_6d(preds, 1, 4);
  Tensor gt = pack_rotations(gts, 1, 4);
  EXPECT_LT(grad_check([&gt](const std::vector<Tensor>& in) {
              return idev_loss(in[0], gt);
            }, {v}), 1e-6);
}

TEST(losses, ploss_examples) {
  SplitMix64 rng(409);
  // Identical rotations and positions -> 0.
  std::vector<Rot6D> embeds;
  std::vector<RotMat3> rots;
  for (int i = 0; i < 4; ++i) {
    RotMat3 r = rot::random_rotation(rng);
    rots.push_back(r);
    embeds.push_back(rot::to_6d(r));
  }
  Tensor x = Tensor::uniform({1, 4, 3}, -100, 100, rng);
  Tensor zero = ploss(pack_6d(embeds, 1, 4), pack_rotations(rots, 1, 4), x, x);
  EXPECT_NEAR(zero.item(), 0.0, 1e-9);

  // Identity rotations, offset (1,-2,0.5): L1 contribution 3.5.
  Tensor xp = Tensor::from_data({1, 1, 3}, {1, -2, 0.5});
  Tensor xg = Tensor::zeros({1, 1, 3});
  Tensor l = ploss(pack_6d({rot::to_6d(RotMat3::identity())}, 1, 1),
                   pack_rotations({RotMat3::identity()}, 1, 1), xp, xg);
  EXPECT_DOUBLE_EQ(l.item(), 3.5);

  // Loop oracle.
  std::vector<Rot6D> preds;
  std::vector<RotMat3> gts;
  for (int i = 0; i < 4; ++i) {
    preds.push_back(random_separated_6d(rng));
    gts.push_back(rot::random_rotation(rng));
  }
  Tensor xpr = Tensor::uniform({1, 4, 3}, -10, 10, rng);
  Tensor xgr = Tensor::uniform({1, 4, 3}, -10, 10, rng);
  Tensor got = ploss(pack_6d(preds, 1, 4), pack_rotations(gts, 1, 4), xpr, xgr);
  double expect = 0.0;
  for (int i = 0; i < 4; ++i) {
    RotMat3 rp = rot::from_6d(preds[static_cast<size_t>(i)]);
    Vec3 a = rot::apply(rp, Vec3{xpr.at({0, i, 0}), xpr.at({0, i, 1}),
                                 xpr.at({0, i, 2})});
    Vec3 b = rot::apply(gts[static_cast<size_t>(i)],
                        Vec3{xgr.at({0, i, 0}), xgr.at({0, i, 1}),
                             xgr.at({0, i, 2})});
    expect += std::fabs(a[0] - b[0]) + std::fabs(a[1] - b[1]) +
              std::fabs(a[2] - b[2]);
  }
  expect /= 4.0;
  EXPECT_NEAR(got.item(), expect, 1e-12);
}

TEST(losses, ploss_gradient) {
  SplitMix64 rng(410);
  std::vector<Rot6D> preds;
  std::vector<RotMat3> gts;
  for (int i = 0; i < 3; ++i) {
    preds.push_back(random_separated_6d(rng));
    gts.push_back(rot::random_rotation(rng));
  }
  Tensor v = pack_6d(preds, 1, 3);
  Tensor gt = pack_rotations(gts, 1, 3);
  Tensor xp = Tensor::uniform({1, 3, 3}, -2, 2, rng);
  Tensor xg = Tensor::uniform({1, 3, 3}, -2, 2, rng);
  EXPECT_LT(grad_check([&gt, &xg](const std::vector<Tensor>& in) {
              return ploss(in[0], gt, in[1], xg);
            }, {v, xp}), 1e-6);
}

TEST(losses, combined_loss_dispatch_and_identity) {
  SplitMix64 rng(411);
  int64_t b = 2, nv = 5, ne = 4;
  Tensor pos_pred = Tensor::uniform({b, nv, 3}, -50, 50, rng);
  LossTargets tgt;
  tgt.joints3d = Tensor::uniform({b, nv, 3}, -50, 50, rng);
  std::vector<Rot6D> preds;
  std::vector<RotMat3> gts;
  for (int i = 0; i < b * ne; ++i) {
    preds.push_back(random_separated_6d(rng));
    gts.push_back(rot::random_rotation(rng));
  }
  Tensor rot_pred = pack_6d(preds, b, ne);
  tgt.rotations = pack_rotations(gts, b, ne);
  tgt.sel_child = Tensor::zeros({ne, nv});
  for (int64_t e = 0; e < ne; ++e) tgt.sel_child.at_mut({e, e + 1}) = 1.0;
  tgt.bone_units = Tensor::uniform({b, ne, 3}, -1, 1, rng);

  for (LossKind kind : {LossKind::idev, LossKind::ploss, LossKind::position_only,
                        LossKind::orientation_only}) {
    ModelConfig cfg;
    cfg.loss = kind;
    cfg.lambda = 20.0;
    LossValue lv = combined_loss(pos_pred, rot_pred, tgt, cfg);
    EXPECT_NEAR(lv.total.item(),
                lv.position_term.item() + cfg.lambda * lv.angle_term.item(),
                1e-12 * std::max(1.0, std::fabs(lv.total.item())));
    EXPECT_GE(lv.position_term.item(), 0.0);
    EXPECT_GE(lv.angle_term.item(), 0.0);
    if (kind == LossKind::position_only) EXPECT_EQ(lv.angle_term.item(), 0.0);
    if (kind == LossKind::orientation_only) EXPECT_EQ(lv.position_term.item(), 0.0);
  }

  // Bone-vector ploss variant runs and differs from the literal reading.
  ModelConfig cfg;
  cfg.loss = LossKind::ploss;
  LossValue literal = combined_loss(pos_pred, rot_pred, tgt, cfg);
  cfg.ploss_bone_vector = true;
  LossValue alt = combined_loss(pos_pred, rot_pred, tgt, cfg);
  EXPECT_NE(literal.angle_term.item(), alt.angle_term.item());
}

TEST(metrics, p1_examples) {
  Joints3d a{{0, 0, 0}, {1, 2, 3}};
  EXPECT_DOUBLE_EQ(metric_mpjpe_p1({a}, {a}), 0.0);
  Joints3d pred{{3, 4, 0}};
  Joints3d gt{{0, 0, 0}};
  EXPECT_DOUBLE_EQ(metric_mpjpe_p1({pred}, {gt}), 5.0);

  // Order of operations: mean of per-joint distances, not sqrt of mean.
  SplitMix64 rng(412);
  std::vector<Joints3d> preds, gts;
  for (int s = 0; s < 5; ++s) {
    Joints3d p(7), g(7);
    for (int j = 0; j < 7; ++j)
      for (int k = 0; k < 3; ++k) {
        p[static_cast<size_t>(j)][static_cast<size_t>(k)] = rng.uniform(-100, 100);
        g[static_cast<size_t>(j)][static_cast<size_t>(k)] = rng.uniform(-100, 100);
      }
    preds.push_back(p);
    gts.push_back(g);
  }
  double expect = 0.0;
  for (int s = 0; s < 5; ++s)
    for (int j = 0; j < 7; ++j) {
      double acc = 0.0;
      for (int k = 0; k < 3; ++k) {
        double d = preds[static_cast<size_t>(s)][static_cast<size_t>(j)]
                        [static_cast<size_t>(k)] -
                   gts[static_cast<size_t>(s)][static_cast<size_t>(j)]
                      [static_cast<size_t>(k)];
        acc += d * d;
      }
      expect += std::sqrt(acc);
    }
  expect /= 35.0;
  EXPECT_NEAR(metric_mpjpe_p1(preds, gts), expect, 1e-12);
}

namespace {

Joints3d random_pose(SplitMix64& rng, int n = 17) {
  Joints3d p(static_cast<size_t>(n));
  for (auto& v : p)
    for (double& x : v) x = rng.uniform(-500, 500);
  return p;
}

Joints3d apply_similarity(const Joints3d& j, double s, const RotMat3& r,
                          const Vec3& t) {
  Joints3d out(j.size());
  for (size_t i = 0; i < j.size(); ++i) {
    Vec3 v = rot::apply(r, j[i]);
    out[i] = {s * v[0] + t[0], s * v[1] + t[1], s * v[2] + t[2]};
  }
  return out;
}

}  // namespace

TEST(metrics, procrustes_exact_recovery_and_identity) {
  SplitMix64 rng(413);
  for (int trial = 0; trial < 50; ++trial) {
    Joints3d gt = random_pose(rng);
    double s = rng.uniform(0.5, 2.0);
    RotMat3 r = rot::random_rotation(rng);
    Vec3 t{rng.uniform(-100, 100), rng.uniform(-100, 100), rng.uniform(-100, 100)};
    Joints3d pred = apply_similarity(gt, s, r, t);
    EXPECT_LT(metric_mpjpe_p2({pred}, {gt}), 1e-9);
  }
  Joints3d gt = random_pose(rng);
  Joints3d aligned = procrustes_align(gt, gt);
  for (size_t i = 0; i < gt.size(); ++i)
    for (size_t k = 0; k < 3; ++k) EXPECT_NEAR(aligned[i][k], gt[i][k], 1e-9);
}

TEST(metrics, p2_never_exceeds_p1) {
  SplitMix64 rng(414);
  for (int trial = 0; trial < 1000; ++trial) {
    Joints3d pred = random_pose(rng, 8);
    Joints3d gt = random_pose(rng, 8);
    double p1 = metric_mpjpe_p1({pred}, {gt});
    double p2 = metric_mpjpe_p2({pred}, {gt});
    EXPECT_LE(p2, p1 + 1e-9);
  }
}

TEST(metrics, p2_invariant_under_similarity_of_predictions) {
  SplitMix64 rng(415);
  for (int trial = 0; trial < 20; ++trial) {
    Joints3d pred = random_pose(rng);
    Joints3d gt = random_pose(rng);
    double base = metric_mpjpe_p2({pred}, {gt});
    double s = rng.uniform(0.5, 2.0);
    RotMat3 r = rot::random_rotation(rng);
    Vec3 t{rng.uniform(-50, 50), rng.uniform(-50, 50), rng.uniform(-50, 50)};
    double moved = metric_mpjpe_p2({apply_similarity(pred, s, r, t)}, {gt});
    EXPECT_NEAR(base, moved, 1e-9 * std::max(1.0, base));
  }
}

TEST(metrics, procrustes_rejects_degenerate_configurations) {
  Joints3d line{{0, 0, 0}, {1, 0, 0}, {2, 0, 0}, {3, 0, 0}};
  EXPECT_THROW(procrustes_align(line, line), numeric_error);
  Joints3d two{{0, 0, 0}, {1, 1, 1}};
  EXPECT_THROW(procrustes_align(two, two), numeric_error);
}

TEST(metrics, procrustes_no_scale_mode) {
  SplitMix64 rng(416);
  Joints3d gt = random_pose(rng);
  Joints3d pred = apply_similarity(gt, 2.0, RotMat3::identity(), {0, 0, 0});
  // Rigid-only alignment cannot absorb the scale.
  EXPECT_GT(metric_mpjpe_p2({pred}, {gt}, false), 1.0);
  EXPECT_LT(metric_mpjpe_p2({pred}, {gt}, true), 1e-9);
}

TEST(metrics, mpjae_and_maa) {
  SplitMix64 rng(417);
  BoneRotations rots;
  for (int i = 0; i < 16; ++i) rots.push_back(rot::random_rotation(rng));
  EXPECT_DOUBLE_EQ(metric_mpjae({rots}, {rots}), 0.0);
  EXPECT_DOUBLE_EQ(metric_maa({rots}, {rots}), 1.0);

  BoneRotations off;
  for (int i = 0; i < 16; ++i) {
    Vec3 axis{rng.normal(), rng.normal(), rng.normal()};
    off.push_back(rot::multiply(rots[static_cast<size_t>(i)],
                                rot::axis_angle_to_mat(axis, rot::kPi)));
  }
  EXPECT_NEAR(metric_mpjae({off}, {rots}), rot::kPi, 1e-9);
  EXPECT_NEAR(metric_maa({off}, {rots}), 0.0, 1e-9);

  // Algebraic identity MAA + MPJAE/pi = 1.
  for (int trial = 0; trial < 50; ++trial) {
    BoneRotations a, b;
    for (int i = 0; i < 16; ++i) {
      a.push_back(rot::random_rotation(rng));
      b.push_back(rot::random_rotation(rng));
    }
    double mpjae = metric_mpjae({a}, {b});
    double maa = metric_maa({a}, {b});
    EXPECT_NEAR(maa + mpjae / rot::kPi, 1.0, 1e-15);
  }
}

TEST(losses, nonnegative_and_zero_only_at_perfect) {
  SplitMix64 rng(418);
  Tensor gt = Tensor::uniform({2, 5, 3}, -100, 100, rng);
  Tensor perturbed = Tensor::from_data(gt.shape(), gt.data());
  perturbed.data()[7] += 0.01;
  EXPECT_GT(mpjpe_loss(perturbed, gt).item(), 1e-9);
  EXPECT_DOUBLE_EQ(mpjpe_loss(gt, gt).item(), 0.0);

  std::vector<RotMat3> gts;
  std::vector<Rot6D> same, off;
  for (int i = 0; i < 4; ++i) {
    RotMat3 r = rot::random_rotation(rng);
    gts.push_back(r);
    same.push_back(rot::to_6d(r));
    off.push_back(rot::to_6d(
        rot::multiply(r, rot::axis_angle_to_mat({0, 0, 1}, 0.01))));
  }
  EXPECT_NEAR(idev_loss(pack_6d(same, 1, 4), pack_rotations(gts, 1, 4)).item(),
              0.0, 1e-9);
  EXPECT_GT(idev_loss(pack_6d(off, 1, 4), pack_rotations(gts, 1, 4)).item(),
            1e-9);
}
