#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "poselift/common.hpp"
#include "poselift/config.hpp"
#include "poselift/rotation.hpp"
#include "poselift/tensor.hpp"

namespace poselift {

using Joints3d = std::vector<Vec3>;
using BoneRotations = std::vector<RotMat3>;

// ---------------------------------------------------------------------------
// Differentiable 6D -> rotation matrix recovery (Gram-Schmidt composite).
// ---------------------------------------------------------------------------

// v: (..., 6) -> (..., 3, 3). Degenerate rows (near-zero first column or
// near-parallel columns) are replaced by a gradient-stopped identity and
// counted on rot::degeneracy_counter(), so training batches survive.
inline Tensor rot6d_to_matrix(const Tensor& v) {
  if (v.rank() < 1 || v.shape().back() != 6)
    throw shape_error("rot6d_to_matrix: expected last dim 6, got " +
                      detail::shape_str(v.shape()));
  int64_t lead = v.numel() / 6;
  Tensor flat = reshape(v, {lead, 6});

  // Data-level degeneracy scan; the guard never participates in gradients.
  std::vector<int64_t> degenerate;
  for (int64_t i = 0; i < lead; ++i) {
    const double* p = flat.data().data() + i * 6;
    double n1 = std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]);
    if (n1 < rot::kDegenerateEps) {
      degenerate.push_back(i);
      continue;
    }
    double d = (p[0] * p[3] + p[1] * p[4] + p[2] * p[5]) / (n1 * n1);
    double ux = p[3] - d * p[0], uy = p[4] - d * p[1], uz = p[5] - d * p[2];
    if (std::sqrt(ux * ux + uy * uy + uz * uz) < rot::kDegenerateEps)
      degenerate.push_back(i);
  }
  if (!degenerate.empty()) {
    rot::degeneracy_counter().fetch_add(degenerate.size());
    Tensor keep = Tensor::full({lead, 1}, 1.0);
    Tensor fill = Tensor::zeros({lead, 6});
    for (int64_t i : degenerate) {
      keep.data()[static_cast<size_t>(i)] = 0.0;
      double* row = fill.data().data() + i * 6;
      row[0] = 1.0;
      row[4] = 1.0;
    }
    flat = add(mul(flat, keep), fill);
  }

  Tensor r1 = slice_last(flat, 0, 3);
  Tensor r2 = slice_last(flat, 3, 3);
  Tensor c1 = div(r1, sqrt(sum_axis(mul(r1, r1), -1, true)));
  Tensor d = sum_axis(mul(c1, r2), -1, true);
  Tensor u2 = sub(r2, mul(d, c1));
  Tensor c2 = div(u2, sqrt(sum_axis(mul(u2, u2), -1, true)));

  auto comp = [](const Tensor& t, int64_t i) { return slice_last(t, i, 1); };
  Tensor c3 = concat({
      sub(mul(comp(c1, 1), comp(c2, 2)), mul(comp(c1, 2), comp(c2, 1))),
      sub(mul(comp(c1, 2), comp(c2, 0)), mul(comp(c1, 0), comp(c2, 2))),
      sub(mul(comp(c1, 0), comp(c2, 1)), mul(comp(c1, 1), comp(c2, 0))),
  });

  // Rows c1,c2,c3 form Rᵀ; transpose to put them in the columns.
  Tensor rt = reshape(concat({c1, c2, c3}), {lead, 3, 3});
  std::vector<int64_t> out_shape(v.shape().begin(), v.shape().end() - 1);
  out_shape.push_back(3);
  out_shape.push_back(3);
  return reshape(transpose(rt), out_shape);
}

// ---------------------------------------------------------------------------
// Training losses.
// ---------------------------------------------------------------------------

// Mean over batch and joints of SQUARED Euclidean distance (the metric
// below is the unsquared variant).
inline Tensor mpjpe_loss(const Tensor& pred, const Tensor& gt) {
  if (pred.shape() != gt.shape())
    throw shape_error("mpjpe_loss: pred " + detail::shape_str(pred.shape()) +
                      " vs gt " + detail::shape_str(gt.shape()));
  if (pred.shape().back() != 3)
    throw shape_error("mpjpe_loss: expected last dim 3");
  Tensor d = sub(pred, gt);
  return mean_all(sum_axis(mul(d, d), -1, false));
}

// Mean over bones of ‖I − R_gtᵀ R_pred‖_F, with R_pred recovered from 6D.
inline Tensor idev_loss(const Tensor& rot6d_pred, const Tensor& rot_gt) {
  Tensor r = rot6d_to_matrix(rot6d_pred);
  if (r.shape() != rot_gt.shape())
    throw shape_error("idev_loss: rotations " + detail::shape_str(r.shape()) +
                      " vs gt " + detail::shape_str(rot_gt.shape()));
  Tensor m = matmul(transpose(rot_gt), r);
  Tensor eye = Tensor::from_data({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tensor d = sub(eye, m);
  Tensor fro = sqrt(sum_axis(sum_axis(mul(d, d), -1, false), -1, false));
  return mean_all(fro);
}

// Mean over bones of ‖R_pred·x_pred − R_gt·x_gt‖₁ (vectors rotated by the
// predicted vs ground-truth rotations, L1 norm).
inline Tensor ploss(const Tensor& rot6d_pred, const Tensor& rot_gt,
                    const Tensor& x_pred, const Tensor& x_gt) {
  Tensor r = rot6d_to_matrix(rot6d_pred);
  if (x_pred.shape() != x_gt.shape())
    throw shape_error("ploss: x_pred " + detail::shape_str(x_pred.shape()) +
                      " vs x_gt " + detail::shape_str(x_gt.shape()));
  std::vector<int64_t> col_shape = x_pred.shape();
  col_shape.push_back(1);
  Tensor a = matmul(r, reshape(x_pred, col_shape));
  Tensor b = matmul(rot_gt, reshape(x_gt, col_shape));
  Tensor l1 = sum_axis(sum_axis(abs(sub(a, b)), -1, false), -1, false);
  return mean_all(l1);
}

struct LossTargets {
  Tensor joints3d;    // (B, Nv, 3) root-relative ground truth, mm
  Tensor rotations;   // (B, Ne, 3, 3) parent-relative ground truth
  Tensor sel_child;   // (Ne, Nv) gather matrix selecting each bone's child joint
  Tensor bone_units;  // (B, Ne, 3) rest-pose unit bone vectors (ploss alt mode)
};

struct LossValue {
  Tensor total;
  Tensor position_term;
  Tensor angle_term;
  double lambda = 0.0;
};

// Dispatches on the configured loss; total = position + lambda * angle, with
// the inactive term pinned to zero.
inline LossValue combined_loss(const Tensor& pos3d_pred, const Tensor& rot6d_pred,
                               const LossTargets& tgt, const ModelConfig& cfg) {
  LossValue lv;
  lv.lambda = cfg.lambda;
  Tensor zero = Tensor::scalar(0.0);
  switch (cfg.loss) {
    case LossKind::position_only:
      lv.position_term = mpjpe_loss(pos3d_pred, tgt.joints3d);
      lv.angle_term = zero;
      break;
    case LossKind::orientation_only:
      lv.position_term = zero;
      lv.angle_term = idev_loss(rot6d_pred, tgt.rotations);
      break;
    case LossKind::idev:
      lv.position_term = mpjpe_loss(pos3d_pred, tgt.joints3d);
      lv.angle_term = idev_loss(rot6d_pred, tgt.rotations);
      break;
    case LossKind::ploss: {
      lv.position_term = mpjpe_loss(pos3d_pred, tgt.joints3d);
      if (cfg.ploss_bone_vector) {
        lv.angle_term =
            ploss(rot6d_pred, tgt.rotations, tgt.bone_units, tgt.bone_units);
      } else {
        Tensor x_pred = matmul(tgt.sel_child, pos3d_pred);
        Tensor x_gt = matmul(tgt.sel_child, tgt.joints3d);
        lv.angle_term = ploss(rot6d_pred, tgt.rotations, x_pred, x_gt);
      }
      break;
    }
  }
  lv.total = add(lv.position_term, scale(lv.angle_term, cfg.lambda));
  return lv;
}

// ---------------------------------------------------------------------------
// Evaluation metrics (plain arithmetic, no tape).
// ---------------------------------------------------------------------------

// Mean per-joint Euclidean distance in input units (millimeters here).
inline double metric_mpjpe_p1(const std::vector<Joints3d>& pred,
                              const std::vector<Joints3d>& gt) {
  if (pred.size() != gt.size() || pred.empty())
    throw shape_error("metric_mpjpe_p1: sample count mismatch");
  double total = 0.0;
  size_t count = 0;
  for (size_t s = 0; s < pred.size(); ++s) {
    if (pred[s].size() != gt[s].size())
      throw shape_error("metric_mpjpe_p1: joint count mismatch at sample " +
                        std::to_string(s));
    for (size_t j = 0; j < pred[s].size(); ++j) {
      double dx = pred[s][j][0] - gt[s][j][0];
      double dy = pred[s][j][1] - gt[s][j][1];
      double dz = pred[s][j][2] - gt[s][j][2];
      total += std::sqrt(dx * dx + dy * dy + dz * dz);
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

// Optimal similarity alignment (rotation + translation, uniform scale when
// with_scale) of pred onto gt, via 3x3 cross-covariance SVD with reflection
// correction.
inline Joints3d procrustes_align(const Joints3d& pred, const Joints3d& gt,
                                 bool with_scale = true) {
  size_t n = pred.size();
  if (n != gt.size() || n < 3)
    throw numeric_error("procrustes_align: need >= 3 paired joints");
  Eigen::Vector3d mu_p = Eigen::Vector3d::Zero();
  Eigen::Vector3d mu_g = Eigen::Vector3d::Zero();
  for (size_t i = 0; i < n; ++i) {
    mu_p += Eigen::Vector3d(pred[i][0], pred[i][1], pred[i][2]);
    mu_g += Eigen::Vector3d(gt[i][0], gt[i][1], gt[i][2]);
  }
  mu_p /= static_cast<double>(n);
  mu_g /= static_cast<double>(n);

  Eigen::Matrix3d h = Eigen::Matrix3d::Zero();
  double var_p = 0.0;
  for (size_t i = 0; i < n; ++i) {
    Eigen::Vector3d p = Eigen::Vector3d(pred[i][0], pred[i][1], pred[i][2]) - mu_p;
    Eigen::Vector3d g = Eigen::Vector3d(gt[i][0], gt[i][1], gt[i][2]) - mu_g;
    h += p * g.transpose();
    var_p += p.squaredNorm();
  }
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Vector3d sing = svd.singularValues();
  if (sing(1) <= 1e-12 * std::max(1.0, sing(0)))
    throw numeric_error("procrustes_align: joint configuration is rank-deficient");
  double d = (svd.matrixV() * svd.matrixU().transpose()).determinant() < 0.0 ? -1.0
                                                                             : 1.0;
  Eigen::Matrix3d corr = Eigen::Vector3d(1, 1, d).asDiagonal();
  Eigen::Matrix3d rot = svd.matrixV() * corr * svd.matrixU().transpose();
  double s = 1.0;
  if (with_scale) {
    if (var_p <= 0.0)
      throw numeric_error("procrustes_align: degenerate prediction spread");
    s = (sing(0) + sing(1) + d * sing(2)) / var_p;
  }
  Eigen::Vector3d t = mu_g - s * rot * mu_p;

  Joints3d aligned(n);
  for (size_t i = 0; i < n; ++i) {
    Eigen::Vector3d p(pred[i][0], pred[i][1], pred[i][2]);
    Eigen::Vector3d q = s * rot * p + t;
    aligned[i] = {q(0), q(1), q(2)};
  }
  return aligned;
}

// P1 after per-sample Procrustes alignment.
inline double metric_mpjpe_p2(const std::vector<Joints3d>& pred,
                              const std::vector<Joints3d>& gt,
                              bool with_scale = true) {
  if (pred.size() != gt.size() || pred.empty())
    throw shape_error("metric_mpjpe_p2: sample count mismatch");
  double total = 0.0;
  for (size_t s = 0; s < pred.size(); ++s)
    total += metric_mpjpe_p1({procrustes_align(pred[s], gt[s], with_scale)},
                             {gt[s]});
  return total / static_cast<double>(pred.size());
}

// Mean geodesic distance over all bones, radians in [0, pi]. The inputs are
// the 16 parent-relative bone rotations; the root's global orientation has
// no bone and is therefore excluded by construction.
inline double metric_mpjae(const std::vector<BoneRotations>& pred,
                           const std::vector<BoneRotations>& gt) {
  if (pred.size() != gt.size() || pred.empty())
    throw shape_error("metric_mpjae: sample count mismatch");
  double total = 0.0;
  size_t count = 0;
  for (size_t s = 0; s < pred.size(); ++s) {
    if (pred[s].size() != gt[s].size())
      throw shape_error("metric_mpjae: bone count mismatch at sample " +
                        std::to_string(s));
    for (size_t b = 0; b < pred[s].size(); ++b) {
      total += rot::geodesic(pred[s][b], gt[s][b]);
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

// Accuracy complement, stored as a fraction; the CLI reports it x100.
inline double metric_maa(const std::vector<BoneRotations>& pred,
                         const std::vector<BoneRotations>& gt) {
  return 1.0 - metric_mpjae(pred, gt) / rot::kPi;
}

}  // namespace poselift
