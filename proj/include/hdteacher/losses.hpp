#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "hdteacher/fusion.hpp"
#include "hdteacher/networks.hpp"

namespace hdt {

struct LossBreakdown {
  double supervised_seg = 0.0;
  double supervised_sdf = 0.0;
  double consistency_seg = 0.0;
  double consistency_sdf = 0.0;
  double total = 0.0;
  double lambda_value = 0.0;
};

// One-hot constant matching probs' [b, C, spatial...] layout.
template <typename T>
Tensor<T> one_hot_like(const Tensor<T>& probs, const std::vector<uint8_t>& labels) {
  const int64_t batch = probs.shape()[0], classes = probs.shape()[1];
  const int64_t inner = probs.numel() / (batch * classes);
  HDT_CHECK(static_cast<int64_t>(labels.size()) == batch * inner,
            "one_hot_like: label count ", labels.size(), " does not match probs ",
            shape_str(probs.shape()));
  Tensor<T> y(probs.shape());
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t i = 0; i < inner; ++i) {
      const uint8_t l = labels[b * inner + i];
      HDT_CHECK(l < classes, "one_hot_like: label ", int(l), " >= num_classes ", classes);
      y.at((b * classes + l) * inner + i) = T(1);
    }
  return y;
}

// 1 - mean over classes of (2*sum(p*y) + eps) / (sum(p) + sum(y) + eps),
// sums pooled over everything but the class axis. Background included.
template <typename T>
Tensor<T> dice_loss(const Tensor<T>& probs, const std::vector<uint8_t>& labels,
                    double eps = 1e-5) {
  const int64_t classes = probs.shape()[1];
  Tensor<T> y = one_hot_like(probs, labels);
  Tensor<T> inter = sum_per_channel(mul(probs, y));
  Tensor<T> psum = sum_per_channel(probs);
  Tensor<T> ysum = sum_per_channel(y);  // constant
  Tensor<T> num = add_scalar(mul_scalar(inter, T(2)), static_cast<T>(eps));
  Tensor<T> den = add_scalar(add(psum, ysum), static_cast<T>(eps));
  Tensor<T> per_class = div(num, den);
  return add_scalar(neg(mul_scalar(sum_all(per_class), T(1) / static_cast<T>(classes))), T(1));
}

template <typename T>
Tensor<T> mse_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  return mean_all(square(sub(pred, target)));
}

template <typename T>
struct SupervisedLoss {
  Tensor<T> seg;  // mean per-sample Dice loss
  Tensor<T> sdf;  // mean per-sample MSE
};

// Mean over the labeled batch of Dice + MSE, sample by sample.
template <typename T>
SupervisedLoss<T> supervised_loss(const Tensor<T>& seg_probs,
                                  const std::vector<uint8_t>& labels, const Tensor<T>& sdf_pred,
                                  const Tensor<T>& sdf_target, int64_t num_labeled) {
  HDT_CHECK(num_labeled >= 1, "supervised_loss: called with zero labeled samples");
  HDT_CHECK(seg_probs.shape()[0] >= num_labeled && sdf_pred.shape()[0] >= num_labeled,
            "supervised_loss: batch smaller than num_labeled");
  Shape expect = sdf_pred.shape();
  expect[0] = num_labeled;
  HDT_CHECK(sdf_target.shape() == expect, "supervised_loss: sdf target shape ",
            shape_str(sdf_target.shape()), " does not match ", shape_str(expect));
  const int64_t inner = seg_probs.numel() / (seg_probs.shape()[0] * seg_probs.shape()[1]);
  Tensor<T> seg_total(Shape{1}), sdf_total(Shape{1});
  for (int64_t i = 0; i < num_labeled; ++i) {
    Tensor<T> p = narrow_batch(seg_probs, i, 1);
    std::vector<uint8_t> sample_labels(labels.begin() + i * inner,
                                       labels.begin() + (i + 1) * inner);
    seg_total = add(seg_total, dice_loss(p, sample_labels));
    Tensor<T> z = narrow_batch(sdf_pred, i, 1);
    Tensor<T> zt = narrow_batch(sdf_target, i, 1);
    sdf_total = add(sdf_total, mse_loss(z, zt));
  }
  const T inv = T(1) / static_cast<T>(num_labeled);
  return {mul_scalar(seg_total, inv), mul_scalar(sdf_total, inv)};
}

// Mean over all elements of exp(-U) * (student - target)^2. The target and
// uncertainty come from teacher fusion and carry no gradients; U broadcasts
// over the class axis when it has a singleton channel.
template <typename T>
Tensor<T> consistency_term(const Tensor<T>& student, const Tensor<T>& target,
                           const Tensor<T>& uncertainty) {
  HDT_CHECK(!target.tracked() && !uncertainty.tracked(),
            "consistency_term: target/uncertainty must be gradient-free");
  check_same_shape(student, target, "consistency_term");
  Tensor<T> w(uncertainty.shape());
  for (int64_t i = 0; i < w.numel(); ++i) w.at(i) = std::exp(-uncertainty.at(i));
  return mean_all(scale_by_map(square(sub(student, target)), w));
}

// Seg + SDF consistency between a student pass and fused teacher targets.
template <typename T>
struct ConsistencyLoss {
  Tensor<T> seg;
  Tensor<T> sdf;
};

template <typename T>
ConsistencyLoss<T> consistency_loss(const StudentOutput<T>& student,
                                    const FusedPrediction<T>& seg_target,
                                    const FusedPrediction<T>& sdf_target) {
  HDT_CHECK(seg_target.kind == FusedKind::seg && sdf_target.kind == FusedKind::sdf,
            "consistency_loss: fused prediction kinds are swapped");
  return {consistency_term(student.seg_probs, seg_target.value, seg_target.uncertainty),
          consistency_term(student.sdf_pred, sdf_target.value, sdf_target.uncertainty)};
}

// Gaussian warm-up 0.1 * exp(-5 (1 - i/i_max)^2); clamped to 0.1 past i_max.
inline double warmup_lambda(int64_t step, int64_t max_steps) {
  HDT_CHECK(step >= 0, "warmup_lambda: negative step");
  if (max_steps <= 0 || step >= max_steps) return 0.1;
  const double r = 1.0 - static_cast<double>(step) / static_cast<double>(max_steps);
  return 0.1 * std::exp(-5.0 * r * r);
}

template <typename T>
struct StageLossResult {
  LossBreakdown breakdown;
  Tensor<T> total;
};

// Loss for the 2D and 3D stages (Dice + MSE on the labeled prefix plus
// lambda-weighted uncertainty-attenuated consistency on the whole batch).
// sdf_weight scales both SDF terms; the "no-sdf" ablation sets it to 0.
template <typename T>
StageLossResult<T> stage_loss_single(const StudentOutput<T>& student,
                                     const std::vector<uint8_t>& labels,
                                     const Tensor<T>& sdf_target, int64_t num_labeled,
                                     const FusedPrediction<T>* seg_target,
                                     const FusedPrediction<T>* sdf_target_fused, double lambda,
                                     double sdf_weight = 1.0) {
  SupervisedLoss<T> sup =
      supervised_loss(student.seg_probs, labels, student.sdf_pred, sdf_target, num_labeled);
  Tensor<T> total = add(sup.seg, mul_scalar(sup.sdf, static_cast<T>(sdf_weight)));
  LossBreakdown bd;
  bd.lambda_value = lambda;
  bd.supervised_seg = sup.seg.scalar();
  bd.supervised_sdf = sdf_weight * sup.sdf.scalar();
  if (lambda != 0.0) {
    HDT_CHECK(seg_target && sdf_target_fused,
              "stage_loss: consistency targets missing for lambda > 0");
    ConsistencyLoss<T> cons = consistency_loss(student, *seg_target, *sdf_target_fused);
    bd.consistency_seg = cons.seg.scalar();
    bd.consistency_sdf = sdf_weight * cons.sdf.scalar();
    Tensor<T> cl = add(cons.seg, mul_scalar(cons.sdf, static_cast<T>(sdf_weight)));
    total = add(total, mul_scalar(cl, static_cast<T>(lambda)));
  }
  bd.total = bd.supervised_seg + bd.supervised_sdf +
             lambda * (bd.consistency_seg + bd.consistency_sdf);
  return {bd, total};
}

// Hybrid-stage loss: L_h = L_h^3d + alpha * L_h^2d. Each branch pairs its
// supervised loss with consistency against the given (usually hybrid) fused
// targets; the 2D student outputs are compared in volumetric layout.
template <typename T>
StageLossResult<T> stage_loss_hybrid(
    const StudentOutput<T>& out2d, const std::vector<uint8_t>& labels2d,
    const Tensor<T>& sdf_target2d, int64_t labeled_slices, const StudentOutput<T>& out3d,
    const std::vector<uint8_t>& labels3d, const Tensor<T>& sdf_target3d,
    int64_t labeled_volumes, const FusedPrediction<T>& seg_target2d,
    const FusedPrediction<T>& sdf_target2d_fused, const FusedPrediction<T>& seg_target3d,
    const FusedPrediction<T>& sdf_target3d_fused, int64_t volume_batch, double alpha,
    double lambda, double sdf_weight = 1.0) {
  HDT_CHECK(alpha >= 0.0, "stage_loss_hybrid: alpha must be >= 0");

  SupervisedLoss<T> sup2d =
      supervised_loss(out2d.seg_probs, labels2d, out2d.sdf_pred, sdf_target2d, labeled_slices);
  SupervisedLoss<T> sup3d =
      supervised_loss(out3d.seg_probs, labels3d, out3d.sdf_pred, sdf_target3d, labeled_volumes);

  // 2D student predictions mapped to volumes for cross-dimension consistency.
  StudentOutput<T> out2d_vol;
  out2d_vol.seg_probs = reshape_batch_to_slices(out2d.seg_probs, volume_batch);
  out2d_vol.sdf_pred = reshape_batch_to_slices(out2d.sdf_pred, volume_batch);
  ConsistencyLoss<T> cons2d = consistency_loss(out2d_vol, seg_target2d, sdf_target2d_fused);
  ConsistencyLoss<T> cons3d = consistency_loss(out3d, seg_target3d, sdf_target3d_fused);

  const T w = static_cast<T>(sdf_weight);
  Tensor<T> l2d = add(add(sup2d.seg, mul_scalar(sup2d.sdf, w)),
                      mul_scalar(add(cons2d.seg, mul_scalar(cons2d.sdf, w)),
                                 static_cast<T>(lambda)));
  Tensor<T> l3d = add(add(sup3d.seg, mul_scalar(sup3d.sdf, w)),
                      mul_scalar(add(cons3d.seg, mul_scalar(cons3d.sdf, w)),
                                 static_cast<T>(lambda)));
  Tensor<T> total = add(l3d, mul_scalar(l2d, static_cast<T>(alpha)));

  LossBreakdown bd;
  bd.lambda_value = lambda;
  bd.supervised_seg = sup3d.seg.scalar() + alpha * sup2d.seg.scalar();
  bd.supervised_sdf = sdf_weight * (sup3d.sdf.scalar() + alpha * sup2d.sdf.scalar());
  bd.consistency_seg = cons3d.seg.scalar() + alpha * cons2d.seg.scalar();
  bd.consistency_sdf = sdf_weight * (cons3d.sdf.scalar() + alpha * cons2d.sdf.scalar());
  bd.total = bd.supervised_seg + bd.supervised_sdf +
             lambda * (bd.consistency_seg + bd.consistency_sdf);
  return {bd, total};
}

}  // namespace hdt
