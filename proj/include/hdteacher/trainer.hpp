#pragma once

#include <optional>
#include <string>
#include <vector>

#include "hdteacher/config.hpp"
#include "hdteacher/data_io.hpp"
#include "hdteacher/losses.hpp"
#include "hdteacher/metrics.hpp"

namespace hdt {

// Spec-named aliases for the batch/depth reshaping C and its inverse.
template <typename T>
Tensor<T> reshape_c(const Tensor<T>& volume) {
  return reshape_slices_to_batch(volume);
}
template <typename T>
Tensor<T> reshape_c_inv(const Tensor<T>& slices, int64_t volume_batch) {
  return reshape_batch_to_slices(slices, volume_batch);
}

// theta_t <- tau * theta_t + (1 - tau) * theta_s for every parameter pair.
template <typename T>
void ema_update(DualDecoderNet<T>& teacher, DualDecoderNet<T>& student, double tau) {
  HDT_CHECK(tau >= 0.0 && tau < 1.0, "ema_update: tau must be in [0, 1)");
  auto tp = teacher.params();
  auto sp = student.params();
  HDT_CHECK(tp.size() == sp.size(), "ema_update: parameter count mismatch");
  const T t = static_cast<T>(tau), s = static_cast<T>(1.0 - tau);
  for (size_t i = 0; i < tp.size(); ++i) {
    HDT_CHECK(tp[i].tensor.shape() == sp[i].tensor.shape(),
              "ema_update: shape mismatch for '", tp[i].name, "': ",
              shape_str(tp[i].tensor.shape()), " vs ", shape_str(sp[i].tensor.shape()));
    T* td = tp[i].tensor.data();
    const T* sd = sp[i].tensor.data();
    for (int64_t k = 0; k < tp[i].tensor.numel(); ++k) td[k] = t * td[k] + s * sd[k];
  }
}

enum class StageId { s2d, s3d, hybrid, supervised3d };
std::string to_string(StageId id);

struct EpochRow {
  int64_t epoch = 0;
  int64_t steps_done = 0;  // cumulative steps in this stage
  double lr = 0.0;
  LossBreakdown mean_loss;  // averaged over the epoch's steps
  double val_dice = 0.0;
};

struct StageReport {
  StageId stage;
  std::vector<EpochRow> epochs;
  double best_val_dice = 0.0;
  int64_t best_epoch = -1;
};

// The four networks plus training cursors. Which nets exist depends on the
// ablation (the supervised baseline holds only a standalone 3D student).
class HdTeacherState {
 public:
  RunConfig config;
  DualDecoderNet<float> s2d, t2d, s3d, t3d;
  bool has_2d = false;
  bool has_3d = false;
  bool has_teachers = true;
  bool frozen_2d = false;
  std::vector<std::string> completed_stages;

  static HdTeacherState init(const RunConfig& config);

  bool stage_done(const std::string& id) const;
  std::vector<NamedParam<float>> all_params();  // names prefixed s2d./t2d./...

  void save(const std::string& dir) const;
  static HdTeacherState load(const std::string& dir, const RunConfig& config);
};

// Runs one stage of the training procedure (2d -> 3d -> hybrid, or the
// supervised baseline), appending per-epoch rows to csv_path when given.
// Stage-order violations and non-finite losses are errors.
StageReport run_stage(HdTeacherState& state, StageId stage, const DataSplit& data,
                      const std::string& csv_path = "",
                      const std::string& best_checkpoint_dir = "");

struct InferenceResult {
  LabelVolume labels;
  Tensor<float> seg_probs;        // fused, [1, C, ...]
  Tensor<float> seg_uncertainty;  // entropy map, [1, 1, ...]
  Tensor<float> sdf;              // fused SDF
  Tensor<float> sdf_uncertainty;  // variance map
};

// Prediction route: the 3D teacher's MC ensemble (augmented by the 2D
// student) fused over K members; for 2D-only ablations the 2D teacher per
// slice; for the baseline the plain student forward. Deterministic for a
// fixed rng_stream.
InferenceResult infer(HdTeacherState& state, const VolumeSample& volume, uint64_t rng_stream);

// Diagnostic route: the 2K hybrid fusion of both teachers' ensembles,
// yielding the hybrid prediction and uncertainty maps.
InferenceResult infer_hybrid(HdTeacherState& state, const VolumeSample& volume,
                             uint64_t rng_stream);

// Mean foreground Dice of `infer` over a list of reference volumes.
double evaluate_mean_dice(HdTeacherState& state, const std::vector<VolumeSample>& volumes,
                          uint64_t rng_stream);

}  // namespace hdt
