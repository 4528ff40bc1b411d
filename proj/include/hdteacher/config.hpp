#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "hdteacher/data_io.hpp"
#include "hdteacher/networks.hpp"

namespace hdt {

// Hyperparameters of one training stage.
struct StageConfig {
  int64_t epochs = 5;
  int64_t steps_per_epoch = 50;
  double initial_lr = 0.1;
  double lr_decay_factor = 0.1;
  int64_t lr_decay_epochs = 2;  // decay interval, in epochs
  double ema_tau = 0.99;
  int64_t mc_passes = 8;  // K
  double alpha = 1.0;     // 2D-branch weight, hybrid stage only
  double noise_sigma = 0.1;
  int64_t batch_2d = 16;
  int64_t batch_3d = 2;
  double labeled_fraction = 0.5;

  int64_t total_steps() const { return epochs * steps_per_epoch; }
  void validate(const std::string& where) const;
};

// Which parts of the framework train; the last four mirror the ablation
// table shapes, "supervised-3d" is the labeled-only baseline.
enum class Ablation {
  hybrid_reg,    // full framework
  separate_reg,  // all stages, hybrid stage regularized per-teacher
  sdf_2d,        // 2D mean-teacher with the SDF task, 2D stage only
  no_sdf,        // 2D mean-teacher without the SDF task
  supervised_3d, // plain supervised 3D baseline
};

std::string to_string(Ablation a);
Ablation ablation_from_string(const std::string& s);

struct NetPreset {
  int64_t base_features = 8;
  int depth = 2;
  double teacher_dropout_rate = 0.5;
};

struct RunConfig {
  uint64_t seed = 1234;
  int num_classes = 2;
  int64_t image_channels = 1;
  double sdf_loss_weight = 1.0;
  Ablation ablation = Ablation::hybrid_reg;
  NetPreset net2d, net3d;
  SyntheticSpec synthetic;
  DatasetCounts counts;
  std::array<int64_t, 3> patch_dims{16, 32, 32};
  StageConfig stage_2d, stage_3d, stage_hybrid;

  void validate() const;

  // 40 train volumes (4 labeled), 32x32 in-plane, 16 slices, toy nets.
  static RunConfig desk_preset();
  // Verbatim training hyperparameters of the reference setup; not runnable
  // at desk scale (documented in the README).
  static RunConfig paper_preset();
};

// Strict JSON round trip: unknown keys are rejected.
RunConfig config_from_json_text(const std::string& text);
std::string config_to_json_text(const RunConfig& config);
RunConfig load_config_file(const std::string& path);

}  // namespace hdt
