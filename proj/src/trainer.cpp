#include "hdteacher/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace hdt {

std::string to_string(StageId id) {
  switch (id) {
    case StageId::s2d: return "2d";
    case StageId::s3d: return "3d";
    case StageId::hybrid: return "hybrid";
    case StageId::supervised3d: return "supervised3d";
  }
  return "?";
}

namespace {

constexpr uint64_t kStreamInit = 0x11;
constexpr uint64_t kStreamStep = 0x22;
constexpr uint64_t kStreamVal = 0x33;
constexpr uint64_t kStreamInfer = 0x44;

uint64_t stage_tag(StageId id) { return 0x100 + static_cast<uint64_t>(id); }

UNetConfig net_config(const RunConfig& c, int spatial_rank, int64_t in_channels,
                      const NetPreset& p) {
  UNetConfig n;
  n.spatial_rank = spatial_rank;
  n.in_channels = in_channels;
  n.num_classes = c.num_classes;
  n.base_features = p.base_features;
  n.depth = p.depth;
  n.teacher_dropout_rate = p.teacher_dropout_rate;
  return n;
}

}  // namespace

HdTeacherState HdTeacherState::init(const RunConfig& config) {
  config.validate();
  HDT_CHECK(config.image_channels == 1, "the synthetic pipeline produces single-channel volumes");
  HdTeacherState st;
  st.config = config;
  Rng rng2 = Rng::derive(config.seed, kStreamInit, 2);
  Rng rng3 = Rng::derive(config.seed, kStreamInit, 3);

  const bool two_d_only =
      config.ablation == Ablation::sdf_2d || config.ablation == Ablation::no_sdf;
  if (config.ablation == Ablation::supervised_3d) {
    st.s3d = DualDecoderNet<float>::make(
        net_config(config, 3, config.image_channels, config.net3d), false, rng3);
    st.has_3d = true;
    st.has_teachers = false;
    return st;
  }

  const UNetConfig c2d = net_config(config, 2, config.image_channels, config.net2d);
  st.s2d = DualDecoderNet<float>::make(c2d, false, rng2);
  st.t2d = DualDecoderNet<float>::make(c2d, true, rng2);
  st.t2d.copy_weights_from(st.s2d);
  st.has_2d = true;
  if (!two_d_only) {
    const UNetConfig c3d =
        net_config(config, 3, config.image_channels + config.num_classes, config.net3d);
    st.s3d = DualDecoderNet<float>::make(c3d, false, rng3);
    st.t3d = DualDecoderNet<float>::make(c3d, true, rng3);
    st.t3d.copy_weights_from(st.s3d);
    st.has_3d = true;
  }
  return st;
}

bool HdTeacherState::stage_done(const std::string& id) const {
  for (const auto& s : completed_stages)
    if (s == id) return true;
  return false;
}

std::vector<NamedParam<float>> HdTeacherState::all_params() {
  std::vector<NamedParam<float>> out;
  auto append = [&out](const char* prefix, DualDecoderNet<float>& net) {
    for (auto& p : net.params()) out.push_back({std::string(prefix) + p.name, p.tensor});
  };
  if (has_2d) {
    append("s2d.", s2d);
    if (has_teachers) append("t2d.", t2d);
  }
  if (has_3d) {
    append("s3d.", s3d);
    if (has_teachers) append("t3d.", t3d);
  }
  return out;
}

void HdTeacherState::save(const std::string& dir) const {
  CheckpointMeta meta;
  meta.completed_stages = completed_stages;
  meta.master_seed = config.seed;
  meta.extra["ablation"] = to_string(config.ablation);
  meta.extra["config"] = config_to_json_text(config);
  auto& self = const_cast<HdTeacherState&>(*this);
  save_checkpoint_files(dir, self.all_params(), meta);
}

HdTeacherState HdTeacherState::load(const std::string& dir, const RunConfig& config) {
  HdTeacherState st = init(config);
  const CheckpointMeta meta = load_checkpoint_files(dir, st.all_params());
  HDT_CHECK(meta.extra.count("ablation") == 0 ||
                meta.extra.at("ablation") == to_string(config.ablation),
            "checkpoint '", dir, "' was trained with ablation '",
            meta.extra.count("ablation") ? meta.extra.at("ablation") : "?",
            "', config says '", to_string(config.ablation), "'");
  st.completed_stages = meta.completed_stages;
  st.frozen_2d = st.stage_done("2d") && !st.stage_done("hybrid");
  if (st.has_2d) st.s2d.set_requires_grad(!st.frozen_2d);
  return st;
}

// ---------------------------------------------------------------------------
// Batch assembly
// ---------------------------------------------------------------------------

namespace {

struct BatchTensors {
  Tensor<float> x;              // [b, 1, spatial...]
  std::vector<uint8_t> labels;  // labeled prefix, flattened
  Tensor<float> sdf;            // [n_lab, C, spatial...]
  int64_t n_lab = 0;
};

int64_t labeled_count(int64_t batch, double fraction) {
  auto n = static_cast<int64_t>(std::lround(static_cast<double>(batch) * fraction));
  return std::clamp<int64_t>(n, 1, batch - 1);
}

// Draws patches (labeled first), augments them, and stacks them into
// tensors. two_d collapses the leading depth-1 patch axis.
BatchTensors assemble_batch(const DataSplit& data, int64_t batch, int64_t n_lab,
                            std::array<int64_t, 3> patch_dims, bool two_d, Rng& rng) {
  HDT_CHECK(!two_d || patch_dims[0] == 1, "2D batches sample depth-1 patches");
  const int64_t pv = patch_dims[0] * patch_dims[1] * patch_dims[2];
  const int C = data.num_classes;
  BatchTensors out;
  out.n_lab = n_lab;
  Shape xshape = two_d ? Shape{batch, 1, patch_dims[1], patch_dims[2]}
                       : Shape{batch, 1, patch_dims[0], patch_dims[1], patch_dims[2]};
  Shape zshape = xshape;
  zshape[0] = n_lab;
  zshape[1] = C;
  out.x = Tensor<float>(xshape);
  out.sdf = Tensor<float>(zshape);
  out.labels.reserve(static_cast<size_t>(n_lab * pv));

  for (int64_t i = 0; i < batch; ++i) {
    const bool labeled = i < n_lab;
    const auto& pool = labeled || data.unlabeled.empty() ? data.labeled : data.unlabeled;
    const auto& vol = pool[static_cast<size_t>(rng.below(static_cast<int64_t>(pool.size())))];
    Patch p = sample_patch(vol, patch_dims, rng);
    augment(p, rng);
    std::copy(p.x.begin(), p.x.end(), out.x.data() + i * pv);
    if (labeled) {
      HDT_CHECK(!p.y.empty() && !p.z.empty(), "labeled sample lacks labels or SDF targets");
      out.labels.insert(out.labels.end(), p.y.begin(), p.y.end());
      std::copy(p.z.begin(), p.z.end(), out.sdf.data() + i * C * pv);
    }
  }
  return out;
}

void check_finite(const LossBreakdown& bd, StageId stage, int64_t step, double lr) {
  const bool ok = std::isfinite(bd.total) && std::isfinite(bd.supervised_seg) &&
                  std::isfinite(bd.supervised_sdf) && std::isfinite(bd.consistency_seg) &&
                  std::isfinite(bd.consistency_sdf);
  if (!ok)
    fail("stage ", to_string(stage), " aborted at step ", step,
         ": non-finite loss (total=", bd.total, ", sup_seg=", bd.supervised_seg,
         ", sup_sdf=", bd.supervised_sdf, ", cons_seg=", bd.consistency_seg,
         ", cons_sdf=", bd.consistency_sdf, ", lr=", lr, ", lambda=", bd.lambda_value, ")");
}

// ---------------------------------------------------------------------------
// Per-stage training steps (forward, losses, SGD, EMA)
// ---------------------------------------------------------------------------

LossBreakdown step_2d(HdTeacherState& st, const StageConfig& cfg, const DataSplit& data,
                      Rng& rng, double lambda, double lr) {
  const std::array<int64_t, 3> slice_dims{1, st.config.patch_dims[1], st.config.patch_dims[2]};
  BatchTensors batch = assemble_batch(data, cfg.batch_2d,
                                      labeled_count(cfg.batch_2d, cfg.labeled_fraction),
                                      slice_dims, true, rng);
  const float sigma = static_cast<float>(cfg.noise_sigma);

  Tape<float> tape;
  StudentOutput<float> out = forward_student(st.s2d, batch.x, sigma, rng);
  McEnsemble<float> ens = forward_teacher_mc(st.t2d, batch.x, cfg.mc_passes, sigma, rng);
  FusedPrediction<float> seg_t = fuse_seg(ens.seg, st.config.num_classes);
  FusedPrediction<float> sdf_t = fuse_sdf(ens.sdf);
  auto res = stage_loss_single(out, batch.labels, batch.sdf, batch.n_lab, &seg_t, &sdf_t,
                               lambda, st.config.sdf_loss_weight);
  tape.backward(res.total);
  auto params = st.s2d.params();
  sgd_step(params, lr);
  ema_update(st.t2d, st.s2d, cfg.ema_tau);
  return res.breakdown;
}

LossBreakdown step_3d(HdTeacherState& st, const StageConfig& cfg, const DataSplit& data,
                      Rng& rng, double lambda, double lr) {
  HDT_CHECK(st.frozen_2d, "3D stage requires the 2D models to be frozen");
  BatchTensors batch = assemble_batch(data, cfg.batch_3d,
                                      labeled_count(cfg.batch_3d, cfg.labeled_fraction),
                                      st.config.patch_dims, false, rng);
  const float sigma = static_cast<float>(cfg.noise_sigma);

  Tensor<float> x2d = reshape_c(batch.x);
  StudentOutput<float> out2d;
  {
    NoGradScope<float> ng;
    out2d = forward_student(st.s2d, x2d, sigma, rng);
  }

  Tape<float> tape;
  StudentOutput<float> out3d = forward_3d_augmented(st.s3d, batch.x, out2d, sigma, rng);
  McEnsemble<float> ens =
      forward_3d_teacher_mc(st.t3d, batch.x, out2d, cfg.mc_passes, sigma, rng);
  FusedPrediction<float> seg_t = fuse_seg(ens.seg, st.config.num_classes);
  FusedPrediction<float> sdf_t = fuse_sdf(ens.sdf);
  auto res = stage_loss_single(out3d, batch.labels, batch.sdf, batch.n_lab, &seg_t, &sdf_t,
                               lambda, st.config.sdf_loss_weight);
  tape.backward(res.total);
  auto params = st.s3d.params();
  sgd_step(params, lr);
  ema_update(st.t3d, st.s3d, cfg.ema_tau);
  return res.breakdown;
}

LossBreakdown step_hybrid(HdTeacherState& st, const StageConfig& cfg, const DataSplit& data,
                          Rng& rng, double lambda, double lr) {
  HDT_CHECK(!st.frozen_2d, "hybrid stage requires the 2D models to be unfrozen");
  BatchTensors batch = assemble_batch(data, cfg.batch_3d,
                                      labeled_count(cfg.batch_3d, cfg.labeled_fraction),
                                      st.config.patch_dims, false, rng);
  const float sigma = static_cast<float>(cfg.noise_sigma);
  const int64_t b = cfg.batch_3d;
  const int64_t depth = st.config.patch_dims[0];
  const int C = st.config.num_classes;

  // the 2D student consumes exactly the slices of this 3D batch
  Tensor<float> x2d = reshape_c(batch.x);
  Tensor<float> sdf2d_target = reshape_c(batch.sdf);  // constant, same flat label order

  Tape<float> tape;
  StudentOutput<float> out2d = forward_student(st.s2d, x2d, sigma, rng);
  StudentOutput<float> out3d = forward_3d_augmented(st.s3d, batch.x, out2d, sigma, rng);

  McEnsemble<float> ens2d = forward_teacher_mc(st.t2d, x2d, cfg.mc_passes, sigma, rng);
  McEnsemble<float> ens3d =
      forward_3d_teacher_mc(st.t3d, batch.x, out2d, cfg.mc_passes, sigma, rng);

  FusedPrediction<float> seg_t2d, sdf_t2d, seg_t3d, sdf_t3d;
  if (st.config.ablation == Ablation::separate_reg) {
    // each student regularized by its own teacher, mapped to volumes
    FusedPrediction<float> seg2 = fuse_seg(ens2d.seg, C);
    FusedPrediction<float> sdf2 = fuse_sdf(ens2d.sdf);
    seg_t2d = {FusedKind::seg, reshape_c_inv(seg2.value, b), reshape_c_inv(seg2.uncertainty, b)};
    sdf_t2d = {FusedKind::sdf, reshape_c_inv(sdf2.value, b), reshape_c_inv(sdf2.uncertainty, b)};
    seg_t3d = fuse_seg(ens3d.seg, C);
    sdf_t3d = fuse_sdf(ens3d.sdf);
  } else {
    McEnsemble<float> stacks = hybrid_concat(ens2d, ens3d, b);
    seg_t3d = fuse_seg(stacks.seg, C);
    sdf_t3d = fuse_sdf(stacks.sdf);
    seg_t2d = seg_t3d;
    sdf_t2d = sdf_t3d;
  }

  auto res = stage_loss_hybrid(out2d, batch.labels, sdf2d_target, batch.n_lab * depth, out3d,
                               batch.labels, batch.sdf, batch.n_lab, seg_t2d, sdf_t2d, seg_t3d,
                               sdf_t3d, b, cfg.alpha, lambda, st.config.sdf_loss_weight);
  tape.backward(res.total);
  auto params = st.s2d.params();
  for (auto& p : st.s3d.params()) params.push_back(p);
  sgd_step(params, lr);
  ema_update(st.t2d, st.s2d, cfg.ema_tau);
  ema_update(st.t3d, st.s3d, cfg.ema_tau);
  return res.breakdown;
}

LossBreakdown step_supervised3d(HdTeacherState& st, const StageConfig& cfg,
                                const DataSplit& data, Rng& rng, double lr) {
  // labeled-only batches, supervised loss only
  BatchTensors batch =
      assemble_batch(data, cfg.batch_3d, cfg.batch_3d, st.config.patch_dims, false, rng);
  const float sigma = static_cast<float>(cfg.noise_sigma);
  Tape<float> tape;
  StudentOutput<float> out = forward_student(st.s3d, batch.x, sigma, rng);
  auto res = stage_loss_single<float>(out, batch.labels, batch.sdf, batch.n_lab, nullptr,
                                      nullptr, 0.0, st.config.sdf_loss_weight);
  tape.backward(res.total);
  auto params = st.s3d.params();
  sgd_step(params, lr);
  return res.breakdown;
}

// ---------------------------------------------------------------------------
// Inference routes
// ---------------------------------------------------------------------------

enum class InferRoute { teacher2d, teacher3d, student3d };

Tensor<float> volume_to_tensor(const VolumeSample& v) {
  return Tensor<float>::from_vector(Shape{1, 1, v.dims[0], v.dims[1], v.dims[2]}, v.intensity);
}

LabelVolume argmax_labels(const Tensor<float>& probs, const VolumeSample& ref) {
  const int64_t C = probs.shape()[1];
  const int64_t vox = ref.voxels();
  LabelVolume out;
  out.dims = ref.dims;
  out.spacing = ref.spacing;
  out.num_classes = static_cast<int>(C);
  out.labels.assign(static_cast<size_t>(vox), 0);
  for (int64_t i = 0; i < vox; ++i) {
    int best = 0;
    float bv = probs.at(i);
    for (int64_t c = 1; c < C; ++c) {
      const float v = probs.at(c * vox + i);
      if (v > bv) {
        bv = v;
        best = static_cast<int>(c);
      }
    }
    out.labels[static_cast<size_t>(i)] = static_cast<uint8_t>(best);
  }
  return out;
}

const StageConfig& infer_stage_config(const HdTeacherState& st) {
  if (st.stage_done("hybrid")) return st.config.stage_hybrid;
  if (st.stage_done("3d") || st.stage_done("supervised3d")) return st.config.stage_3d;
  return st.config.stage_2d;
}

InferenceResult infer_with_route(HdTeacherState& st, const VolumeSample& vol, InferRoute route,
                                 Rng rng, bool hybrid_fusion, const StageConfig& cfg) {
  NoGradScope<float> ng;
  const float sigma = static_cast<float>(cfg.noise_sigma);
  const int C = st.config.num_classes;
  Tensor<float> x3d = volume_to_tensor(vol);
  InferenceResult res;

  if (route == InferRoute::student3d) {
    StudentOutput<float> out = forward_student(st.s3d, x3d, 0.0f, rng);
    res.seg_probs = out.seg_probs;
    res.seg_uncertainty = entropy_map(out.seg_probs, C);
    res.sdf = out.sdf_pred;
    res.sdf_uncertainty = Tensor<float>(out.sdf_pred.shape());
  } else if (route == InferRoute::teacher2d) {
    Tensor<float> x2d = reshape_c(x3d);
    McEnsemble<float> ens = forward_teacher_mc(st.t2d, x2d, cfg.mc_passes, sigma, rng);
    FusedPrediction<float> seg = fuse_seg(ens.seg, C);
    FusedPrediction<float> sdf = fuse_sdf(ens.sdf);
    res.seg_probs = reshape_c_inv(seg.value, 1);
    res.seg_uncertainty = reshape_c_inv(seg.uncertainty, 1);
    res.sdf = reshape_c_inv(sdf.value, 1);
    res.sdf_uncertainty = reshape_c_inv(sdf.uncertainty, 1);
  } else {
    Tensor<float> x2d = reshape_c(x3d);
    StudentOutput<float> out2d = forward_student(st.s2d, x2d, sigma, rng);
    McEnsemble<float> ens3d =
        forward_3d_teacher_mc(st.t3d, x3d, out2d, cfg.mc_passes, sigma, rng);
    if (hybrid_fusion) {
      McEnsemble<float> ens2d = forward_teacher_mc(st.t2d, x2d, cfg.mc_passes, sigma, rng);
      McEnsemble<float> stacks = hybrid_concat(ens2d, ens3d, 1);
      FusedPrediction<float> seg = fuse_seg(stacks.seg, C);
      FusedPrediction<float> sdf = fuse_sdf(stacks.sdf);
      res.seg_probs = seg.value;
      res.seg_uncertainty = seg.uncertainty;
      res.sdf = sdf.value;
      res.sdf_uncertainty = sdf.uncertainty;
    } else {
      FusedPrediction<float> seg = fuse_seg(ens3d.seg, C);
      FusedPrediction<float> sdf = fuse_sdf(ens3d.sdf);
      res.seg_probs = seg.value;
      res.seg_uncertainty = seg.uncertainty;
      res.sdf = sdf.value;
      res.sdf_uncertainty = sdf.uncertainty;
    }
  }
  res.labels = argmax_labels(res.seg_probs, vol);
  return res;
}

InferRoute pick_route(const HdTeacherState& st) {
  HDT_CHECK(!st.completed_stages.empty(), "infer: untrained state (no completed stages)");
  if (st.config.ablation == Ablation::supervised_3d) {
    HDT_CHECK(st.stage_done("supervised3d"), "infer: baseline stage not completed");
    return InferRoute::student3d;
  }
  if (st.has_3d && (st.stage_done("3d") || st.stage_done("hybrid")))
    return InferRoute::teacher3d;
  HDT_CHECK(st.stage_done("2d"), "infer: no trained route available");
  return InferRoute::teacher2d;
}

}  // namespace

InferenceResult infer(HdTeacherState& state, const VolumeSample& volume, uint64_t rng_stream) {
  return infer_with_route(state, volume, pick_route(state),
                          Rng::derive(state.config.seed, kStreamInfer, rng_stream), false,
                          infer_stage_config(state));
}

InferenceResult infer_hybrid(HdTeacherState& state, const VolumeSample& volume,
                             uint64_t rng_stream) {
  HDT_CHECK(state.has_2d && state.has_3d && state.has_teachers,
            "infer_hybrid: needs both mean-teacher networks");
  HDT_CHECK(state.stage_done("3d") || state.stage_done("hybrid"),
            "infer_hybrid: 3D stage not completed");
  return infer_with_route(state, volume, InferRoute::teacher3d,
                          Rng::derive(state.config.seed, kStreamInfer, rng_stream), true,
                          infer_stage_config(state));
}

double evaluate_mean_dice(HdTeacherState& state, const std::vector<VolumeSample>& volumes,
                          uint64_t rng_stream) {
  HDT_CHECK(!volumes.empty(), "evaluate_mean_dice: empty volume list");
  double total = 0.0;
  for (size_t i = 0; i < volumes.size(); ++i) {
    InferenceResult r = infer(state, volumes[i], rng_stream * 1000003 + i);
    total += evaluate_metrics(r.labels, volumes[i].label_volume()).mean_dice;
  }
  return total / static_cast<double>(volumes.size());
}

// ---------------------------------------------------------------------------
// Stage driver
// ---------------------------------------------------------------------------

namespace {

// Validation during a stage uses the route that stage trains.
InferRoute validation_route(StageId stage) {
  switch (stage) {
    case StageId::s2d: return InferRoute::teacher2d;
    case StageId::supervised3d: return InferRoute::student3d;
    default: return InferRoute::teacher3d;
  }
}

void write_csv_header(std::ofstream& out) {
  out << "stage,epoch,steps,lr,lambda,sup_seg,sup_sdf,cons_seg,cons_sdf,total,val_dice\n";
}

void write_csv_row(std::ofstream& out, StageId stage, const EpochRow& row) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), "%s,%lld,%lld,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n",
                to_string(stage).c_str(), static_cast<long long>(row.epoch),
                static_cast<long long>(row.steps_done), row.lr, row.mean_loss.lambda_value,
                row.mean_loss.supervised_seg, row.mean_loss.supervised_sdf,
                row.mean_loss.consistency_seg, row.mean_loss.consistency_sdf,
                row.mean_loss.total, row.val_dice);
  out << buf;
}

}  // namespace

StageReport run_stage(HdTeacherState& state, StageId stage, const DataSplit& data,
                      const std::string& csv_path, const std::string& best_checkpoint_dir) {
  const RunConfig& rc = state.config;
  const StageConfig& cfg = stage == StageId::s2d      ? rc.stage_2d
                           : stage == StageId::hybrid ? rc.stage_hybrid
                                                      : rc.stage_3d;
  cfg.validate("stage " + to_string(stage));
  HDT_CHECK(!state.stage_done(to_string(stage)), "stage '", to_string(stage),
            "' already completed");

  // stage-order and ablation gating, plus freeze transitions
  switch (stage) {
    case StageId::s2d:
      HDT_CHECK(state.has_2d, "2d stage: this configuration has no 2D networks");
      state.t2d.copy_weights_from(state.s2d);
      break;
    case StageId::s3d:
      HDT_CHECK(state.has_2d && state.has_3d, "3d stage: needs both network pairs");
      HDT_CHECK(state.stage_done("2d"), "stage order violation: 3d requires a completed 2d stage");
      state.frozen_2d = true;
      state.s2d.set_requires_grad(false);
      state.t3d.copy_weights_from(state.s3d);
      break;
    case StageId::hybrid:
      HDT_CHECK(state.has_2d && state.has_3d, "hybrid stage: needs both network pairs");
      HDT_CHECK(state.stage_done("3d"), "stage order violation: hybrid requires a completed 3d stage");
      state.frozen_2d = false;
      state.s2d.set_requires_grad(true);
      state.t2d.copy_weights_from(state.s2d);
      state.t3d.copy_weights_from(state.s3d);
      break;
    case StageId::supervised3d:
      HDT_CHECK(rc.ablation == Ablation::supervised_3d,
                "supervised3d stage is only available for the supervised-3d baseline");
      break;
  }

  std::ofstream csv;
  if (!csv_path.empty()) {
    csv.open(csv_path, std::ios::trunc);
    HDT_CHECK(csv.good(), "cannot open CSV log '", csv_path, "'");
    write_csv_header(csv);
  }

  StageReport report;
  report.stage = stage;
  const int64_t i_max = cfg.total_steps();
  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr =
        cfg.initial_lr * std::pow(cfg.lr_decay_factor,
                                  static_cast<double>(epoch / cfg.lr_decay_epochs));
    LossBreakdown accum;
    for (int64_t s = 0; s < cfg.steps_per_epoch; ++s) {
      const int64_t gstep = epoch * cfg.steps_per_epoch + s;
      Rng rng = Rng::derive(rc.seed, kStreamStep ^ stage_tag(stage), gstep);
      const double lambda = warmup_lambda(gstep, i_max);
      LossBreakdown bd;
      switch (stage) {
        case StageId::s2d: bd = step_2d(state, cfg, data, rng, lambda, lr); break;
        case StageId::s3d: bd = step_3d(state, cfg, data, rng, lambda, lr); break;
        case StageId::hybrid: bd = step_hybrid(state, cfg, data, rng, lambda, lr); break;
        case StageId::supervised3d: bd = step_supervised3d(state, cfg, data, rng, lr); break;
      }
      check_finite(bd, stage, gstep, lr);
      accum.supervised_seg += bd.supervised_seg;
      accum.supervised_sdf += bd.supervised_sdf;
      accum.consistency_seg += bd.consistency_seg;
      accum.consistency_sdf += bd.consistency_sdf;
      accum.total += bd.total;
      accum.lambda_value = bd.lambda_value;  // last step's lambda
    }
    const double inv = 1.0 / static_cast<double>(cfg.steps_per_epoch);
    accum.supervised_seg *= inv;
    accum.supervised_sdf *= inv;
    accum.consistency_seg *= inv;
    accum.consistency_sdf *= inv;
    accum.total *= inv;

    EpochRow row;
    row.epoch = epoch;
    row.steps_done = (epoch + 1) * cfg.steps_per_epoch;
    row.lr = lr;
    row.mean_loss = accum;
    {
      double total = 0.0;
      for (size_t i = 0; i < data.val.size(); ++i) {
        Rng vr = Rng::derive(rc.seed, kStreamVal ^ stage_tag(stage),
                             static_cast<uint64_t>(epoch), i);
        InferenceResult r =
            infer_with_route(state, data.val[i], validation_route(stage), vr, false, cfg);
        total += evaluate_metrics(r.labels, data.val[i].label_volume()).mean_dice;
      }
      row.val_dice = data.val.empty() ? 0.0 : total / static_cast<double>(data.val.size());
    }
    report.epochs.push_back(row);
    if (csv.is_open()) write_csv_row(csv, stage, row);

    if (row.val_dice > report.best_val_dice || report.best_epoch < 0) {
      report.best_val_dice = row.val_dice;
      report.best_epoch = epoch;
      if (!best_checkpoint_dir.empty()) {
        // snapshot usable for evaluation: mark this stage as reached
        HdTeacherState& self = state;
        auto saved_stages = self.completed_stages;
        self.completed_stages.push_back(to_string(stage));
        self.save(best_checkpoint_dir);
        self.completed_stages = saved_stages;
      }
    }
  }

  state.completed_stages.push_back(to_string(stage));
  return report;
}

}  // namespace hdt
