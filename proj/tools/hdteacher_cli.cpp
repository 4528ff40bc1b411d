// hdteacher: synthetic-data generation, stage-wise training, evaluation, and
// uncertainty inspection for the hybrid dual mean-teacher pipeline.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "hdteacher/config.hpp"
#include "hdteacher/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CommonOpts {
  std::string preset = "desk";
  std::string config_path;
  int64_t seed = -1;
  std::string ablation;
};

hdt::RunConfig resolve_config(const CommonOpts& opts) {
  hdt::RunConfig config;
  if (!opts.config_path.empty()) {
    config = hdt::load_config_file(opts.config_path);
  } else if (opts.preset == "desk") {
    config = hdt::RunConfig::desk_preset();
  } else if (opts.preset == "paper") {
    config = hdt::RunConfig::paper_preset();
  } else {
    hdt::fail("unknown preset '", opts.preset, "' (expected desk or paper)");
  }
  if (opts.seed >= 0) {
    config.seed = static_cast<uint64_t>(opts.seed);
    config.synthetic.seed = config.seed;
  }
  if (!opts.ablation.empty()) config.ablation = hdt::ablation_from_string(opts.ablation);
  if (config.ablation == hdt::Ablation::no_sdf) config.sdf_loss_weight = 0.0;
  config.validate();
  return config;
}

void add_common(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("--preset", opts.preset, "configuration preset: desk | paper")
      ->check(CLI::IsMember({"desk", "paper"}));
  cmd->add_option("--config", opts.config_path, "JSON config file (overrides the preset)");
  cmd->add_option("--seed", opts.seed, "override the master seed");
  cmd->add_option("--ablation", opts.ablation,
                  "hybrid-reg | separate-reg | 2d-sdf | no-sdf | supervised-3d");
}

std::vector<hdt::StageId> stages_for(const hdt::RunConfig& config,
                                     const std::string& stages_arg) {
  using hdt::Ablation;
  using hdt::StageId;
  std::vector<StageId> all;
  switch (config.ablation) {
    case Ablation::hybrid_reg:
    case Ablation::separate_reg:
      all = {StageId::s2d, StageId::s3d, StageId::hybrid};
      break;
    case Ablation::sdf_2d:
    case Ablation::no_sdf:
      all = {StageId::s2d};
      break;
    case Ablation::supervised_3d:
      all = {StageId::supervised3d};
      break;
  }
  if (stages_arg.empty()) return all;
  std::vector<StageId> picked;
  std::stringstream ss(stages_arg);
  std::string token;
  while (std::getline(ss, token, ',')) {
    bool found = false;
    for (StageId id : all)
      if (hdt::to_string(id) == token) {
        picked.push_back(id);
        found = true;
      }
    if (!found)
      hdt::fail("stage '", token, "' is not part of the '", hdt::to_string(config.ablation),
                "' schedule");
  }
  return picked;
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

int cmd_gen_data(const CommonOpts& opts, const std::string& out_dir, bool force) {
  hdt::RunConfig config = resolve_config(opts);
  hdt::write_dataset(out_dir, config.synthetic, config.counts, force);
  const auto split = hdt::load_dataset(out_dir);
  std::printf("dataset written to %s: N=%lld labeled, M=%lld unlabeled, %zu val, %zu test\n",
              out_dir.c_str(), static_cast<long long>(split.n_labeled()),
              static_cast<long long>(split.m_unlabeled()), split.val.size(),
              split.test.size());
  return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

int cmd_train(const CommonOpts& opts, const std::string& data_dir, const std::string& out_dir,
              const std::string& stages_arg) {
  hdt::RunConfig config = resolve_config(opts);
  const hdt::DataSplit data = hdt::load_dataset(data_dir);
  HDT_CHECK(data.num_classes == config.num_classes, "dataset has ", data.num_classes,
            " classes, config expects ", config.num_classes);
  for (int a = 0; a < 3; ++a)
    HDT_CHECK(config.patch_dims[a] <= data.dims[a], "patch_dims exceed dataset dims");

  fs::create_directories(fs::path(out_dir) / "logs");
  fs::create_directories(fs::path(out_dir) / "checkpoints");
  {
    std::ofstream cfg_out(fs::path(out_dir) / "config.json");
    cfg_out << hdt::config_to_json_text(config);
  }

  const std::string latest = (fs::path(out_dir) / "checkpoints" / "latest").string();
  hdt::HdTeacherState state = fs::exists(fs::path(latest) / "manifest.json")
                                  ? hdt::HdTeacherState::load(latest, config)
                                  : hdt::HdTeacherState::init(config);

  for (hdt::StageId stage : stages_for(config, stages_arg)) {
    const std::string id = hdt::to_string(stage);
    if (state.stage_done(id)) {
      std::printf("stage %s already completed, skipping\n", id.c_str());
      continue;
    }
    // prerequisite stages must exist in the loaded state
    const std::string csv = (fs::path(out_dir) / "logs" / ("stage_" + id + ".csv")).string();
    const std::string best =
        (fs::path(out_dir) / "checkpoints" / ("best_" + id)).string();
    std::printf("running stage %s (%lld steps)...\n", id.c_str(),
                static_cast<long long>(
                    (stage == hdt::StageId::s2d      ? config.stage_2d
                     : stage == hdt::StageId::hybrid ? config.stage_hybrid
                                                     : config.stage_3d)
                        .total_steps()));
    std::fflush(stdout);
    const hdt::StageReport report = hdt::run_stage(state, stage, data, csv, best);
    state.save((fs::path(out_dir) / "checkpoints" / ("stage_" + id)).string());
    state.save(latest);
    std::printf("stage %s done: best val dice %.4f at epoch %lld (log: %s)\n", id.c_str(),
                report.best_val_dice, static_cast<long long>(report.best_epoch), csv.c_str());
    std::fflush(stdout);
  }
  std::printf("checkpoints under %s\n", (fs::path(out_dir) / "checkpoints").string().c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

hdt::RunConfig config_of_checkpoint(const std::string& checkpoint) {
  const hdt::CheckpointMeta meta = hdt::peek_checkpoint_meta(checkpoint);
  HDT_CHECK(meta.extra.count("config"), "checkpoint '", checkpoint,
            "' carries no embedded config");
  return hdt::config_from_json_text(meta.extra.at("config"));
}

int cmd_eval(const std::string& checkpoint, const std::string& data_dir,
             const std::string& out_csv, bool self_eval) {
  const hdt::DataSplit data = hdt::load_dataset(data_dir);
  HDT_CHECK(!data.test.empty(), "dataset has no test split");

  std::optional<hdt::HdTeacherState> state;
  if (!self_eval) {
    const hdt::RunConfig config = config_of_checkpoint(checkpoint);
    state = hdt::HdTeacherState::load(checkpoint, config);
  }

  std::ofstream csv;
  if (!out_csv.empty()) {
    csv.open(out_csv, std::ios::trunc);
    HDT_CHECK(csv.good(), "cannot open '", out_csv, "' for writing");
    csv << "volume,dice,jaccard,hd95,asd\n";
  }
  std::printf("%-10s %8s %8s %8s %8s\n", "volume", "dice", "jaccard", "hd95", "asd");
  double dice = 0, jac = 0, hd = 0, asd = 0;
  int64_t n_surface = 0;
  for (size_t i = 0; i < data.test.size(); ++i) {
    const hdt::LabelVolume ref = data.test[i].label_volume();
    hdt::MetricReport rep;
    if (self_eval) {
      rep = hdt::evaluate_metrics(ref, ref);
    } else {
      const hdt::InferenceResult r = hdt::infer(*state, data.test[i], i);
      rep = hdt::evaluate_metrics(r.labels, ref);
    }
    dice += rep.mean_dice;
    jac += rep.mean_jaccard;
    if (!std::isnan(rep.mean_hd95)) {
      hd += rep.mean_hd95;
      asd += rep.mean_asd;
      ++n_surface;
    }
    std::printf("test_%03zu   %8.4f %8.4f %8.3f %8.3f\n", i, rep.mean_dice, rep.mean_jaccard,
                rep.mean_hd95, rep.mean_asd);
    if (csv.is_open()) {
      char buf[256];
      std::snprintf(buf, sizeof(buf), "test_%03zu,%.6f,%.6f,%.6f,%.6f\n", i, rep.mean_dice,
                    rep.mean_jaccard, rep.mean_hd95, rep.mean_asd);
      csv << buf;
    }
  }
  const double n = static_cast<double>(data.test.size());
  const double mhd = n_surface ? hd / n_surface : std::nan("");
  const double masd = n_surface ? asd / n_surface : std::nan("");
  std::printf("%-10s %8.4f %8.4f %8.3f %8.3f\n", "mean", dice / n, jac / n, mhd, masd);
  if (csv.is_open()) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "mean,%.6f,%.6f,%.6f,%.6f\n", dice / n, jac / n, mhd, masd);
    csv << buf;
  }
  return 0;
}

// ---------------------------------------------------------------------------
// inspect
// ---------------------------------------------------------------------------

void write_pgm(const std::string& path, const std::vector<uint8_t>& pixels, int64_t width,
               int64_t height) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  HDT_CHECK(out.good(), "cannot open '", path, "'");
  out << "P5\n" << width << " " << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(pixels.data()),
            static_cast<std::streamsize>(pixels.size()));
}

int cmd_inspect(const std::string& checkpoint, const std::string& data_dir, int64_t index,
                const std::string& out_dir) {
  const hdt::RunConfig config = config_of_checkpoint(checkpoint);
  hdt::HdTeacherState state = hdt::HdTeacherState::load(checkpoint, config);
  const hdt::DataSplit data = hdt::load_dataset(data_dir);
  HDT_CHECK(index >= 0 && index < static_cast<int64_t>(data.test.size()), "volume index ",
            index, " out of range [0, ", data.test.size(), ")");
  const hdt::VolumeSample& vol = data.test[static_cast<size_t>(index)];

  const bool hybrid = state.has_2d && state.has_3d && state.has_teachers;
  const hdt::InferenceResult r = hybrid
                                     ? hdt::infer_hybrid(state, vol, static_cast<uint64_t>(index))
                                     : hdt::infer(state, vol, static_cast<uint64_t>(index));
  fs::create_directories(out_dir);

  const int64_t d = vol.dims[0], w = vol.dims[1], h = vol.dims[2];
  const int64_t plane = w * h;
  auto quantize = [](float v) {
    const float c = std::clamp(v, 0.0f, 1.0f);
    return static_cast<uint8_t>(std::lround(c * 255.0f));
  };
  double seg_u_sum = 0, seg_u_max = 0, sdf_u_sum = 0, sdf_u_max = 0;
  for (int64_t j = 0; j < d; ++j) {
    std::vector<uint8_t> seg(plane), useg(plane), usdf(plane);
    for (int64_t i = 0; i < plane; ++i) {
      const int64_t at = j * plane + i;
      seg[i] = static_cast<uint8_t>(
          (255 * r.labels.labels[at]) / std::max(1, config.num_classes - 1));
      useg[i] = quantize(r.seg_uncertainty.at(at));
      // per-location mean variance across SDF channels
      float uv = 0.0f;
      for (int c = 0; c < config.num_classes; ++c)
        uv += r.sdf_uncertainty.at(c * d * plane + at);
      uv /= static_cast<float>(config.num_classes);
      usdf[i] = quantize(uv);
      seg_u_sum += r.seg_uncertainty.at(at);
      seg_u_max = std::max<double>(seg_u_max, r.seg_uncertainty.at(at));
      sdf_u_sum += uv;
      sdf_u_max = std::max<double>(sdf_u_max, uv);
    }
    char name[64];
    std::snprintf(name, sizeof(name), "/slice_%03lld", static_cast<long long>(j));
    write_pgm(out_dir + name + "_seg.pgm", seg, h, w);
    write_pgm(out_dir + name + "_useg.pgm", useg, h, w);
    write_pgm(out_dir + name + "_usdf.pgm", usdf, h, w);
  }
  json stats;
  stats["volume_index"] = index;
  stats["fusion"] = hybrid ? "hybrid-2k" : "single-teacher";
  stats["seg_uncertainty"] = {{"mean", seg_u_sum / (d * plane)}, {"max", seg_u_max}};
  stats["sdf_uncertainty"] = {{"mean", sdf_u_sum / (d * plane)}, {"max", sdf_u_max}};
  std::ofstream(out_dir + "/stats.json") << stats.dump(2) << "\n";
  std::printf("wrote %lld slice triptychs and stats.json to %s\n", static_cast<long long>(d),
              out_dir.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hybrid dual mean-teacher segmentation: train and inspect at desk scale"};
  app.require_subcommand(1);

  CommonOpts gen_opts, train_opts;
  std::string gen_out, train_data, train_out, train_stages;
  bool gen_force = false;

  CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  add_common(gen, gen_opts);
  gen->add_option("--out", gen_out, "output dataset directory")->required();
  gen->add_flag("--force", gen_force, "overwrite a non-empty output directory");

  CLI::App* train = app.add_subcommand("train", "run the staged training procedure");
  add_common(train, train_opts);
  train->add_option("--data", train_data, "dataset directory")->required();
  train->add_option("--out", train_out, "output directory (logs + checkpoints)")->required();
  train->add_option("--stages", train_stages, "comma-separated subset, e.g. 2d,3d");

  std::string eval_ckpt, eval_data, eval_csv;
  bool eval_self = false;
  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint directory");
  eval->add_option("--data", eval_data, "dataset directory")->required();
  eval->add_option("--out", eval_csv, "metrics CSV path");
  eval->add_flag("--self", eval_self, "score the reference labels against themselves");

  std::string ins_ckpt, ins_data, ins_out;
  int64_t ins_index = 0;
  CLI::App* inspect =
      app.add_subcommand("inspect", "export prediction/uncertainty heatmaps for one volume");
  inspect->add_option("--checkpoint", ins_ckpt, "checkpoint directory")->required();
  inspect->add_option("--data", ins_data, "dataset directory")->required();
  inspect->add_option("--index", ins_index, "test-volume index");
  inspect->add_option("--out", ins_out, "output directory for heatmaps")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(gen_opts, gen_out, gen_force);
    if (train->parsed()) return cmd_train(train_opts, train_data, train_out, train_stages);
    if (eval->parsed()) {
      HDT_CHECK(eval_self || !eval_ckpt.empty(), "eval: --checkpoint is required (or --self)");
      return cmd_eval(eval_ckpt, eval_data, eval_csv, eval_self);
    }
    if (inspect->parsed()) return cmd_inspect(ins_ckpt, ins_data, ins_index, ins_out);
  } catch (const std::exception& e) {
    std::cerr << json{{"error", e.what()}}.dump() << "\n";
    return 1;
  }
  return 0;
}
