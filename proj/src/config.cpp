#include "hdteacher/config.hpp"

#include <fstream>
#include <set>

#include <json.hpp>

using nlohmann::json;

namespace hdt {

void StageConfig::validate(const std::string& where) const {
  HDT_CHECK(epochs >= 1 && steps_per_epoch >= 1, where, ": epochs and steps_per_epoch must be >= 1");
  HDT_CHECK(initial_lr > 0.0, where, ": initial_lr must be > 0");
  HDT_CHECK(lr_decay_factor > 0.0 && lr_decay_factor <= 1.0, where,
            ": lr_decay_factor must be in (0, 1]");
  HDT_CHECK(lr_decay_epochs >= 1, where, ": lr_decay_epochs must be >= 1");
  HDT_CHECK(ema_tau >= 0.0 && ema_tau < 1.0, where, ": ema_tau must be in [0, 1), got ",
            ema_tau, " (the teacher update rate tau)");
  HDT_CHECK(mc_passes >= 1, where, ": mc_passes (K) must be >= 1, got ", mc_passes);
  HDT_CHECK(alpha >= 0.0, where, ": alpha must be >= 0, got ", alpha);
  HDT_CHECK(noise_sigma >= 0.0, where, ": noise_sigma must be >= 0");
  HDT_CHECK(batch_2d >= 2 && batch_3d >= 2, where, ": batch sizes must be >= 2");
  HDT_CHECK(labeled_fraction > 0.0 && labeled_fraction < 1.0, where,
            ": labeled_fraction must be in (0, 1)");
}

std::string to_string(Ablation a) {
  switch (a) {
    case Ablation::hybrid_reg: return "hybrid-reg";
    case Ablation::separate_reg: return "separate-reg";
    case Ablation::sdf_2d: return "2d-sdf";
    case Ablation::no_sdf: return "no-sdf";
    case Ablation::supervised_3d: return "supervised-3d";
  }
  return "hybrid-reg";
}

Ablation ablation_from_string(const std::string& s) {
  if (s == "hybrid-reg" || s == "full") return Ablation::hybrid_reg;
  if (s == "separate-reg") return Ablation::separate_reg;
  if (s == "2d-sdf") return Ablation::sdf_2d;
  if (s == "no-sdf" || s == "2d-reg") return Ablation::no_sdf;
  if (s == "supervised-3d") return Ablation::supervised_3d;
  fail("unknown ablation '", s,
       "' (expected hybrid-reg, separate-reg, 2d-sdf, no-sdf, or supervised-3d)");
}

void RunConfig::validate() const {
  HDT_CHECK(num_classes >= 2, "config: num_classes must be >= 2");
  HDT_CHECK(image_channels >= 1, "config: image_channels must be >= 1");
  HDT_CHECK(sdf_loss_weight >= 0.0, "config: sdf_loss_weight must be >= 0");
  for (int a = 0; a < 3; ++a) {
    HDT_CHECK(patch_dims[a] >= 1 && patch_dims[a] <= synthetic.dims[a],
              "config: patch_dims exceed volume dims");
  }
  stage_2d.validate("stages.2d");
  stage_3d.validate("stages.3d");
  stage_hybrid.validate("stages.hybrid");
  HDT_CHECK(net2d.base_features == net3d.base_features,
            "config: 2D and 3D base_features must match for feature summation, got ",
            net2d.base_features, " and ", net3d.base_features);
  HDT_CHECK(counts.labeled >= 1 && counts.val >= 1 && counts.test >= 1,
            "config: dataset counts must be >= 1");
  HDT_CHECK(counts.unlabeled >= 4 * counts.labeled,
            "config: unlabeled count must satisfy M >= 4N");
}

RunConfig RunConfig::desk_preset() {
  RunConfig c;
  c.seed = 1234;
  c.num_classes = 2;
  c.synthetic.dims = {16, 32, 32};
  c.synthetic.spacing = {0.4, 0.4, 5.0};
  c.synthetic.num_classes = 2;
  c.synthetic.seed = c.seed;
  c.counts = {4, 36, 4, 8};
  c.patch_dims = {16, 32, 32};
  c.net2d = {8, 2, 0.5};
  c.net3d = {8, 2, 0.5};
  for (StageConfig* s : {&c.stage_2d, &c.stage_3d, &c.stage_hybrid}) {
    s->epochs = 5;
    s->steps_per_epoch = 50;
    s->lr_decay_factor = 0.1;
    s->lr_decay_epochs = 2;
    s->ema_tau = 0.99;
    s->mc_passes = 8;
    s->noise_sigma = 0.1;
    s->batch_2d = 16;
    s->batch_3d = 2;
    s->labeled_fraction = 0.5;
    s->alpha = 1.0;  // anisotropic preset
  }
  // desk-scale rates: the toy nets train with plain SGD, which needs a
  // larger step than the full-size configuration
  c.stage_2d.initial_lr = 0.5;
  c.stage_3d.initial_lr = 0.5;
  c.stage_hybrid.initial_lr = 0.05;
  return c;
}

RunConfig RunConfig::paper_preset() {
  RunConfig c = desk_preset();
  c.net2d = {32, 4, 0.5};
  c.net3d = {32, 4, 0.5};
  for (StageConfig* s : {&c.stage_2d, &c.stage_3d, &c.stage_hybrid}) {
    s->epochs = 3000;
    s->steps_per_epoch = 35;
    s->lr_decay_factor = 0.1;
    s->lr_decay_epochs = 1000;
    s->ema_tau = 0.99;
    s->mc_passes = 8;
    s->batch_2d = 32;
    s->batch_3d = 2;
    s->alpha = 1.0;  // anisotropic data; 0.5 for isotropic
  }
  c.stage_2d.initial_lr = 0.1;
  c.stage_3d.initial_lr = 0.1;
  c.stage_hybrid.initial_lr = 0.01;
  return c;
}

namespace {

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  HDT_CHECK(j.is_object(), "config: '", where, "' must be an object");
  for (const auto& [key, value] : j.items())
    HDT_CHECK(allowed.count(key) == 1, "config: unknown key '", where, ".", key, "'");
}

template <typename T>
void get_to(const json& j, const char* key, T& out) {
  if (j.contains(key)) j.at(key).get_to(out);
}

void parse_stage(const json& j, const std::string& where, StageConfig& s) {
  check_keys(j,
             {"epochs", "steps_per_epoch", "initial_lr", "lr_decay_factor", "lr_decay_epochs",
              "ema_tau", "mc_passes", "alpha", "noise_sigma", "batch_2d", "batch_3d",
              "labeled_fraction"},
             where);
  get_to(j, "epochs", s.epochs);
  get_to(j, "steps_per_epoch", s.steps_per_epoch);
  get_to(j, "initial_lr", s.initial_lr);
  get_to(j, "lr_decay_factor", s.lr_decay_factor);
  get_to(j, "lr_decay_epochs", s.lr_decay_epochs);
  get_to(j, "ema_tau", s.ema_tau);
  get_to(j, "mc_passes", s.mc_passes);
  get_to(j, "alpha", s.alpha);
  get_to(j, "noise_sigma", s.noise_sigma);
  get_to(j, "batch_2d", s.batch_2d);
  get_to(j, "batch_3d", s.batch_3d);
  get_to(j, "labeled_fraction", s.labeled_fraction);
}

json stage_to_json(const StageConfig& s) {
  return json{{"epochs", s.epochs},
              {"steps_per_epoch", s.steps_per_epoch},
              {"initial_lr", s.initial_lr},
              {"lr_decay_factor", s.lr_decay_factor},
              {"lr_decay_epochs", s.lr_decay_epochs},
              {"ema_tau", s.ema_tau},
              {"mc_passes", s.mc_passes},
              {"alpha", s.alpha},
              {"noise_sigma", s.noise_sigma},
              {"batch_2d", s.batch_2d},
              {"batch_3d", s.batch_3d},
              {"labeled_fraction", s.labeled_fraction}};
}

void parse_net(const json& j, const std::string& where, NetPreset& n) {
  check_keys(j, {"base_features", "depth", "teacher_dropout_rate"}, where);
  get_to(j, "base_features", n.base_features);
  get_to(j, "depth", n.depth);
  get_to(j, "teacher_dropout_rate", n.teacher_dropout_rate);
}

}  // namespace

RunConfig config_from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail("config is not valid JSON: ", e.what());
  }
  check_keys(j,
             {"seed", "num_classes", "image_channels", "sdf_loss_weight", "ablation", "net2d",
              "net3d", "synthetic", "counts", "patch_dims", "stages"},
             "");
  RunConfig c = RunConfig::desk_preset();
  try {
    get_to(j, "seed", c.seed);
    get_to(j, "num_classes", c.num_classes);
    get_to(j, "image_channels", c.image_channels);
    get_to(j, "sdf_loss_weight", c.sdf_loss_weight);
    if (j.contains("ablation")) c.ablation = ablation_from_string(j.at("ablation"));
    if (j.contains("net2d")) parse_net(j.at("net2d"), "net2d", c.net2d);
    if (j.contains("net3d")) parse_net(j.at("net3d"), "net3d", c.net3d);
    if (j.contains("synthetic")) {
      const json& s = j.at("synthetic");
      check_keys(s, {"dims", "spacing", "contrast", "texture_noise", "lobe_amplitude"},
                 "synthetic");
      if (s.contains("dims"))
        for (int i = 0; i < 3; ++i) c.synthetic.dims[i] = s.at("dims").at(i).get<int64_t>();
      if (s.contains("spacing"))
        for (int i = 0; i < 3; ++i) c.synthetic.spacing[i] = s.at("spacing").at(i).get<double>();
      get_to(s, "contrast", c.synthetic.contrast);
      get_to(s, "texture_noise", c.synthetic.texture_noise);
      get_to(s, "lobe_amplitude", c.synthetic.lobe_amplitude);
    }
    if (j.contains("counts")) {
      const json& s = j.at("counts");
      check_keys(s, {"labeled", "unlabeled", "val", "test"}, "counts");
      get_to(s, "labeled", c.counts.labeled);
      get_to(s, "unlabeled", c.counts.unlabeled);
      get_to(s, "val", c.counts.val);
      get_to(s, "test", c.counts.test);
    }
    if (j.contains("patch_dims"))
      for (int i = 0; i < 3; ++i) c.patch_dims[i] = j.at("patch_dims").at(i).get<int64_t>();
    if (j.contains("stages")) {
      const json& s = j.at("stages");
      check_keys(s, {"2d", "3d", "hybrid"}, "stages");
      if (s.contains("2d")) parse_stage(s.at("2d"), "stages.2d", c.stage_2d);
      if (s.contains("3d")) parse_stage(s.at("3d"), "stages.3d", c.stage_3d);
      if (s.contains("hybrid")) parse_stage(s.at("hybrid"), "stages.hybrid", c.stage_hybrid);
    }
  } catch (const json::exception& e) {
    fail("malformed config: ", e.what());
  }
  c.synthetic.num_classes = c.num_classes;
  c.synthetic.seed = c.seed;
  c.validate();
  return c;
}

std::string config_to_json_text(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["num_classes"] = c.num_classes;
  j["image_channels"] = c.image_channels;
  j["sdf_loss_weight"] = c.sdf_loss_weight;
  j["ablation"] = to_string(c.ablation);
  j["net2d"] = {{"base_features", c.net2d.base_features},
                {"depth", c.net2d.depth},
                {"teacher_dropout_rate", c.net2d.teacher_dropout_rate}};
  j["net3d"] = {{"base_features", c.net3d.base_features},
                {"depth", c.net3d.depth},
                {"teacher_dropout_rate", c.net3d.teacher_dropout_rate}};
  j["synthetic"] = {{"dims", {c.synthetic.dims[0], c.synthetic.dims[1], c.synthetic.dims[2]}},
                    {"spacing",
                     {c.synthetic.spacing[0], c.synthetic.spacing[1], c.synthetic.spacing[2]}},
                    {"contrast", c.synthetic.contrast},
                    {"texture_noise", c.synthetic.texture_noise},
                    {"lobe_amplitude", c.synthetic.lobe_amplitude}};
  j["counts"] = {{"labeled", c.counts.labeled},
                 {"unlabeled", c.counts.unlabeled},
                 {"val", c.counts.val},
                 {"test", c.counts.test}};
  j["patch_dims"] = {c.patch_dims[0], c.patch_dims[1], c.patch_dims[2]};
  j["stages"] = {{"2d", stage_to_json(c.stage_2d)},
                 {"3d", stage_to_json(c.stage_3d)},
                 {"hybrid", stage_to_json(c.stage_hybrid)}};
  return j.dump(2);
}

RunConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  HDT_CHECK(in.good(), "cannot open config file '", path, "'");
  std::string text(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>{});
  return config_from_json_text(text);
}

}  // namespace hdt
