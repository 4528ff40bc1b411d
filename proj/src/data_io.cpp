#include "hdteacher/data_io.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace hdt {

// ---------------------------------------------------------------------------
// Volume files
// ---------------------------------------------------------------------------

namespace {

json header_to_json(const VolumeHeader& h) {
  return json{{"dims", {h.dims[0], h.dims[1], h.dims[2]}},
              {"spacing", {h.spacing[0], h.spacing[1], h.spacing[2]}},
              {"dtype", h.dtype},
              {"num_classes", h.num_classes}};
}

VolumeHeader header_from_json(const json& j, const std::string& where) {
  VolumeHeader h;
  try {
    for (int i = 0; i < 3; ++i) {
      h.dims[i] = j.at("dims").at(i).get<int64_t>();
      h.spacing[i] = j.at("spacing").at(i).get<double>();
    }
    h.dtype = j.at("dtype").get<std::string>();
    h.num_classes = j.at("num_classes").get<int>();
  } catch (const json::exception& e) {
    fail("malformed volume header ", where, ": ", e.what());
  }
  for (int i = 0; i < 3; ++i)
    HDT_CHECK(h.dims[i] > 0, "volume header ", where, " has non-positive dims");
  HDT_CHECK(h.dtype == "f32le" || h.dtype == "u8", "volume header ", where,
            " has unknown dtype '", h.dtype, "'");
  return h;
}

void write_file_atomic(const std::string& path, const void* data, size_t bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    HDT_CHECK(out.good(), "cannot open '", tmp, "' for writing");
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
    HDT_CHECK(out.good(), "write failed for '", tmp, "'");
  }
  fs::rename(tmp, path);
}

void write_text_atomic(const std::string& path, const std::string& text) {
  write_file_atomic(path, text.data(), text.size());
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  HDT_CHECK(in.good(), "cannot open '", path, "'");
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

template <typename T>
std::vector<T> read_payload(const std::string& path, int64_t expect_count,
                            const std::string& where) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  HDT_CHECK(in.good(), "cannot open payload '", path, "'");
  const auto bytes = static_cast<int64_t>(in.tellg());
  HDT_CHECK(bytes == expect_count * static_cast<int64_t>(sizeof(T)), "payload '", path,
            "' has ", bytes, " bytes, header of ", where, " implies ",
            expect_count * static_cast<int64_t>(sizeof(T)));
  std::vector<T> data(static_cast<size_t>(expect_count));
  in.seekg(0);
  in.read(reinterpret_cast<char*>(data.data()), bytes);
  HDT_CHECK(in.good(), "short read on '", path, "'");
  return data;
}

int64_t payload_count(const VolumeHeader& h) {
  const int64_t vox = h.dims[0] * h.dims[1] * h.dims[2];
  return h.dtype == "f32le" ? vox * h.num_classes : vox;
}

}  // namespace

void write_volume_f32(const std::string& base, const VolumeHeader& header,
                      const std::vector<float>& payload) {
  HDT_CHECK(header.dtype == "f32le", "write_volume_f32: dtype must be f32le");
  HDT_CHECK(static_cast<int64_t>(payload.size()) == payload_count(header),
            "write_volume_f32: payload size ", payload.size(), " does not match header");
  write_text_atomic(base + ".json", header_to_json(header).dump(2));
  write_file_atomic(base + ".raw", payload.data(), payload.size() * sizeof(float));
}

void write_volume_u8(const std::string& base, const VolumeHeader& header,
                     const std::vector<uint8_t>& payload) {
  HDT_CHECK(header.dtype == "u8", "write_volume_u8: dtype must be u8");
  HDT_CHECK(static_cast<int64_t>(payload.size()) == payload_count(header),
            "write_volume_u8: payload size ", payload.size(), " does not match header");
  write_text_atomic(base + ".json", header_to_json(header).dump(2));
  write_file_atomic(base + ".raw", payload.data(), payload.size());
}

std::vector<float> read_volume_f32(const std::string& base, VolumeHeader* header) {
  json j;
  try {
    j = json::parse(read_text(base + ".json"));
  } catch (const json::exception& e) {
    fail("corrupt volume header '", base, ".json': ", e.what());
  }
  VolumeHeader h = header_from_json(j, base);
  HDT_CHECK(h.dtype == "f32le", "read_volume_f32: '", base, "' has dtype ", h.dtype);
  if (header) *header = h;
  return read_payload<float>(base + ".raw", payload_count(h), base);
}

std::vector<uint8_t> read_volume_u8(const std::string& base, VolumeHeader* header) {
  json j;
  try {
    j = json::parse(read_text(base + ".json"));
  } catch (const json::exception& e) {
    fail("corrupt volume header '", base, ".json': ", e.what());
  }
  VolumeHeader h = header_from_json(j, base);
  HDT_CHECK(h.dtype == "u8", "read_volume_u8: '", base, "' has dtype ", h.dtype);
  if (header) *header = h;
  return read_payload<uint8_t>(base + ".raw", payload_count(h), base);
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

LabelVolume VolumeSample::label_volume() const {
  LabelVolume v;
  v.dims = dims;
  v.spacing = spacing;
  v.num_classes = num_classes;
  v.labels = labels;
  return v;
}

void normalize_in_place(std::vector<float>& values) {
  HDT_CHECK(!values.empty(), "normalize: empty volume");
  double mean = 0.0;
  for (float v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double var = 0.0;
  for (float v : values) {
    const double d = v - mean;
    var += d * d;
  }
  var /= static_cast<double>(values.size());
  HDT_CHECK(var > 0.0, "normalize: constant volume");
  const float m = static_cast<float>(mean);
  const float inv = static_cast<float>(1.0 / std::sqrt(var));
  for (float& v : values) v = (v - m) * inv;
}

namespace {

// One lobed ellipsoid: an ellipsoid whose radius is modulated by low
// frequency angular waves.
struct Blob {
  std::array<double, 3> center;  // voxel coordinates (d, w, h)
  std::array<double, 3> radii;
  double amp;
  double f1, p1, f2, p2;

  bool contains(double i, double j, double k) const {
    const double ud = (i - center[0]) / radii[0];
    const double uw = (j - center[1]) / radii[1];
    const double uh = (k - center[2]) / radii[2];
    const double rho = std::sqrt(ud * ud + uw * uw + uh * uh);
    if (rho < 1e-12) return true;
    const double theta = std::atan2(uh, uw);
    const double psi = std::atan2(ud, std::sqrt(uw * uw + uh * uh));
    const double bump =
        1.0 + amp * (0.6 * std::sin(f1 * theta + p1) + 0.4 * std::cos(f2 * psi + p2));
    return rho <= bump;
  }
};

Blob draw_blob(const SyntheticSpec& spec, Rng& rng) {
  Blob b;
  for (int a = 0; a < 3; ++a) {
    const double n = static_cast<double>(spec.dims[a]);
    b.center[a] = rng.uniform(0.34, 0.66) * n;
    b.radii[a] = std::max(1.2, rng.uniform(0.16, 0.28) * n);
  }
  b.amp = spec.lobe_amplitude * rng.uniform(0.5, 1.0);
  b.f1 = 1.0 + rng.below(3);
  b.p1 = rng.uniform(0.0, 6.283185307179586);
  b.f2 = 1.0 + rng.below(3);
  b.p2 = rng.uniform(0.0, 6.283185307179586);
  return b;
}

}  // namespace

std::vector<VolumeSample> generate_synthetic(const SyntheticSpec& spec, int64_t count,
                                             int64_t first_index, bool with_sdf) {
  HDT_CHECK(count >= 1, "generate_synthetic: count must be >= 1");
  HDT_CHECK(spec.dims[0] >= 4 && spec.dims[1] >= 4 && spec.dims[2] >= 4,
            "generate_synthetic: degenerate dims (", spec.dims[0], ",", spec.dims[1], ",",
            spec.dims[2], ")");
  HDT_CHECK(spec.num_classes >= 2, "generate_synthetic: num_classes must be >= 2");

  std::vector<VolumeSample> out;
  out.reserve(static_cast<size_t>(count));
  for (int64_t idx = 0; idx < count; ++idx) {
    Rng rng = Rng::derive(spec.seed, 0xDA7A, static_cast<uint64_t>(first_index + idx));
    VolumeSample s;
    s.dims = spec.dims;
    s.spacing = spec.spacing;
    s.num_classes = spec.num_classes;
    const int64_t vox = s.voxels();
    s.labels.assign(static_cast<size_t>(vox), 0);
    s.intensity.assign(static_cast<size_t>(vox), 0.0f);

    for (int c = 1; c < spec.num_classes; ++c) {
      const Blob blob = draw_blob(spec, rng);
      for (int64_t i = 0; i < spec.dims[0]; ++i)
        for (int64_t j = 0; j < spec.dims[1]; ++j)
          for (int64_t k = 0; k < spec.dims[2]; ++k)
            if (blob.contains(static_cast<double>(i), static_cast<double>(j),
                              static_cast<double>(k)))
              s.labels[(i * spec.dims[1] + j) * spec.dims[2] + k] = static_cast<uint8_t>(c);
    }

    for (int64_t i = 0; i < vox; ++i)
      s.intensity[i] = static_cast<float>(spec.contrast * s.labels[i] +
                                          spec.texture_noise * rng.normal());
    normalize_in_place(s.intensity);

    if (with_sdf) {
      const SdfVolume sdf = compute_sdf_all(s.label_volume());
      s.sdf.assign(sdf.values.begin(), sdf.values.end());
    }
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Patches and augmentation
// ---------------------------------------------------------------------------

Patch sample_patch(const VolumeSample& vol, const std::array<int64_t, 3>& patch_dims,
                   Rng& rng) {
  for (int a = 0; a < 3; ++a)
    HDT_CHECK(patch_dims[a] >= 1 && patch_dims[a] <= vol.dims[a], "sample_patch: patch dims (",
              patch_dims[0], ",", patch_dims[1], ",", patch_dims[2],
              ") exceed volume dims (", vol.dims[0], ",", vol.dims[1], ",", vol.dims[2], ")");
  std::array<int64_t, 3> corner{};
  for (int a = 0; a < 3; ++a) corner[a] = rng.below(vol.dims[a] - patch_dims[a] + 1);

  Patch p;
  p.dims = patch_dims;
  p.num_classes = vol.num_classes;
  const int64_t pv = patch_dims[0] * patch_dims[1] * patch_dims[2];
  p.x.resize(static_cast<size_t>(pv));
  if (!vol.labels.empty()) p.y.resize(static_cast<size_t>(pv));
  if (!vol.sdf.empty()) p.z.resize(static_cast<size_t>(pv) * vol.num_classes);

  const int64_t vw = vol.dims[1], vh = vol.dims[2];
  const int64_t vvox = vol.voxels();
  for (int64_t i = 0; i < patch_dims[0]; ++i)
    for (int64_t j = 0; j < patch_dims[1]; ++j)
      for (int64_t k = 0; k < patch_dims[2]; ++k) {
        const int64_t src = ((corner[0] + i) * vw + corner[1] + j) * vh + corner[2] + k;
        const int64_t dst = (i * patch_dims[1] + j) * patch_dims[2] + k;
        p.x[dst] = vol.intensity[src];
        if (!p.y.empty()) p.y[dst] = vol.labels[src];
        if (!p.z.empty())
          for (int c = 0; c < vol.num_classes; ++c)
            p.z[c * pv + dst] = vol.sdf[c * vvox + src];
      }
  return p;
}

namespace {

template <typename T>
void transform_volume(std::vector<T>& data, const std::array<int64_t, 3>& dims, bool fd,
                      bool fw, bool fh, int rot) {
  const int64_t d = dims[0], w = dims[1], h = dims[2];
  std::vector<T> out(data.size());
  for (int64_t i = 0; i < d; ++i)
    for (int64_t j = 0; j < w; ++j)
      for (int64_t k = 0; k < h; ++k) {
        // source coordinates after undoing flips
        int64_t si = fd ? d - 1 - i : i;
        int64_t sj = fw ? w - 1 - j : j;
        int64_t sk = fh ? h - 1 - k : k;
        // undo the in-plane quarter turns (output = rot applied to source)
        for (int r = 0; r < rot; ++r) {
          const int64_t tj = sk;
          const int64_t tk = w - 1 - sj;
          sj = tj;
          sk = tk;
        }
        out[(i * w + j) * h + k] = data[(si * w + sj) * h + sk];
      }
  data.swap(out);
}

}  // namespace

void augment(Patch& patch, Rng& rng) {
  const bool fd = rng.coin();
  const bool fw = rng.coin();
  const bool fh = rng.coin();
  int rot = static_cast<int>(rng.below(4));
  if (patch.dims[1] != patch.dims[2]) rot = 0;  // rotation needs a square plane
  if (!fd && !fw && !fh && rot == 0) return;

  transform_volume(patch.x, patch.dims, fd, fw, fh, rot);
  if (!patch.y.empty()) transform_volume(patch.y, patch.dims, fd, fw, fh, rot);
  if (!patch.z.empty()) {
    const int64_t pv = patch.dims[0] * patch.dims[1] * patch.dims[2];
    for (int c = 0; c < patch.num_classes; ++c) {
      std::vector<float> ch(patch.z.begin() + c * pv, patch.z.begin() + (c + 1) * pv);
      transform_volume(ch, patch.dims, fd, fw, fh, rot);
      std::copy(ch.begin(), ch.end(), patch.z.begin() + c * pv);
    }
  }
}

// ---------------------------------------------------------------------------
// Dataset on disk
// ---------------------------------------------------------------------------

namespace {

void write_sample(const std::string& dir, const std::string& id, const VolumeSample& s,
                  bool with_labels, bool with_sdf) {
  VolumeHeader img{s.dims, s.spacing, "f32le", 1};
  write_volume_f32(dir + "/" + id + "_img", img, s.intensity);
  if (with_labels) {
    VolumeHeader lab{s.dims, s.spacing, "u8", s.num_classes};
    write_volume_u8(dir + "/" + id + "_lab", lab, s.labels);
  }
  if (with_sdf) {
    VolumeHeader sdf{s.dims, s.spacing, "f32le", s.num_classes};
    write_volume_f32(dir + "/" + id + "_sdf", sdf, s.sdf);
  }
}

VolumeSample read_sample(const std::string& dir, const std::string& id, bool with_labels,
                         bool with_sdf) {
  VolumeSample s;
  VolumeHeader h;
  s.intensity = read_volume_f32(dir + "/" + id + "_img", &h);
  s.dims = h.dims;
  s.spacing = h.spacing;
  if (with_labels) {
    VolumeHeader lh;
    s.labels = read_volume_u8(dir + "/" + id + "_lab", &lh);
    HDT_CHECK(lh.dims == h.dims, "dataset: label dims mismatch for '", id, "'");
    s.num_classes = lh.num_classes;
  }
  if (with_sdf) {
    VolumeHeader zh;
    s.sdf = read_volume_f32(dir + "/" + id + "_sdf", &zh);
    HDT_CHECK(zh.dims == h.dims, "dataset: sdf dims mismatch for '", id, "'");
    s.num_classes = zh.num_classes;
  }
  return s;
}

}  // namespace

void write_dataset(const std::string& dir, const SyntheticSpec& spec,
                   const DatasetCounts& counts, bool force) {
  HDT_CHECK(counts.labeled >= 1 && counts.unlabeled >= 0 && counts.val >= 1 && counts.test >= 1,
            "write_dataset: invalid counts");
  if (fs::exists(dir) && !fs::is_empty(dir))
    HDT_CHECK(force, "output directory '", dir, "' is not empty (use --force to overwrite)");
  fs::create_directories(dir);

  json manifest;
  manifest["dims"] = {spec.dims[0], spec.dims[1], spec.dims[2]};
  manifest["spacing"] = {spec.spacing[0], spec.spacing[1], spec.spacing[2]};
  manifest["num_classes"] = spec.num_classes;
  manifest["seed"] = spec.seed;

  int64_t index = 0;
  auto emit = [&](const char* prefix, int64_t n, bool labels, bool sdf) {
    std::vector<std::string> ids;
    auto samples = generate_synthetic(spec, n, index, sdf);
    index += n;
    for (int64_t i = 0; i < n; ++i) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%s_%03lld", prefix, static_cast<long long>(i));
      write_sample(dir, buf, samples[static_cast<size_t>(i)], labels, sdf);
      ids.emplace_back(buf);
    }
    return ids;
  };
  manifest["labeled"] = emit("lab", counts.labeled, true, true);
  manifest["unlabeled"] = emit("unl", counts.unlabeled, false, false);
  manifest["val"] = emit("val", counts.val, true, false);
  manifest["test"] = emit("test", counts.test, true, false);

  write_text_atomic(dir + "/manifest.json", manifest.dump(2));
}

DataSplit load_dataset(const std::string& dir) {
  json manifest;
  try {
    manifest = json::parse(read_text(dir + "/manifest.json"));
  } catch (const json::exception& e) {
    fail("corrupt dataset manifest in '", dir, "': ", e.what());
  }
  DataSplit split;
  try {
    for (int i = 0; i < 3; ++i) {
      split.dims[i] = manifest.at("dims").at(i).get<int64_t>();
      split.spacing[i] = manifest.at("spacing").at(i).get<double>();
    }
    split.num_classes = manifest.at("num_classes").get<int>();
  } catch (const json::exception& e) {
    fail("corrupt dataset manifest in '", dir, "': ", e.what());
  }

  std::vector<std::string> seen;
  auto load_list = [&](const char* key, bool labels, bool sdf) {
    std::vector<VolumeSample> out;
    for (const auto& id : manifest.at(key)) {
      const std::string s = id.get<std::string>();
      for (const auto& other : seen)
        HDT_CHECK(other != s, "dataset: sample '", s, "' appears in two splits");
      seen.push_back(s);
      VolumeSample v = read_sample(dir, s, labels, sdf);
      HDT_CHECK(v.dims == split.dims, "dataset: dims mismatch for '", s, "'");
      v.num_classes = split.num_classes;
      v.spacing = split.spacing;
      out.push_back(std::move(v));
    }
    return out;
  };
  split.labeled = load_list("labeled", true, true);
  split.unlabeled = load_list("unlabeled", false, false);
  split.val = load_list("val", true, false);
  split.test = load_list("test", true, false);

  HDT_CHECK(!split.labeled.empty(), "dataset: no labeled samples");
  HDT_CHECK(split.m_unlabeled() >= 4 * split.n_labeled(), "dataset: M >= 4N violated (N=",
            split.n_labeled(), ", M=", split.m_unlabeled(), ")");
  return split;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

void save_checkpoint_files(const std::string& dir, std::vector<NamedParam<float>> params,
                           const CheckpointMeta& meta) {
  fs::create_directories(dir);
  json manifest;
  manifest["format"] = "hdteacher-checkpoint-v1";
  manifest["completed_stages"] = meta.completed_stages;
  manifest["master_seed"] = meta.master_seed;
  manifest["extra"] = meta.extra;
  json plist = json::array();
  std::vector<float> blob;
  for (const auto& p : params) {
    plist.push_back(json{{"name", p.name}, {"shape", p.tensor.shape()}});
    blob.insert(blob.end(), p.tensor.vec().begin(), p.tensor.vec().end());
  }
  manifest["params"] = plist;
  write_file_atomic(dir + "/params.bin", blob.data(), blob.size() * sizeof(float));
  write_text_atomic(dir + "/manifest.json", manifest.dump(2));
}

namespace {
json load_manifest(const std::string& dir) {
  json manifest;
  try {
    manifest = json::parse(read_text(dir + "/manifest.json"));
  } catch (const json::exception& e) {
    fail("corrupt checkpoint manifest in '", dir, "': ", e.what());
  }
  HDT_CHECK(manifest.value("format", "") == "hdteacher-checkpoint-v1",
            "'", dir, "' is not a recognized checkpoint directory");
  return manifest;
}

CheckpointMeta meta_from_manifest(const json& manifest) {
  CheckpointMeta meta;
  meta.completed_stages = manifest.at("completed_stages").get<std::vector<std::string>>();
  meta.master_seed = manifest.at("master_seed").get<uint64_t>();
  if (manifest.contains("extra"))
    meta.extra = manifest.at("extra").get<std::map<std::string, std::string>>();
  return meta;
}
}  // namespace

CheckpointMeta peek_checkpoint_meta(const std::string& dir) {
  return meta_from_manifest(load_manifest(dir));
}

CheckpointMeta load_checkpoint_files(const std::string& dir,
                                     std::vector<NamedParam<float>> params) {
  const json manifest = load_manifest(dir);

  struct Entry {
    Shape shape;
    int64_t offset;
  };
  std::map<std::string, Entry> entries;
  int64_t total = 0;
  for (const auto& p : manifest.at("params")) {
    Entry e;
    e.shape = p.at("shape").get<Shape>();
    e.offset = total;
    total += numel_of(e.shape);
    entries[p.at("name").get<std::string>()] = e;
  }
  const std::vector<float> blob = read_payload<float>(dir + "/params.bin", total, dir);

  for (auto& p : params) {
    auto it = entries.find(p.name);
    HDT_CHECK(it != entries.end(), "checkpoint '", dir, "' is missing parameter '", p.name,
              "'");
    HDT_CHECK(it->second.shape == p.tensor.shape(), "checkpoint parameter '", p.name,
              "' has shape ", shape_str(it->second.shape), ", expected ",
              shape_str(p.tensor.shape()));
    std::copy_n(blob.begin() + it->second.offset, p.tensor.numel(), p.tensor.vec().begin());
  }
  return meta_from_manifest(manifest);
}

}  // namespace hdt
