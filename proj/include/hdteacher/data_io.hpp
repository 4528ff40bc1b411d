#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "hdteacher/sdf.hpp"
#include "hdteacher/tensor_nn.hpp"

namespace hdt {

// ---------------------------------------------------------------------------
// Volume files: a JSON sidecar header next to a raw little-endian payload.
// <base>.json + <base>.raw
// ---------------------------------------------------------------------------

struct VolumeHeader {
  std::array<int64_t, 3> dims{};    // (d, w, h)
  std::array<double, 3> spacing{};  // (sx, sy, sz) mm
  std::string dtype;                // "f32le" | "u8"
  int num_classes = 1;              // channel count for f32le stacks, label range for u8
};

void write_volume_f32(const std::string& base, const VolumeHeader& header,
                      const std::vector<float>& payload);
void write_volume_u8(const std::string& base, const VolumeHeader& header,
                     const std::vector<uint8_t>& payload);
std::vector<float> read_volume_f32(const std::string& base, VolumeHeader* header = nullptr);
std::vector<uint8_t> read_volume_u8(const std::string& base, VolumeHeader* header = nullptr);

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

struct SyntheticSpec {
  std::array<int64_t, 3> dims{16, 32, 32};
  std::array<double, 3> spacing{0.4, 0.4, 5.0};
  int num_classes = 2;
  double contrast = 1.0;       // intensity separation between classes
  double texture_noise = 0.4;  // additive Gaussian sigma before normalization
  double lobe_amplitude = 0.3; // radial perturbation of the blobs
  uint64_t seed = 1234;
};

// One in-memory sample. Unlabeled samples have empty labels/sdf.
struct VolumeSample {
  std::array<int64_t, 3> dims{};
  std::array<double, 3> spacing{};
  int num_classes = 2;
  std::vector<float> intensity;  // d*w*h, normalized
  std::vector<uint8_t> labels;
  std::vector<float> sdf;  // num_classes * d*w*h

  int64_t voxels() const { return dims[0] * dims[1] * dims[2]; }
  LabelVolume label_volume() const;
};

// Deterministic per-index generation: volume i depends only on (seed, i).
std::vector<VolumeSample> generate_synthetic(const SyntheticSpec& spec, int64_t count,
                                             int64_t first_index = 0, bool with_sdf = true);

// (x - mean) / std per volume; constant input is an error.
template <typename T>
Tensor<T> normalize(const Tensor<T>& x) {
  double mean = 0.0;
  for (int64_t i = 0; i < x.numel(); ++i) mean += x.at(i);
  mean /= static_cast<double>(x.numel());
  double var = 0.0;
  for (int64_t i = 0; i < x.numel(); ++i) {
    const double d = x.at(i) - mean;
    var += d * d;
  }
  var /= static_cast<double>(x.numel());
  HDT_CHECK(var > 0.0, "normalize: constant volume");
  const T m = static_cast<T>(mean), inv = static_cast<T>(1.0 / std::sqrt(var));
  Tensor<T> out(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) out.at(i) = (x.at(i) - m) * inv;
  return out;
}

void normalize_in_place(std::vector<float>& values);

// ---------------------------------------------------------------------------
// Patches and augmentation
// ---------------------------------------------------------------------------

struct Patch {
  std::array<int64_t, 3> dims{};  // (pd, pw, ph)
  int num_classes = 2;
  std::vector<float> x;
  std::vector<uint8_t> y;  // empty when unlabeled
  std::vector<float> z;    // empty when unlabeled; num_classes channels
};

Patch sample_patch(const VolumeSample& vol, const std::array<int64_t, 3>& patch_dims, Rng& rng);

// Random flips along each spatial axis plus an in-plane 90-degree rotation
// (square in-plane patches only), applied consistently to x, y, and z. SDF
// values are not recomputed; these isometries preserve distances.
void augment(Patch& patch, Rng& rng);

// ---------------------------------------------------------------------------
// Dataset on disk
// ---------------------------------------------------------------------------

struct DataSplit {
  std::array<int64_t, 3> dims{};
  std::array<double, 3> spacing{};
  int num_classes = 2;
  std::vector<VolumeSample> labeled;    // N, with labels + sdf
  std::vector<VolumeSample> unlabeled;  // M
  std::vector<VolumeSample> val;        // labeled, no sdf needed
  std::vector<VolumeSample> test;

  int64_t n_labeled() const { return static_cast<int64_t>(labeled.size()); }
  int64_t m_unlabeled() const { return static_cast<int64_t>(unlabeled.size()); }
};

struct DatasetCounts {
  int64_t labeled = 4;
  int64_t unlabeled = 36;
  int64_t val = 4;
  int64_t test = 8;
};

// Writes volumes, precomputed SDFs, and the split manifest. Fails on a
// non-empty directory unless force is set.
void write_dataset(const std::string& dir, const SyntheticSpec& spec,
                   const DatasetCounts& counts, bool force = false);

// Loads and validates a dataset directory: split disjointness and M >= 4N.
DataSplit load_dataset(const std::string& dir);

// ---------------------------------------------------------------------------
// Checkpoints: manifest.json (named parameter entries with shapes, stage
// cursor, rng state) + params.bin (raw f32le blobs in manifest order).
// Writes are atomic (temp file + rename).
// ---------------------------------------------------------------------------

struct CheckpointMeta {
  std::vector<std::string> completed_stages;
  uint64_t master_seed = 0;
  std::map<std::string, std::string> extra;
};

void save_checkpoint_files(const std::string& dir, std::vector<NamedParam<float>> params,
                           const CheckpointMeta& meta);

// Fills the given parameter tensors by name; a missing entry or a shape
// mismatch is an error naming the parameter.
CheckpointMeta load_checkpoint_files(const std::string& dir,
                                     std::vector<NamedParam<float>> params);

// Reads just the metadata (to discover which stages a checkpoint holds).
CheckpointMeta peek_checkpoint_meta(const std::string& dir);

}  // namespace hdt
