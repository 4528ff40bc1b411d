#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "hdteacher/common.hpp"

namespace hdt {

// Integer label map over a (d, w, h) grid. Spacing is given as (sx, sy, sz)
// in mm, where z is the depth axis: voxel (i, j, k) sits at physical
// position (j*sx, k*sy, i*sz).
struct LabelVolume {
  std::array<int64_t, 3> dims{};      // (d, w, h)
  std::array<double, 3> spacing{};    // (sx, sy, sz)
  int num_classes = 2;
  std::vector<uint8_t> labels;

  int64_t voxels() const { return dims[0] * dims[1] * dims[2]; }
  int64_t index(int64_t i, int64_t j, int64_t k) const {
    return (i * dims[1] + j) * dims[2] + k;
  }
  void validate() const;
};

// One normalized signed-distance channel: negative strictly inside, positive
// strictly outside, exactly zero on boundary voxels, |value| <= 1.
struct SdfChannel {
  std::array<int64_t, 3> dims{};
  std::vector<double> values;
};

// All per-class channels stacked (num_classes * d * w * h).
struct SdfVolume {
  std::array<int64_t, 3> dims{};
  int num_classes = 0;
  std::vector<double> values;

  const double* channel(int c) const { return values.data() + int64_t(c) * dims[0] * dims[1] * dims[2]; }
};

// Exact squared Euclidean distance (mm^2) from every voxel to the nearest
// seed voxel, by the per-axis lower-envelope-of-parabolas transform.
// Voxels that are seeds get 0. All distances are +inf-like (1e20 scale) when
// the seed set is empty.
std::vector<double> edt_squared(const std::vector<uint8_t>& seeds,
                                const std::array<int64_t, 3>& dims,
                                const std::array<double, 3>& spacing);

// Foreground voxels 6-adjacent (within the volume) to background.
std::vector<uint8_t> boundary_mask(const std::vector<uint8_t>& mask,
                                   const std::array<int64_t, 3>& dims);

SdfChannel compute_sdf(const LabelVolume& labels, int class_id);

// Exhaustive nearest-opposite-voxel reference; volumes limited to 32^3.
SdfChannel oracle_sdf(const LabelVolume& labels, int class_id);

SdfVolume compute_sdf_all(const LabelVolume& labels);

}  // namespace hdt
