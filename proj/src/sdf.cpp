#include "hdteacher/sdf.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace hdt {

namespace {

constexpr double kFar = 1e20;

// 1D squared-distance transform along one axis with physical step `s`:
// d[i] = min_j (s*(i-j))^2 + f[j]. Exact lower envelope of parabolas.
// Envelope sentinels must be true infinities: with s < 1 the intersection
// term (f[q]-f[p])/s^2 can exceed any finite "far" constant.
void edt_1d(const double* f, double* d, int64_t n, double s, int64_t* v, double* z) {
  const double s2 = s * s;
  const double inf = std::numeric_limits<double>::infinity();
  int64_t k = 0;
  v[0] = 0;
  z[0] = -inf;
  z[1] = inf;
  for (int64_t q = 1; q < n; ++q) {
    double sep;
    while (true) {
      const int64_t p = v[k];
      sep = ((f[q] - f[p]) / s2 + double(q) * q - double(p) * p) / (2.0 * double(q - p));
      if (sep > z[k]) break;
      --k;
    }
    ++k;
    v[k] = q;
    z[k] = sep;
    z[k + 1] = inf;
  }
  k = 0;
  for (int64_t q = 0; q < n; ++q) {
    while (z[k + 1] < double(q)) ++k;
    const double dq = double(q - v[k]);
    d[q] = s2 * dq * dq + f[v[k]];
  }
}

}  // namespace

void LabelVolume::validate() const {
  HDT_CHECK(dims[0] > 0 && dims[1] > 0 && dims[2] > 0, "label volume has degenerate dims (",
            dims[0], ",", dims[1], ",", dims[2], ")");
  HDT_CHECK(static_cast<int64_t>(labels.size()) == voxels(), "label array size ",
            labels.size(), " does not match dims product ", voxels());
  HDT_CHECK(spacing[0] > 0 && spacing[1] > 0 && spacing[2] > 0, "non-positive spacing");
  for (uint8_t v : labels)
    HDT_CHECK(v < num_classes, "label value ", int(v), " >= num_classes ", num_classes);
}

std::vector<double> edt_squared(const std::vector<uint8_t>& seeds,
                                const std::array<int64_t, 3>& dims,
                                const std::array<double, 3>& spacing) {
  const int64_t d = dims[0], w = dims[1], h = dims[2];
  HDT_CHECK(static_cast<int64_t>(seeds.size()) == d * w * h, "seed mask size mismatch");
  // axis steps in grid order (d, w, h) -> (sz, sx, sy)
  const double step[3] = {spacing[2], spacing[0], spacing[1]};

  std::vector<double> g(seeds.size());
  for (size_t i = 0; i < seeds.size(); ++i) g[i] = seeds[i] ? 0.0 : kFar;

  const int64_t maxn = std::max({d, w, h});
  std::vector<double> f(maxn), out(maxn), z(maxn + 1);
  std::vector<int64_t> v(maxn);

  // axis 2 (h, contiguous)
  for (int64_t i = 0; i < d; ++i)
    for (int64_t j = 0; j < w; ++j) {
      double* row = g.data() + (i * w + j) * h;
      edt_1d(row, out.data(), h, step[2], v.data(), z.data());
      std::copy_n(out.data(), h, row);
    }
  // axis 1 (w)
  for (int64_t i = 0; i < d; ++i)
    for (int64_t k = 0; k < h; ++k) {
      for (int64_t j = 0; j < w; ++j) f[j] = g[(i * w + j) * h + k];
      edt_1d(f.data(), out.data(), w, step[1], v.data(), z.data());
      for (int64_t j = 0; j < w; ++j) g[(i * w + j) * h + k] = out[j];
    }
  // axis 0 (d)
  for (int64_t j = 0; j < w; ++j)
    for (int64_t k = 0; k < h; ++k) {
      for (int64_t i = 0; i < d; ++i) f[i] = g[(i * w + j) * h + k];
      edt_1d(f.data(), out.data(), d, step[0], v.data(), z.data());
      for (int64_t i = 0; i < d; ++i) g[(i * w + j) * h + k] = out[i];
    }
  return g;
}

std::vector<uint8_t> boundary_mask(const std::vector<uint8_t>& mask,
                                   const std::array<int64_t, 3>& dims) {
  const int64_t d = dims[0], w = dims[1], h = dims[2];
  std::vector<uint8_t> b(mask.size(), 0);
  auto at = [&](int64_t i, int64_t j, int64_t k) { return mask[(i * w + j) * h + k]; };
  for (int64_t i = 0; i < d; ++i)
    for (int64_t j = 0; j < w; ++j)
      for (int64_t k = 0; k < h; ++k) {
        if (!at(i, j, k)) continue;
        const bool bg = (i > 0 && !at(i - 1, j, k)) || (i + 1 < d && !at(i + 1, j, k)) ||
                        (j > 0 && !at(i, j - 1, k)) || (j + 1 < w && !at(i, j + 1, k)) ||
                        (k > 0 && !at(i, j, k - 1)) || (k + 1 < h && !at(i, j, k + 1));
        if (bg) b[(i * w + j) * h + k] = 1;
      }
  return b;
}

namespace {

// Shared sign/boundary/normalization contract. `dist_to_bg` is defined on
// foreground voxels, `dist_to_fg` on background voxels (unsigned mm).
SdfChannel assemble_channel(const LabelVolume& vol, const std::vector<uint8_t>& mask,
                            const std::vector<double>& dist_to_bg,
                            const std::vector<double>& dist_to_fg) {
  SdfChannel ch;
  ch.dims = vol.dims;
  ch.values.assign(mask.size(), 0.0);

  bool any_fg = false, any_bg = false;
  for (uint8_t m : mask) (m ? any_fg : any_bg) = true;
  if (!any_fg) {
    ch.values.assign(mask.size(), 1.0);
    return ch;
  }
  if (!any_bg) {
    ch.values.assign(mask.size(), -1.0);
    return ch;
  }

  double max_in = 0.0, max_out = 0.0;
  for (size_t i = 0; i < mask.size(); ++i) {
    if (mask[i])
      max_in = std::max(max_in, dist_to_bg[i]);
    else
      max_out = std::max(max_out, dist_to_fg[i]);
  }

  const std::vector<uint8_t> bnd = boundary_mask(mask, vol.dims);
  for (size_t i = 0; i < mask.size(); ++i) {
    if (mask[i]) {
      ch.values[i] = bnd[i] ? 0.0 : -dist_to_bg[i] / max_in;
    } else {
      ch.values[i] = dist_to_fg[i] / max_out;
    }
  }
  return ch;
}

}  // namespace

SdfChannel compute_sdf(const LabelVolume& labels, int class_id) {
  labels.validate();
  HDT_CHECK(class_id >= 0 && class_id < labels.num_classes, "class_id ", class_id,
            " out of range [0, ", labels.num_classes, ")");
  std::vector<uint8_t> mask(labels.labels.size());
  std::vector<uint8_t> inv(labels.labels.size());
  for (size_t i = 0; i < mask.size(); ++i) {
    mask[i] = labels.labels[i] == class_id;
    inv[i] = !mask[i];
  }
  std::vector<double> d_bg = edt_squared(inv, labels.dims, labels.spacing);
  std::vector<double> d_fg = edt_squared(mask, labels.dims, labels.spacing);
  for (auto& v : d_bg) v = std::sqrt(v);
  for (auto& v : d_fg) v = std::sqrt(v);
  return assemble_channel(labels, mask, d_bg, d_fg);
}

SdfChannel oracle_sdf(const LabelVolume& labels, int class_id) {
  labels.validate();
  HDT_CHECK(labels.voxels() <= 32 * 32 * 32, "oracle_sdf limited to 32^3 voxels, got ",
            labels.voxels());
  HDT_CHECK(class_id >= 0 && class_id < labels.num_classes, "class_id ", class_id,
            " out of range [0, ", labels.num_classes, ")");

  const int64_t d = labels.dims[0], w = labels.dims[1], h = labels.dims[2];
  const double sx = labels.spacing[0], sy = labels.spacing[1], sz = labels.spacing[2];

  std::vector<uint8_t> mask(labels.labels.size());
  for (size_t i = 0; i < mask.size(); ++i) mask[i] = labels.labels[i] == class_id;

  // Exhaustive pairwise nearest-opposite search.
  std::vector<std::array<int64_t, 3>> fg, bg;
  for (int64_t i = 0; i < d; ++i)
    for (int64_t j = 0; j < w; ++j)
      for (int64_t k = 0; k < h; ++k)
        (mask[(i * w + j) * h + k] ? fg : bg).push_back({i, j, k});

  SdfChannel ch;
  ch.dims = labels.dims;
  if (fg.empty()) {
    ch.values.assign(mask.size(), 1.0);
    return ch;
  }
  if (bg.empty()) {
    ch.values.assign(mask.size(), -1.0);
    return ch;
  }

  auto nearest = [&](const std::array<int64_t, 3>& p,
                     const std::vector<std::array<int64_t, 3>>& them) {
    double best = std::numeric_limits<double>::max();
    for (const auto& q : them) {
      const double dz = double(p[0] - q[0]) * sz;
      const double dx = double(p[1] - q[1]) * sx;
      const double dy = double(p[2] - q[2]) * sy;
      best = std::min(best, dz * dz + dx * dx + dy * dy);
    }
    return std::sqrt(best);
  };

  std::vector<double> raw(mask.size(), 0.0);
  double max_in = 0.0, max_out = 0.0;
  for (const auto& p : fg) {
    const double dist = nearest(p, bg);
    raw[(p[0] * w + p[1]) * h + p[2]] = -dist;
    max_in = std::max(max_in, dist);
  }
  for (const auto& p : bg) {
    const double dist = nearest(p, fg);
    raw[(p[0] * w + p[1]) * h + p[2]] = dist;
    max_out = std::max(max_out, dist);
  }

  ch.values.assign(mask.size(), 0.0);
  for (int64_t i = 0; i < d; ++i)
    for (int64_t j = 0; j < w; ++j)
      for (int64_t k = 0; k < h; ++k) {
        const int64_t idx = (i * w + j) * h + k;
        if (mask[idx]) {
          // boundary: any 6-neighbor inside the volume is background
          bool bnd = false;
          auto bgq = [&](int64_t a, int64_t b, int64_t c) {
            return a >= 0 && a < d && b >= 0 && b < w && c >= 0 && c < h &&
                   !mask[(a * w + b) * h + c];
          };
          bnd = bgq(i - 1, j, k) || bgq(i + 1, j, k) || bgq(i, j - 1, k) || bgq(i, j + 1, k) ||
                bgq(i, j, k - 1) || bgq(i, j, k + 1);
          ch.values[idx] = bnd ? 0.0 : raw[idx] / max_in;
        } else {
          ch.values[idx] = raw[idx] / max_out;
        }
      }
  return ch;
}

SdfVolume compute_sdf_all(const LabelVolume& labels) {
  SdfVolume out;
  out.dims = labels.dims;
  out.num_classes = labels.num_classes;
  out.values.reserve(labels.voxels() * labels.num_classes);
  for (int c = 0; c < labels.num_classes; ++c) {
    SdfChannel ch = compute_sdf(labels, c);
    out.values.insert(out.values.end(), ch.values.begin(), ch.values.end());
  }
  return out;
}

}  // namespace hdt
