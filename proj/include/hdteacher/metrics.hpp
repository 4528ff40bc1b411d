#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "hdteacher/sdf.hpp"

namespace hdt {

// Undefined surface metrics (class empty in either mask) are reported as NaN
// and excluded from means.
struct ClassMetrics {
  int class_id = 0;
  double dice = 0.0;
  double jaccard = 0.0;
  double hd95 = std::numeric_limits<double>::quiet_NaN();
  double asd = std::numeric_limits<double>::quiet_NaN();

  bool surface_defined() const { return !std::isnan(hd95); }
};

struct MetricReport {
  std::vector<ClassMetrics> per_class;  // foreground classes 1..C-1
  double mean_dice = 0.0;
  double mean_jaccard = 0.0;
  double mean_hd95 = std::numeric_limits<double>::quiet_NaN();
  double mean_asd = std::numeric_limits<double>::quiet_NaN();
  std::array<double, 3> spacing{};
};

// Dice and Jaccard for one class. Both masks empty -> (1, 1); exactly one
// empty -> (0, 0).
std::pair<double, double> overlap_metrics(const LabelVolume& pred, const LabelVolume& ref,
                                          int class_id);

struct SurfaceMetrics {
  double hd95 = std::numeric_limits<double>::quiet_NaN();
  double asd = std::numeric_limits<double>::quiet_NaN();

  bool defined() const { return !std::isnan(hd95); }
};

// 95th-percentile Hausdorff (max of the two directed percentiles, linear
// interpolation) and average symmetric surface distance over the pooled
// directed distances, in mm. Undefined when the class is empty in either
// mask.
SurfaceMetrics surface_metrics(const LabelVolume& pred, const LabelVolume& ref, int class_id);

// Full per-class + mean report over foreground classes.
MetricReport evaluate_metrics(const LabelVolume& pred, const LabelVolume& ref);

// Linear-interpolation percentile of an unsorted sample, q in [0, 100].
double percentile(std::vector<double> values, double q);

}  // namespace hdt
