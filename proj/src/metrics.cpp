#include "hdteacher/metrics.hpp"

#include <algorithm>

namespace hdt {

namespace {

void check_compatible(const LabelVolume& pred, const LabelVolume& ref) {
  HDT_CHECK(pred.dims == ref.dims, "metrics: dims mismatch (", pred.dims[0], ",", pred.dims[1],
            ",", pred.dims[2], ") vs (", ref.dims[0], ",", ref.dims[1], ",", ref.dims[2], ")");
  HDT_CHECK(pred.spacing == ref.spacing, "metrics: spacing mismatch");
}

std::vector<uint8_t> class_mask(const LabelVolume& v, int class_id) {
  std::vector<uint8_t> m(v.labels.size());
  for (size_t i = 0; i < m.size(); ++i) m[i] = v.labels[i] == class_id;
  return m;
}

bool any_set(const std::vector<uint8_t>& m) {
  for (uint8_t v : m)
    if (v) return true;
  return false;
}

}  // namespace

double percentile(std::vector<double> values, double q) {
  HDT_CHECK(!values.empty(), "percentile of an empty sample");
  std::sort(values.begin(), values.end());
  if (values.size() == 1) return values[0];
  const double rank = q / 100.0 * static_cast<double>(values.size() - 1);
  const size_t lo = static_cast<size_t>(rank);
  if (lo + 1 >= values.size()) return values.back();
  const double frac = rank - static_cast<double>(lo);
  return values[lo] + frac * (values[lo + 1] - values[lo]);
}

std::pair<double, double> overlap_metrics(const LabelVolume& pred, const LabelVolume& ref,
                                          int class_id) {
  check_compatible(pred, ref);
  int64_t p = 0, r = 0, inter = 0;
  for (size_t i = 0; i < pred.labels.size(); ++i) {
    const bool ip = pred.labels[i] == class_id;
    const bool ir = ref.labels[i] == class_id;
    p += ip;
    r += ir;
    inter += ip && ir;
  }
  if (p == 0 && r == 0) return {1.0, 1.0};
  if (p == 0 || r == 0) return {0.0, 0.0};
  const double dice = 2.0 * inter / static_cast<double>(p + r);
  const double jaccard = static_cast<double>(inter) / static_cast<double>(p + r - inter);
  return {dice, jaccard};
}

SurfaceMetrics surface_metrics(const LabelVolume& pred, const LabelVolume& ref, int class_id) {
  check_compatible(pred, ref);
  SurfaceMetrics out;
  auto pm = class_mask(pred, class_id);
  auto rm = class_mask(ref, class_id);
  if (!any_set(pm) || !any_set(rm)) return out;  // undefined

  auto pb = boundary_mask(pm, pred.dims);
  auto rb = boundary_mask(rm, ref.dims);
  if (!any_set(pb) || !any_set(rb)) return out;  // volume-filling mask has no surface

  const auto d_to_r = edt_squared(rb, pred.dims, pred.spacing);
  const auto d_to_p = edt_squared(pb, pred.dims, pred.spacing);

  std::vector<double> p_to_r, r_to_p;
  for (size_t i = 0; i < pb.size(); ++i) {
    if (pb[i]) p_to_r.push_back(std::sqrt(d_to_r[i]));
    if (rb[i]) r_to_p.push_back(std::sqrt(d_to_p[i]));
  }

  out.hd95 = std::max(percentile(p_to_r, 95.0), percentile(r_to_p, 95.0));
  double sum = 0.0;
  for (double v : p_to_r) sum += v;
  for (double v : r_to_p) sum += v;
  out.asd = sum / static_cast<double>(p_to_r.size() + r_to_p.size());
  return out;
}

MetricReport evaluate_metrics(const LabelVolume& pred, const LabelVolume& ref) {
  check_compatible(pred, ref);
  HDT_CHECK(pred.num_classes == ref.num_classes, "metrics: num_classes mismatch");
  MetricReport report;
  report.spacing = pred.spacing;
  double dice_sum = 0.0, jac_sum = 0.0, hd_sum = 0.0, asd_sum = 0.0;
  int64_t n = 0, n_surface = 0;
  for (int c = 1; c < pred.num_classes; ++c) {
    ClassMetrics cm;
    cm.class_id = c;
    std::tie(cm.dice, cm.jaccard) = overlap_metrics(pred, ref, c);
    const SurfaceMetrics sm = surface_metrics(pred, ref, c);
    cm.hd95 = sm.hd95;
    cm.asd = sm.asd;
    dice_sum += cm.dice;
    jac_sum += cm.jaccard;
    ++n;
    if (cm.surface_defined()) {
      hd_sum += cm.hd95;
      asd_sum += cm.asd;
      ++n_surface;
    }
    report.per_class.push_back(cm);
  }
  HDT_CHECK(n > 0, "metrics: no foreground classes (num_classes < 2)");
  report.mean_dice = dice_sum / static_cast<double>(n);
  report.mean_jaccard = jac_sum / static_cast<double>(n);
  if (n_surface > 0) {
    report.mean_hd95 = hd_sum / static_cast<double>(n_surface);
    report.mean_asd = asd_sum / static_cast<double>(n_surface);
  }
  return report;
}

}  // namespace hdt
