#pragma once

#include <cmath>
#include <vector>

#include "hdteacher/tensor.hpp"

namespace hdt {

// Teacher-side uncertainty math. Everything here produces regularization
// targets, so no operation is ever recorded on a tape.

enum class FusedKind { seg, sdf };

template <typename T>
struct FusedPrediction {
  FusedKind kind;
  Tensor<T> value;        // probability map (seg) or SDF field (sdf)
  Tensor<T> uncertainty;  // entropy map in [0,1] (seg) or variance >= 0 (sdf)
};

// Per-member trustworthiness maps; at every location the maps sum to 1.
template <typename T>
struct WeightStack {
  std::vector<Tensor<T>> maps;  // each [b, 1, spatial...]
};

// Normalized entropy per location: -sum_c p_c log_C p_c, 0*log 0 := 0 via
// clamping p to [1e-7, 1]. Output has a singleton channel axis.
template <typename T>
Tensor<T> entropy_map(const Tensor<T>& probs, int64_t num_classes) {
  NoGradScope<T> ng;
  HDT_CHECK(num_classes >= 2, "entropy_map: log base undefined for num_classes ", num_classes);
  HDT_CHECK(probs.rank() >= 2 && probs.shape()[1] == num_classes,
            "entropy_map: expected class axis of extent ", num_classes, ", got ",
            shape_str(probs.shape()));
  const int64_t batch = probs.shape()[0];
  const int64_t inner = probs.numel() / (batch * num_classes);
  Shape oshape = probs.shape();
  oshape[1] = 1;
  Tensor<T> out(oshape);
  const T inv_log_c = T(1) / std::log(static_cast<T>(num_classes));
  for (int64_t b = 0; b < batch; ++b) {
    T* op = out.data() + b * inner;
    for (int64_t i = 0; i < inner; ++i) {
      T h = T(0);
      for (int64_t c = 0; c < num_classes; ++c) {
        T p = probs.at((b * num_classes + c) * inner + i);
        p = std::clamp(p, T(1e-7), T(1));
        h -= p * std::log(p);
      }
      op[i] = h * inv_log_c;
    }
  }
  return out;
}

namespace detail {
template <typename T>
void check_members(const std::vector<Tensor<T>>& members, const char* op) {
  HDT_CHECK(!members.empty(), op, ": needs at least one member");
  for (size_t j = 1; j < members.size(); ++j)
    HDT_CHECK(members[j].shape() == members[0].shape(), op, ": member ", j, " shape ",
              shape_str(members[j].shape()), " does not match member 0 shape ",
              shape_str(members[0].shape()));
}
}  // namespace detail

// Softmax over the member axis of the confidences 1 - U_j, per location.
template <typename T>
WeightStack<T> weight_stack(const std::vector<Tensor<T>>& members, int64_t num_classes) {
  NoGradScope<T> ng;
  detail::check_members(members, "weight_stack");
  const size_t J = members.size();
  WeightStack<T> ws;
  ws.maps.reserve(J);
  std::vector<Tensor<T>> conf;
  conf.reserve(J);
  for (const auto& m : members) {
    Tensor<T> u = entropy_map(m, num_classes);
    for (int64_t i = 0; i < u.numel(); ++i) u.at(i) = T(1) - u.at(i);
    conf.push_back(std::move(u));
    ws.maps.emplace_back(conf.back().shape());
  }
  const int64_t n = conf[0].numel();
  for (int64_t i = 0; i < n; ++i) {
    T mx = conf[0].at(i);
    for (size_t j = 1; j < J; ++j) mx = std::max(mx, conf[j].at(i));
    T denom = T(0);
    for (size_t j = 0; j < J; ++j) {
      const T e = std::exp(conf[j].at(i) - mx);
      ws.maps[j].at(i) = e;
      denom += e;
    }
    const T inv = T(1) / denom;
    for (size_t j = 0; j < J; ++j) ws.maps[j].at(i) *= inv;
  }
  return ws;
}

// Confidence-weighted sum of intermediate probability maps; overall
// uncertainty is the entropy of the fused map. Used with J = K members from
// one teacher and J = 2K for the hybrid stacks.
template <typename T>
FusedPrediction<T> fuse_seg(const std::vector<Tensor<T>>& members, int64_t num_classes) {
  NoGradScope<T> ng;
  detail::check_members(members, "fuse_seg");
  WeightStack<T> ws = weight_stack(members, num_classes);
  const int64_t batch = members[0].shape()[0];
  const int64_t inner = members[0].numel() / (batch * num_classes);
  Tensor<T> fused(members[0].shape());
  for (size_t j = 0; j < members.size(); ++j)
    for (int64_t b = 0; b < batch; ++b)
      for (int64_t c = 0; c < num_classes; ++c) {
        const T* w = ws.maps[j].data() + b * inner;
        const T* m = members[j].data() + (b * num_classes + c) * inner;
        T* f = fused.data() + (b * num_classes + c) * inner;
        for (int64_t i = 0; i < inner; ++i) f[i] += w[i] * m[i];
      }
  return FusedPrediction<T>{FusedKind::seg, fused, entropy_map(fused, num_classes)};
}

// Mean of the member fields; uncertainty is the population variance.
template <typename T>
FusedPrediction<T> fuse_sdf(const std::vector<Tensor<T>>& members) {
  NoGradScope<T> ng;
  detail::check_members(members, "fuse_sdf");
  const T inv_j = T(1) / static_cast<T>(members.size());
  Tensor<T> mean(members[0].shape());
  for (const auto& m : members)
    for (int64_t i = 0; i < mean.numel(); ++i) mean.at(i) += m.at(i);
  for (int64_t i = 0; i < mean.numel(); ++i) mean.at(i) *= inv_j;
  Tensor<T> var(members[0].shape());
  for (const auto& m : members)
    for (int64_t i = 0; i < var.numel(); ++i) {
      const T d = m.at(i) - mean.at(i);
      var.at(i) += d * d;
    }
  for (int64_t i = 0; i < var.numel(); ++i) var.at(i) *= inv_j;
  return FusedPrediction<T>{FusedKind::sdf, mean, var};
}

// Concatenates a 2D member stack (in (b*d, c, w, h) layout) with a 3D stack
// after mapping the 2D members back to volumes. Result is ready for
// fuse_seg / fuse_sdf.
template <typename T>
std::vector<Tensor<T>> hybrid_concat(const std::vector<Tensor<T>>& two_d,
                                     const std::vector<Tensor<T>>& three_d,
                                     int64_t volume_batch) {
  NoGradScope<T> ng;
  HDT_CHECK(!two_d.empty() && two_d.size() == three_d.size(),
            "hybrid_concat: member count mismatch, 2D has ", two_d.size(), " and 3D has ",
            three_d.size());
  std::vector<Tensor<T>> out;
  out.reserve(2 * two_d.size());
  for (const auto& m : two_d) {
    Tensor<T> vol = reshape_batch_to_slices(m, volume_batch);
    HDT_CHECK(vol.shape() == three_d[0].shape(),
              "hybrid_concat: reshaped 2D member shape ", shape_str(vol.shape()),
              " does not match 3D member shape ", shape_str(three_d[0].shape()));
    out.push_back(std::move(vol));
  }
  for (const auto& m : three_d) {
    HDT_CHECK(m.shape() == three_d[0].shape(), "hybrid_concat: 3D member shape ",
              shape_str(m.shape()), " does not match ", shape_str(three_d[0].shape()));
    out.push_back(m);
  }
  return out;
}

}  // namespace hdt
