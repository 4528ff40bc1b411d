#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "hdteacher/data_io.hpp"
#include "hdteacher/fusion.hpp"
#include "hdteacher/losses.hpp"
#include "hdteacher/metrics.hpp"
#include "hdteacher/sdf.hpp"
#include "hdteacher/tensor_nn.hpp"

namespace py = pybind11;

namespace {

template <typename T>
hdt::Tensor<T> tensor_from(const py::array_t<T, py::array::c_style | py::array::forcecast>& a) {
  hdt::Shape shape(static_cast<size_t>(a.ndim()));
  for (py::ssize_t i = 0; i < a.ndim(); ++i) shape[static_cast<size_t>(i)] = a.shape(i);
  std::vector<T> data(a.data(), a.data() + a.size());
  return hdt::Tensor<T>::from_vector(std::move(shape), std::move(data));
}

template <typename T>
py::array_t<T> array_from(const hdt::Tensor<T>& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<T> out(shape);
  std::copy(t.data(), t.data() + t.numel(), out.mutable_data());
  return out;
}

hdt::LabelVolume label_volume_from(const py::array_t<uint8_t, py::array::c_style>& labels,
                                   std::array<double, 3> spacing, int num_classes) {
  HDT_CHECK(labels.ndim() == 3, "labels must be a (d, w, h) array");
  hdt::LabelVolume v;
  v.dims = {labels.shape(0), labels.shape(1), labels.shape(2)};
  v.spacing = spacing;
  v.num_classes = num_classes;
  v.labels.assign(labels.data(), labels.data() + labels.size());
  return v;
}

py::array_t<double> channel_array(const hdt::SdfChannel& ch) {
  py::array_t<double> out({ch.dims[0], ch.dims[1], ch.dims[2]});
  std::copy(ch.values.begin(), ch.values.end(), out.mutable_data());
  return out;
}

}  // namespace

PYBIND11_MODULE(_hdteacher, m) {
  m.doc() = "core operations of the hybrid dual mean-teacher pipeline";

  py::register_exception<hdt::Error>(m, "HdtError");

  m.def(
      "compute_sdf",
      [](py::array_t<uint8_t, py::array::c_style> labels, std::array<double, 3> spacing,
         int class_id, int num_classes) {
        return channel_array(hdt::compute_sdf(label_volume_from(labels, spacing, num_classes),
                                              class_id));
      },
      py::arg("labels"), py::arg("spacing"), py::arg("class_id") = 1,
      py::arg("num_classes") = 2,
      "Normalized signed distance field of one class (negative inside, zero on the boundary).");

  m.def(
      "oracle_sdf",
      [](py::array_t<uint8_t, py::array::c_style> labels, std::array<double, 3> spacing,
         int class_id, int num_classes) {
        return channel_array(hdt::oracle_sdf(label_volume_from(labels, spacing, num_classes),
                                             class_id));
      },
      py::arg("labels"), py::arg("spacing"), py::arg("class_id") = 1,
      py::arg("num_classes") = 2, "Brute-force reference SDF (volumes up to 32^3).");

  m.def(
      "entropy_map",
      [](py::array_t<double, py::array::c_style | py::array::forcecast> probs,
         int64_t num_classes) { return array_from(hdt::entropy_map(tensor_from(probs), num_classes)); },
      py::arg("probs"), py::arg("num_classes"),
      "Per-location normalized entropy of a probability map [b, C, ...].");

  m.def(
      "fuse_seg",
      [](const std::vector<py::array_t<double, py::array::c_style | py::array::forcecast>>& members,
         int64_t num_classes) {
        std::vector<hdt::Tensor<double>> ms;
        for (const auto& a : members) ms.push_back(tensor_from(a));
        auto fused = hdt::fuse_seg(ms, num_classes);
        return py::make_tuple(array_from(fused.value), array_from(fused.uncertainty));
      },
      py::arg("members"), py::arg("num_classes"),
      "Confidence-weighted fusion of intermediate probability maps -> (value, entropy).");

  m.def(
      "fuse_sdf",
      [](const std::vector<py::array_t<double, py::array::c_style | py::array::forcecast>>& members) {
        std::vector<hdt::Tensor<double>> ms;
        for (const auto& a : members) ms.push_back(tensor_from(a));
        auto fused = hdt::fuse_sdf(ms);
        return py::make_tuple(array_from(fused.value), array_from(fused.uncertainty));
      },
      py::arg("members"), "Mean and population variance of SDF members -> (value, variance).");

  m.def(
      "softmax",
      [](py::array_t<double, py::array::c_style | py::array::forcecast> x, int64_t axis) {
        return array_from(hdt::softmax(tensor_from(x), axis));
      },
      py::arg("x"), py::arg("axis"));

  m.def(
      "conv",
      [](py::array_t<double, py::array::c_style | py::array::forcecast> input,
         py::array_t<double, py::array::c_style | py::array::forcecast> kernel,
         int spatial_rank, int64_t stride, int64_t pad) {
        return array_from(hdt::conv(tensor_from(input), tensor_from(kernel), spatial_rank,
                                    stride, pad));
      },
      py::arg("input"), py::arg("kernel"), py::arg("spatial_rank"), py::arg("stride") = 1,
      py::arg("pad") = 0, "Direct cross-correlation, input [b,c,spatial...].");

  m.def(
      "dice_loss",
      [](py::array_t<double, py::array::c_style | py::array::forcecast> probs,
         py::array_t<uint8_t, py::array::c_style> labels) {
        std::vector<uint8_t> l(labels.data(), labels.data() + labels.size());
        return hdt::dice_loss(tensor_from(probs), l).scalar();
      },
      py::arg("probs"), py::arg("labels"));

  m.def("warmup_lambda", &hdt::warmup_lambda, py::arg("step"), py::arg("max_steps"),
        "Gaussian warm-up 0.1*exp(-5(1 - i/i_max)^2).");

  m.def(
      "overlap_metrics",
      [](py::array_t<uint8_t, py::array::c_style> pred,
         py::array_t<uint8_t, py::array::c_style> ref, std::array<double, 3> spacing,
         int class_id, int num_classes) {
        return hdt::overlap_metrics(label_volume_from(pred, spacing, num_classes),
                                    label_volume_from(ref, spacing, num_classes), class_id);
      },
      py::arg("pred"), py::arg("ref"), py::arg("spacing"), py::arg("class_id") = 1,
      py::arg("num_classes") = 2, "(dice, jaccard) for one class.");

  m.def(
      "surface_metrics",
      [](py::array_t<uint8_t, py::array::c_style> pred,
         py::array_t<uint8_t, py::array::c_style> ref, std::array<double, 3> spacing,
         int class_id, int num_classes) -> py::object {
        auto sm = hdt::surface_metrics(label_volume_from(pred, spacing, num_classes),
                                       label_volume_from(ref, spacing, num_classes), class_id);
        if (!sm.defined()) return py::none();
        return py::make_tuple(sm.hd95, sm.asd);
      },
      py::arg("pred"), py::arg("ref"), py::arg("spacing"), py::arg("class_id") = 1,
      py::arg("num_classes") = 2, "(hd95_mm, asd_mm), or None when undefined.");

  m.def(
      "generate_volume",
      [](std::array<int64_t, 3> dims, std::array<double, 3> spacing, int num_classes,
         uint64_t seed, int64_t index) {
        hdt::SyntheticSpec spec;
        spec.dims = dims;
        spec.spacing = spacing;
        spec.num_classes = num_classes;
        spec.seed = seed;
        auto v = hdt::generate_synthetic(spec, 1, index, /*with_sdf=*/false)[0];
        py::array_t<float> x({dims[0], dims[1], dims[2]});
        std::copy(v.intensity.begin(), v.intensity.end(), x.mutable_data());
        py::array_t<uint8_t> y({dims[0], dims[1], dims[2]});
        std::copy(v.labels.begin(), v.labels.end(), y.mutable_data());
        return py::make_tuple(x, y);
      },
      py::arg("dims"), py::arg("spacing"), py::arg("num_classes") = 2, py::arg("seed") = 1234,
      py::arg("index") = 0,
      "One synthetic (intensity, labels) volume; deterministic in (seed, index).");
}
