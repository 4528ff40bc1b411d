#pragma once

#include <string>
#include <vector>

#include "hdteacher/fusion.hpp"
#include "hdteacher/tensor_nn.hpp"

namespace hdt {

struct UNetConfig {
  int spatial_rank = 2;  // 2 | 3
  int64_t in_channels = 1;
  int64_t num_classes = 2;
  int64_t base_features = 32;
  int depth = 2;  // number of down/up levels
  double teacher_dropout_rate = 0.5;

  void validate() const {
    HDT_CHECK(spatial_rank == 2 || spatial_rank == 3, "spatial_rank must be 2 or 3");
    HDT_CHECK(in_channels >= 1, "in_channels must be >= 1");
    HDT_CHECK(num_classes >= 2, "num_classes must be >= 2");
    HDT_CHECK(base_features >= 1, "base_features must be >= 1");
    HDT_CHECK(depth >= 1, "depth must be >= 1");
    HDT_CHECK(teacher_dropout_rate >= 0.0 && teacher_dropout_rate < 1.0,
              "teacher_dropout_rate must be in [0, 1)");
  }
};

template <typename T>
struct ConvLayer {
  Tensor<T> weight;  // [out, in, k...]
  Tensor<T> bias;    // [out]
};

template <typename T>
struct EncoderLevel {
  ConvLayer<T> c1, c2;
};

template <typename T>
struct DecoderLevel {
  ConvLayer<T> up, c1, c2;
};

template <typename T>
struct DecoderPath {
  std::vector<DecoderLevel<T>> levels;  // index = feature level, applied top-down
  ConvLayer<T> head;                    // 1x..x1 conv to num_classes
};

// Per-pass outputs: activated predictions plus the last decoder block's
// features (pre-head), which feed the hybrid fusion.
template <typename T>
struct StudentOutput {
  Tensor<T> seg_probs;  // softmax over the class axis
  Tensor<T> sdf_pred;   // tanh
  Tensor<T> seg_feat;
  Tensor<T> sdf_feat;
};

// K intermediate teacher outputs produced under dropout + input noise.
template <typename T>
struct McEnsemble {
  std::vector<Tensor<T>> seg;
  std::vector<Tensor<T>> sdf;

  int64_t members() const { return static_cast<int64_t>(seg.size()); }
};

// U-Net with one shared encoder and two decoders (segmentation + SDF).
// The teacher variant carries a dropout layer after the encoder's last
// block; everything else is architecturally identical to the student.
template <typename T>
class DualDecoderNet {
 public:
  UNetConfig cfg;
  bool has_dropout = false;
  std::vector<EncoderLevel<T>> enc;  // depth levels + bottleneck at the end
  DecoderPath<T> seg, sdf;

  static DualDecoderNet make(const UNetConfig& cfg, bool teacher, Rng& rng) {
    cfg.validate();
    DualDecoderNet net;
    net.cfg = cfg;
    net.has_dropout = teacher;
    const int64_t F = cfg.base_features;
    auto feat = [&](int level) { return F << level; };

    for (int lvl = 0; lvl <= cfg.depth; ++lvl) {
      const int64_t cin = lvl == 0 ? cfg.in_channels : feat(lvl - 1);
      EncoderLevel<T> e;
      e.c1 = net.make_conv(cin, feat(lvl), 3, rng);
      e.c2 = net.make_conv(feat(lvl), feat(lvl), 3, rng);
      net.enc.push_back(std::move(e));
    }
    for (DecoderPath<T>* dec : {&net.seg, &net.sdf}) {
      dec->levels.resize(cfg.depth);
      for (int lvl = cfg.depth - 1; lvl >= 0; --lvl) {
        DecoderLevel<T> d;
        d.up = net.make_conv(feat(lvl + 1), feat(lvl), 3, rng);
        d.c1 = net.make_conv(2 * feat(lvl), feat(lvl), 3, rng);
        d.c2 = net.make_conv(feat(lvl), feat(lvl), 3, rng);
        dec->levels[lvl] = std::move(d);
      }
      dec->head = net.make_conv(F, cfg.num_classes, 1, rng);
    }
    return net;
  }

  std::vector<NamedParam<T>> params() {
    std::vector<NamedParam<T>> out;
    auto push = [&out](const std::string& name, ConvLayer<T>& l) {
      out.push_back({name + ".w", l.weight});
      out.push_back({name + ".b", l.bias});
    };
    for (size_t i = 0; i < enc.size(); ++i) {
      push("enc" + std::to_string(i) + ".c1", enc[i].c1);
      push("enc" + std::to_string(i) + ".c2", enc[i].c2);
    }
    const char* names[2] = {"seg", "sdf"};
    DecoderPath<T>* decs[2] = {&seg, &sdf};
    for (int d = 0; d < 2; ++d) {
      for (size_t i = 0; i < decs[d]->levels.size(); ++i) {
        const std::string base = std::string(names[d]) + std::to_string(i);
        push(base + ".up", decs[d]->levels[i].up);
        push(base + ".c1", decs[d]->levels[i].c1);
        push(base + ".c2", decs[d]->levels[i].c2);
      }
      push(std::string(names[d]) + ".head", decs[d]->head);
    }
    return out;
  }

  void set_requires_grad(bool v) {
    for (auto& p : params()) p.tensor.set_requires_grad(v);
  }

  // Copies parameter values from an architecturally identical net.
  void copy_weights_from(DualDecoderNet& other) {
    auto mine = params();
    auto theirs = other.params();
    HDT_CHECK(mine.size() == theirs.size(), "copy_weights_from: parameter count mismatch");
    for (size_t i = 0; i < mine.size(); ++i) {
      HDT_CHECK(mine[i].tensor.shape() == theirs[i].tensor.shape(),
                "copy_weights_from: shape mismatch for '", mine[i].name, "'");
      mine[i].tensor.vec() = theirs[i].tensor.vec();
    }
  }

 private:
  ConvLayer<T> make_conv(int64_t cin, int64_t cout, int64_t k, Rng& rng) {
    Shape ks{cout, cin};
    int64_t fan_in = cin;
    for (int s = 0; s < cfg.spatial_rank; ++s) {
      ks.push_back(k);
      fan_in *= k;
    }
    ConvLayer<T> layer;
    const T stddev = static_cast<T>(std::sqrt(2.0 / static_cast<double>(fan_in)));
    layer.weight = randn<T>(ks, rng, stddev);
    layer.weight.set_requires_grad(true);
    layer.bias = Tensor<T>(Shape{cout}, T(0), true);
    return layer;
  }
};

namespace detail {

template <typename T>
Tensor<T> conv_block(const Tensor<T>& x, const ConvLayer<T>& l, int rank, int64_t pad) {
  return relu(add_channel_bias(conv(x, l.weight, rank, 1, pad), l.bias));
}

template <typename T>
struct EncoderOut {
  std::vector<Tensor<T>> skips;
  Tensor<T> bottom;
};

template <typename T>
EncoderOut<T> run_encoder(const DualDecoderNet<T>& net, const Tensor<T>& x, bool apply_dropout,
                          Rng& rng) {
  const int rank = net.cfg.spatial_rank;
  EncoderOut<T> out;
  Tensor<T> cur = x;
  for (int lvl = 0; lvl < net.cfg.depth; ++lvl) {
    cur = conv_block(cur, net.enc[lvl].c1, rank, 1);
    cur = conv_block(cur, net.enc[lvl].c2, rank, 1);
    out.skips.push_back(cur);
    cur = max_pool2(cur, rank);
  }
  cur = conv_block(cur, net.enc[net.cfg.depth].c1, rank, 1);
  cur = conv_block(cur, net.enc[net.cfg.depth].c2, rank, 1);
  if (net.has_dropout && apply_dropout)
    cur = dropout(cur, net.cfg.teacher_dropout_rate, true, rng);
  out.bottom = cur;
  return out;
}

template <typename T>
Tensor<T> run_decoder(const DualDecoderNet<T>& net, const DecoderPath<T>& dec,
                      const EncoderOut<T>& eo) {
  const int rank = net.cfg.spatial_rank;
  Tensor<T> cur = eo.bottom;
  for (int lvl = net.cfg.depth - 1; lvl >= 0; --lvl) {
    cur = conv_block(upsample_nearest2(cur, rank), dec.levels[lvl].up, rank, 1);
    cur = concat_channels(cur, eo.skips[lvl]);
    cur = conv_block(cur, dec.levels[lvl].c1, rank, 1);
    cur = conv_block(cur, dec.levels[lvl].c2, rank, 1);
  }
  return cur;
}

template <typename T>
Tensor<T> apply_head(const Tensor<T>& feat, const ConvLayer<T>& head, int rank) {
  return add_channel_bias(conv(feat, head.weight, rank, 1, 0), head.bias);
}

}  // namespace detail

// One full pass: input noise, shared encoder, both decoders, both heads.
template <typename T>
StudentOutput<T> forward_pass(const DualDecoderNet<T>& net, const Tensor<T>& x, T noise_sigma,
                              Rng& rng, bool apply_dropout) {
  HDT_CHECK(x.rank() == net.cfg.spatial_rank + 2, "forward: input rank ", x.rank(),
            " does not match a ", net.cfg.spatial_rank, "D network");
  HDT_CHECK(x.shape()[1] == net.cfg.in_channels, "forward: input has ", x.shape()[1],
            " channels, network expects ", net.cfg.in_channels);
  HDT_CHECK(noise_sigma >= T(0), "forward: noise_sigma must be >= 0");
  const Tensor<T> noisy = add_input_noise(x, noise_sigma, rng);
  auto eo = detail::run_encoder(net, noisy, apply_dropout, rng);
  StudentOutput<T> out;
  out.seg_feat = detail::run_decoder(net, net.seg, eo);
  out.sdf_feat = detail::run_decoder(net, net.sdf, eo);
  out.seg_probs = softmax(detail::apply_head(out.seg_feat, net.seg.head, net.cfg.spatial_rank), 1);
  out.sdf_pred = tanh(detail::apply_head(out.sdf_feat, net.sdf.head, net.cfg.spatial_rank));
  return out;
}

template <typename T>
StudentOutput<T> forward_student(const DualDecoderNet<T>& net, const Tensor<T>& x,
                                 T noise_sigma, Rng& rng) {
  return forward_pass(net, x, noise_sigma, rng, /*apply_dropout=*/false);
}

// K stochastic passes under fresh dropout masks and input noise; gradients
// are never recorded.
template <typename T>
McEnsemble<T> forward_teacher_mc(const DualDecoderNet<T>& net, const Tensor<T>& x, int64_t k,
                                 T noise_sigma, Rng& rng) {
  HDT_CHECK(k >= 1, "forward_teacher_mc: K must be >= 1, got ", k);
  NoGradScope<T> ng;
  McEnsemble<T> ens;
  for (int64_t j = 0; j < k; ++j) {
    StudentOutput<T> o = forward_pass(net, x, noise_sigma, rng, /*apply_dropout=*/true);
    ens.seg.push_back(std::move(o.seg_probs));
    ens.sdf.push_back(std::move(o.sdf_pred));
  }
  return ens;
}

// 3D pass augmented by the 2D student: the 2D segmentation maps are
// concatenated onto the input volume, and the 2D last-block features are
// summed with the 3D ones to form hybrid features that feed the heads.
template <typename T>
StudentOutput<T> forward_3d_augmented(const DualDecoderNet<T>& net3d, const Tensor<T>& x3d,
                                      const StudentOutput<T>& out2d, T noise_sigma, Rng& rng,
                                      bool apply_dropout = false) {
  HDT_CHECK(net3d.cfg.spatial_rank == 3, "forward_3d_augmented: not a 3D network");
  HDT_CHECK(x3d.rank() == 5, "forward_3d_augmented: input must be rank 5, got ",
            shape_str(x3d.shape()));
  const int64_t b = x3d.shape()[0];
  Tensor<T> seg2d_vol = reshape_batch_to_slices(out2d.seg_probs, b);
  Tensor<T> x_aug = concat_channels(x3d, seg2d_vol);
  HDT_CHECK(x_aug.shape()[1] == net3d.cfg.in_channels, "forward_3d_augmented: augmented input ",
            shape_str(x_aug.shape()), " has ", x_aug.shape()[1],
            " channels, network expects ", net3d.cfg.in_channels);
  x_aug = add_input_noise(x_aug, noise_sigma, rng);

  auto eo = detail::run_encoder(net3d, x_aug, apply_dropout, rng);
  Tensor<T> f3d_seg = detail::run_decoder(net3d, net3d.seg, eo);
  Tensor<T> f3d_sdf = detail::run_decoder(net3d, net3d.sdf, eo);

  Tensor<T> f2d_seg = reshape_batch_to_slices(out2d.seg_feat, b);
  Tensor<T> f2d_sdf = reshape_batch_to_slices(out2d.sdf_feat, b);
  HDT_CHECK(f2d_seg.shape() == f3d_seg.shape(),
            "forward_3d_augmented: 2D feature shape ", shape_str(f2d_seg.shape()),
            " does not match 3D feature shape ", shape_str(f3d_seg.shape()));

  StudentOutput<T> out;
  out.seg_feat = add(f3d_seg, f2d_seg);
  out.sdf_feat = add(f3d_sdf, f2d_sdf);
  out.seg_probs = softmax(detail::apply_head(out.seg_feat, net3d.seg.head, 3), 1);
  out.sdf_pred = tanh(detail::apply_head(out.sdf_feat, net3d.sdf.head, 3));
  return out;
}

template <typename T>
McEnsemble<T> forward_3d_teacher_mc(const DualDecoderNet<T>& net3d, const Tensor<T>& x3d,
                                    const StudentOutput<T>& out2d, int64_t k, T noise_sigma,
                                    Rng& rng) {
  HDT_CHECK(k >= 1, "forward_3d_teacher_mc: K must be >= 1, got ", k);
  NoGradScope<T> ng;
  McEnsemble<T> ens;
  for (int64_t j = 0; j < k; ++j) {
    StudentOutput<T> o =
        forward_3d_augmented(net3d, x3d, out2d, noise_sigma, rng, /*apply_dropout=*/true);
    ens.seg.push_back(std::move(o.seg_probs));
    ens.sdf.push_back(std::move(o.sdf_pred));
  }
  return ens;
}

// Concatenates the 2D and 3D teacher ensembles into the 2K hybrid stacks
// (volumetric layout), for fuse_seg / fuse_sdf.
template <typename T>
McEnsemble<T> hybrid_concat(const McEnsemble<T>& two_d, const McEnsemble<T>& three_d,
                            int64_t volume_batch) {
  McEnsemble<T> out;
  out.seg = hybrid_concat(two_d.seg, three_d.seg, volume_batch);
  out.sdf = hybrid_concat(two_d.sdf, three_d.sdf, volume_batch);
  return out;
}

}  // namespace hdt
