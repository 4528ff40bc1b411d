// Acceptance suite: one self-contained check per criterion, each printing a
// single PASS/FAIL line. Run with --criterion N for one criterion, or with
// no arguments for all of them.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "hdteacher/config.hpp"
#include "hdteacher/trainer.hpp"
#include "oracles.hpp"

using namespace hdt;
namespace fs = std::filesystem;

namespace {

double now_seconds() {
  using clock = std::chrono::steady_clock;
  static const auto start = clock::now();
  return std::chrono::duration<double>(clock::now() - start).count();
}

struct Check {
  bool ok = true;
  std::ostringstream log;

  void expect(bool cond, const std::string& what) {
    if (!cond) {
      ok = false;
      log << "    failed: " << what << "\n";
    }
  }
  void expect_le(double value, double bound, const std::string& what) {
    if (!(value <= bound)) {
      ok = false;
      log << "    failed: " << what << " (" << value << " > " << bound << ")\n";
    }
  }
};

Tensor<double> rand_t(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  return rand_uniform<double>(shape, rng, lo, hi);
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness of every differentiable primitive + the full net
// ---------------------------------------------------------------------------

void criterion1(Check& c) {
  const double start = now_seconds();
  Rng rng(101);
  auto weigh = [](Tensor<double> y) {
    Tensor<double> w(y.shape());
    for (int64_t i = 0; i < w.numel(); ++i) w.at(i) = 0.25 + 0.13 * static_cast<double>(i % 5);
    return sum_all(scale_by_map(y, w));
  };
  // five random instances per primitive, each with its own shape and inputs
  auto run = [&](const char* name, std::function<double(int, Rng&)> one_instance) {
    double worst = 0.0;
    for (int inst = 0; inst < 5; ++inst) worst = std::max(worst, one_instance(inst, rng));
    c.expect_le(worst, 1e-4, std::string("grad_check ") + name);
  };
  // batch extent varies across instances; inner extents stay op-compatible
  auto vary = [](int inst, Shape base) {
    base[0] += inst % 3;
    return base;
  };

  run("add", [&](int i, Rng& r) {
    auto o = rand_t(r, vary(i, {3, 4}), 0.3, 1.2);
    return grad_check([&](const Tensor<double>& t) { return sum_all(add(t, o)); },
                      rand_t(r, o.shape()));
  });
  run("sub", [&](int i, Rng& r) {
    auto o = rand_t(r, vary(i, {3, 4}), 0.3, 1.2);
    return grad_check([&](const Tensor<double>& t) { return sum_all(sub(t, o)); },
                      rand_t(r, o.shape()));
  });
  run("mul", [&](int i, Rng& r) {
    auto o = rand_t(r, vary(i, {3, 4}), 0.3, 1.2);
    return grad_check([&](const Tensor<double>& t) { return weigh(mul(t, o)); },
                      rand_t(r, o.shape()));
  });
  run("div", [&](int i, Rng& r) {
    auto o = rand_t(r, vary(i, {3, 4}), 0.3, 1.2);
    return grad_check([&](const Tensor<double>& t) { return weigh(div(o, t)); },
                      rand_t(r, o.shape(), 0.4, 1.6));
  });
  auto unary = [&](const char* name, auto op, double lo, double hi) {
    run(name, [&, op, lo, hi](int i, Rng& r) {
      return grad_check([&](const Tensor<double>& t) { return weigh(op(t)); },
                        rand_t(r, vary(i, {3, 4}), lo, hi));
    });
  };
  unary("exp", [](const Tensor<double>& t) { return exp(t); }, -1.0, 1.0);
  unary("log", [](const Tensor<double>& t) { return log(t); }, 0.3, 2.0);
  unary("tanh", [](const Tensor<double>& t) { return tanh(t); }, -1.0, 1.0);
  unary("square", [](const Tensor<double>& t) { return square(t); }, -1.0, 1.0);
  unary("neg", [](const Tensor<double>& t) { return neg(t); }, -1.0, 1.0);
  unary("add_scalar", [](const Tensor<double>& t) { return add_scalar(t, 0.7); }, -1.0, 1.0);
  unary("mul_scalar", [](const Tensor<double>& t) { return mul_scalar(t, -1.4); }, -1.0, 1.0);
  unary("relu", [](const Tensor<double>& t) { return relu(t); }, 0.2, 1.5);
  run("softmax", [&](int i, Rng& r) {
    return grad_check([&](const Tensor<double>& t) { return weigh(softmax(t, 1)); },
                      rand_t(r, vary(i, {2, 4, 5})));
  });
  unary("sum_all", [](const Tensor<double>& t) { return sum_all(t); }, -1.0, 1.0);
  unary("mean_all", [](const Tensor<double>& t) { return mean_all(t); }, -1.0, 1.0);
  run("sum_per_channel", [&](int i, Rng& r) {
    return grad_check([&](const Tensor<double>& t) { return weigh(sum_per_channel(t)); },
                      rand_t(r, vary(i, {2, 3, 4})));
  });

  run("conv2d/input", [&](int i, Rng& r) {
    auto k = rand_t(r, Shape{2, 2, 3, 3});
    return grad_check([&](const Tensor<double>& t) { return weigh(conv(t, k, 2, 1, 1)); },
                      rand_t(r, vary(i, {1, 2, 6, 6})));
  });
  run("conv2d/kernel", [&](int i, Rng& r) {
    auto x = rand_t(r, vary(i, {1, 2, 6, 6}));
    return grad_check([&](const Tensor<double>& t) { return weigh(conv(x, t, 2, 1, 1)); },
                      rand_t(r, Shape{2, 2, 3, 3}));
  });
  run("conv2d/stride2", [&](int i, Rng& r) {
    auto k = rand_t(r, Shape{2, 2, 3, 3});
    return grad_check([&](const Tensor<double>& t) { return weigh(conv(t, k, 2, 2, 1)); },
                      rand_t(r, vary(i, {1, 2, 7, 7})));
  });
  run("conv3d/input", [&](int i, Rng& r) {
    auto k = rand_t(r, Shape{2, 2, 3, 3, 3});
    return grad_check([&](const Tensor<double>& t) { return weigh(conv(t, k, 3, 1, 1)); },
                      rand_t(r, vary(i, {1, 2, 4, 4, 4})));
  });
  run("conv3d/kernel", [&](int i, Rng& r) {
    auto x = rand_t(r, vary(i, {1, 2, 4, 4, 4}));
    return grad_check([&](const Tensor<double>& t) { return weigh(conv(x, t, 3, 1, 1)); },
                      rand_t(r, Shape{2, 2, 3, 3, 3}));
  });
  run("max_pool2d", [&](int i, Rng& r) {
    return grad_check([&](const Tensor<double>& t) { return weigh(max_pool2(t, 2)); },
                      rand_t(r, vary(i, {2, 2, 4, 4})));
  });
  run("max_pool3d", [&](int i, Rng& r) {
    return grad_check([&](const Tensor<double>& t) { return weigh(max_pool2(t, 3)); },
                      rand_t(r, vary(i, {1, 2, 4, 4, 2})));
  });
  run("upsample2d", [&](int i, Rng& r) {
    return grad_check([&](const Tensor<double>& t) { return weigh(upsample_nearest2(t, 2)); },
                      rand_t(r, vary(i, {2, 2, 3, 3})));
  });
  run("upsample3d", [&](int i, Rng& r) {
    return grad_check([&](const Tensor<double>& t) { return weigh(upsample_nearest2(t, 3)); },
                      rand_t(r, vary(i, {1, 2, 2, 3, 2})));
  });
  run("concat_channels", [&](int i, Rng& r) {
    auto x = rand_t(r, vary(i, {2, 2, 4, 4}));
    Shape os = x.shape();
    os[1] = 3;
    auto o = rand_t(r, os);
    return grad_check([&](const Tensor<double>& t) { return weigh(concat_channels(t, o)); }, x);
  });
  run("narrow_batch", [&](int i, Rng& r) {
    return grad_check([&](const Tensor<double>& t) { return weigh(narrow_batch(t, 1, 2)); },
                      rand_t(r, vary(i, {3, 2, 4})));
  });
  run("add_channel_bias/x", [&](int i, Rng& r) {
    auto b = rand_t(r, Shape{3});
    return grad_check([&](const Tensor<double>& t) { return weigh(add_channel_bias(t, b)); },
                      rand_t(r, vary(i, {2, 3, 5})));
  });
  run("add_channel_bias/bias", [&](int i, Rng& r) {
    auto x = rand_t(r, vary(i, {2, 3, 5}));
    return grad_check([&](const Tensor<double>& t) { return weigh(add_channel_bias(x, t)); },
                      rand_t(r, Shape{3}));
  });
  run("reshape_c", [&](int i, Rng& r) {
    return grad_check(
        [&](const Tensor<double>& t) { return weigh(reshape_slices_to_batch(t)); },
        rand_t(r, vary(i, {2, 2, 4, 3, 3})));
  });
  run("reshape_c_inv", [&](int i, Rng& r) {
    Shape s{8 + 4 * (i % 3), 2, 3, 3};
    return grad_check(
        [&](const Tensor<double>& t) { return weigh(reshape_batch_to_slices(t, 2)); },
        rand_t(r, s));
  });
  run("dropout", [&](int i, Rng& r) {
    const uint64_t mask_seed = 404 + i;
    return grad_check(
        [&, mask_seed](const Tensor<double>& t) {
          Rng frozen(mask_seed);
          return weigh(dropout(t, 0.35, true, frozen));
        },
        rand_t(r, vary(i, {4, 6})));
  });
  run("scale_by_map", [&](int i, Rng& r) {
    auto x = rand_t(r, vary(i, {2, 3, 4}));
    Shape us = x.shape();
    us[1] = 1;
    auto u = rand_t(r, us, 0.1, 1.0);
    return grad_check([&](const Tensor<double>& t) { return sum_all(scale_by_map(t, u)); }, x);
  });

  // full dual-decoder networks, input and parameter sides
  UNetConfig cfg2;
  cfg2.spatial_rank = 2;
  cfg2.base_features = 4;
  cfg2.depth = 1;
  Rng init(55);
  auto net2 = DualDecoderNet<double>::make(cfg2, false, init);
  std::vector<uint8_t> labels(64);
  for (int i = 0; i < 64; ++i) labels[i] = (i / 8 + i) % 2;
  auto sdf_t = rand_t(rng, Shape{1, 2, 8, 8}, -0.8, 0.8);
  auto net_loss = [&](const Tensor<double>& input) {
    Rng r(66);
    auto o = forward_student(net2, input, 0.0, r);
    auto sup = supervised_loss(o.seg_probs, labels, o.sdf_pred, sdf_t, 1);
    return add(sup.seg, sup.sdf);
  };
  {
    double worst = 0.0;
    for (int inst = 0; inst < 5; ++inst)
      worst = std::max(worst, grad_check(net_loss, rand_t(rng, Shape{1, 1, 8, 8})));
    c.expect_le(worst, 1e-4, "grad_check full 2D dual-decoder net (input)");
    auto x_fixed = rand_t(rng, Shape{1, 1, 8, 8});
    auto wrt_param = [&](const Tensor<double>&) { return net_loss(x_fixed); };
    c.expect_le(grad_check(wrt_param, net2.enc[0].c1.weight), 1e-4,
                "grad_check net (encoder weight)");
    c.expect_le(grad_check(wrt_param, net2.seg.head.weight), 1e-4,
                "grad_check net (seg head weight)");
    c.expect_le(grad_check(wrt_param, net2.sdf.levels[0].c1.bias), 1e-4,
                "grad_check net (sdf decoder bias)");
  }
  // 3D dual-decoder net
  UNetConfig cfg3;
  cfg3.spatial_rank = 3;
  cfg3.base_features = 2;
  cfg3.depth = 1;
  auto net3 = DualDecoderNet<double>::make(cfg3, false, init);
  std::vector<uint8_t> labels3(64, 0);
  for (int i = 0; i < 64; i += 3) labels3[i] = 1;
  auto sdf3 = rand_t(rng, Shape{1, 2, 4, 4, 4}, -0.8, 0.8);
  {
    double worst = 0.0;
    for (int inst = 0; inst < 5; ++inst)
      worst = std::max(worst, grad_check(
                                  [&](const Tensor<double>& input) {
                                    Rng r(67);
                                    auto o = forward_student(net3, input, 0.0, r);
                                    auto sup = supervised_loss(o.seg_probs, labels3,
                                                               o.sdf_pred, sdf3, 1);
                                    return add(sup.seg, sup.sdf);
                                  },
                                  rand_t(rng, Shape{1, 1, 4, 4, 4})));
    c.expect_le(worst, 1e-4, "grad_check full 3D dual-decoder net (input)");
  }
  const double elapsed = now_seconds() - start;
  c.expect_le(elapsed, 120.0, "criterion 1 runtime (s)");
  c.log << "    elapsed " << elapsed << " s\n";
}

// ---------------------------------------------------------------------------
// 2. SDF oracle equivalence
// ---------------------------------------------------------------------------

void criterion2(Check& c) {
  const double start = now_seconds();
  Rng rng(202);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    LabelVolume v;
    v.dims = {2 + rng.below(7), 2 + rng.below(15), 2 + rng.below(15)};
    v.spacing = trial % 2 ? std::array<double, 3>{0.4, 0.4, 5.0}
                          : std::array<double, 3>{1.0, 1.0, 1.0};
    v.num_classes = 2;
    v.labels.assign(static_cast<size_t>(v.voxels()), 0);
    const double p = rng.uniform(0.03, 0.97);
    for (auto& l : v.labels) l = rng.uniform() < p ? 1 : 0;
    auto fast = compute_sdf(v, 1);
    auto ref = oracle_sdf(v, 1);
    for (size_t i = 0; i < fast.values.size(); ++i)
      worst = std::max(worst, std::abs(fast.values[i] - ref.values[i]));
  }
  c.expect_le(worst, 1e-9, "compute_sdf vs oracle_sdf on 100 random masks");
  const double elapsed = now_seconds() - start;
  c.expect_le(elapsed, 60.0, "criterion 2 runtime (s)");
  c.log << "    worst deviation " << worst << ", elapsed " << elapsed << " s\n";
}

// ---------------------------------------------------------------------------
// 3. Fusion math
// ---------------------------------------------------------------------------

void criterion3(Check& c) {
  // (a) entropy examples
  auto ent = [](double p, double q) {
    return entropy_map(Tensor<double>::from_vector(Shape{1, 2, 1}, {p, q}), 2).at(0);
  };
  c.expect(std::abs(ent(0.5, 0.5) - 1.0) <= 1e-9, "entropy(0.5,0.5) == 1");
  c.expect(std::abs(ent(1.0, 0.0)) <= 1e-4, "entropy(1,0) == 0");
  c.expect(std::abs(ent(0.9, 0.1) - 0.4690) <= 1e-4, "entropy(0.9,0.1) == 0.4690");

  // (b) weight stacks sum to 1 everywhere
  Rng rng(303);
  std::vector<Tensor<double>> members;
  for (int j = 0; j < 7; ++j)
    members.push_back(softmax(rand_t(rng, Shape{2, 3, 4, 4}, -3.0, 3.0), 1));
  auto ws = weight_stack(members, 3);
  double worst_sum = 0.0;
  for (int64_t i = 0; i < ws.maps[0].numel(); ++i) {
    double s = 0.0;
    for (const auto& w : ws.maps) s += w.at(i);
    worst_sum = std::max(worst_sum, std::abs(s - 1.0));
  }
  c.expect_le(worst_sum, 1e-6, "weight stack sums to 1");

  // (c) equal-entropy members fuse to the arithmetic mean
  auto a = Tensor<double>::from_vector(Shape{1, 2, 1}, {0.8, 0.2});
  auto b = Tensor<double>::from_vector(Shape{1, 2, 1}, {0.2, 0.8});
  auto mean_fused = fuse_seg<double>({a, b}, 2);
  c.expect(std::abs(mean_fused.value.at(0) - 0.5) <= 1e-6 &&
               std::abs(mean_fused.value.at(1) - 0.5) <= 1e-6,
           "equal-entropy members give the arithmetic mean");

  // (d) hand-derived two-member case
  auto onehot = Tensor<double>::from_vector(Shape{1, 2, 1}, {1.0, 0.0});
  auto half = Tensor<double>::from_vector(Shape{1, 2, 1}, {0.5, 0.5});
  auto fused = fuse_seg<double>({onehot, half}, 2);
  c.expect(std::abs(fused.value.at(0) - 0.8655) <= 1e-4 &&
               std::abs(fused.value.at(1) - 0.1345) <= 1e-4,
           "two-member fusion gives (0.8655, 0.1345)");

  // (e) hybrid fusion is member-order invariant
  const int64_t vb = 2;
  std::vector<Tensor<double>> m3, m2sliced;
  for (int j = 0; j < 3; ++j) {
    m3.push_back(softmax(rand_t(rng, Shape{vb, 2, 4, 3, 3}, -2.0, 2.0), 1));
    m2sliced.push_back(softmax(rand_t(rng, Shape{vb * 4, 2, 3, 3}, -2.0, 2.0), 1));
  }
  auto fwd_stack = hybrid_concat(m2sliced, m3, vb);
  std::vector<Tensor<double>> rev_stack(m3);
  for (const auto& m : m2sliced) rev_stack.push_back(reshape_batch_to_slices(m, vb));
  auto f1 = fuse_seg(fwd_stack, 2);
  auto f2 = fuse_seg(rev_stack, 2);
  auto s1 = fuse_sdf(fwd_stack);
  auto s2 = fuse_sdf(rev_stack);
  double worst_order = 0.0;
  for (int64_t i = 0; i < f1.value.numel(); ++i) {
    worst_order = std::max(worst_order, std::abs(f1.value.at(i) - f2.value.at(i)));
    worst_order = std::max(worst_order, std::abs(s1.value.at(i) - s2.value.at(i)));
    worst_order = std::max(worst_order, std::abs(s1.uncertainty.at(i) - s2.uncertainty.at(i)));
  }
  c.expect_le(worst_order, 1e-9, "hybrid fusion member-order invariance");
}

// ---------------------------------------------------------------------------
// 4. Loss composition
// ---------------------------------------------------------------------------

void criterion4(Check& c) {
  Rng rng(404);
  auto probs = [&](Shape s) { return softmax(rand_t(rng, s, -2.0, 2.0), 1); };
  auto labels_of = [&](int64_t n) {
    std::vector<uint8_t> l(static_cast<size_t>(n));
    for (auto& v : l) v = static_cast<uint8_t>(rng.below(2));
    return l;
  };

  for (int trial = 0; trial < 10; ++trial) {
    StudentOutput<double> out;
    out.seg_probs = probs(Shape{4, 2, 4, 4});
    out.sdf_pred = rand_t(rng, Shape{4, 2, 4, 4}, -0.9, 0.9);
    auto labels = labels_of(2 * 16);
    auto sdf_t = rand_t(rng, Shape{2, 2, 4, 4});
    FusedPrediction<double> seg_t{FusedKind::seg, probs(Shape{4, 2, 4, 4}),
                                  rand_t(rng, Shape{4, 1, 4, 4}, 0.0, 1.0)};
    FusedPrediction<double> sdf_tf{FusedKind::sdf, rand_t(rng, Shape{4, 2, 4, 4}),
                                   rand_t(rng, Shape{4, 2, 4, 4}, 0.0, 0.5)};
    const double lambda = warmup_lambda(rng.below(100), 100);
    auto res = stage_loss_single(out, labels, sdf_t, 2, &seg_t, &sdf_tf, lambda);
    const auto& bd = res.breakdown;
    const double recomposed = bd.supervised_seg + bd.supervised_sdf +
                              lambda * (bd.consistency_seg + bd.consistency_sdf);
    c.expect_le(std::abs(bd.total - recomposed), 1e-6, "single-stage composition identity");
    c.expect_le(std::abs(res.total.scalar() - recomposed), 1e-6,
                "single-stage autograd total equals breakdown");
  }

  for (int trial = 0; trial < 5; ++trial) {
    const int64_t b = 2, d = 2;
    StudentOutput<double> o2, o3;
    o2.seg_probs = probs(Shape{b * d, 2, 4, 4});
    o2.sdf_pred = rand_t(rng, Shape{b * d, 2, 4, 4}, -0.9, 0.9);
    o3.seg_probs = probs(Shape{b, 2, d, 4, 4});
    o3.sdf_pred = rand_t(rng, Shape{b, 2, d, 4, 4}, -0.9, 0.9);
    auto labels3 = labels_of(d * 16);
    auto sdf3 = rand_t(rng, Shape{1, 2, d, 4, 4});
    auto sdf2 = rand_t(rng, Shape{d, 2, 4, 4});
    FusedPrediction<double> seg_h{FusedKind::seg, probs(Shape{b, 2, d, 4, 4}),
                                  rand_t(rng, Shape{b, 1, d, 4, 4}, 0.0, 1.0)};
    FusedPrediction<double> sdf_h{FusedKind::sdf, rand_t(rng, Shape{b, 2, d, 4, 4}),
                                  rand_t(rng, Shape{b, 2, d, 4, 4}, 0.0, 0.5)};
    const double alpha = trial % 2 ? 1.0 : 0.5;
    const double lambda = warmup_lambda(30 + trial, 100);
    auto res = stage_loss_hybrid(o2, labels3, sdf2, d, o3, labels3, sdf3, 1, seg_h, sdf_h,
                                 seg_h, sdf_h, b, alpha, lambda);
    const auto& bd = res.breakdown;
    const double recomposed = bd.supervised_seg + bd.supervised_sdf +
                              lambda * (bd.consistency_seg + bd.consistency_sdf);
    c.expect_le(std::abs(bd.total - recomposed), 1e-6, "hybrid composition identity");
    c.expect_le(std::abs(res.total.scalar() - recomposed), 1e-6,
                "hybrid autograd total equals breakdown");
  }

  c.expect(std::abs(warmup_lambda(0, 1000) - 0.1 * std::exp(-5.0)) <= 1e-7,
           "lambda(0) == 0.1*e^-5");
  c.expect(warmup_lambda(1000, 1000) == 0.1, "lambda(i_max) == 0.1 exactly");
}

// ---------------------------------------------------------------------------
// 5. EMA and stage contracts
// ---------------------------------------------------------------------------

RunConfig tiny_run_config() {
  RunConfig c = RunConfig::desk_preset();
  c.synthetic.dims = {4, 8, 8};
  c.patch_dims = {4, 8, 8};
  c.counts = {2, 8, 1, 1};
  c.net2d = {2, 1, 0.5};
  c.net3d = {2, 1, 0.5};
  for (StageConfig* s : {&c.stage_2d, &c.stage_3d, &c.stage_hybrid}) {
    s->epochs = 2;
    s->steps_per_epoch = 3;
    s->initial_lr = 0.05;
    s->mc_passes = 2;
    s->batch_2d = 4;
    s->batch_3d = 2;
  }
  return c;
}

DataSplit synth_split(const RunConfig& c) {
  DataSplit split;
  split.dims = c.synthetic.dims;
  split.spacing = c.synthetic.spacing;
  split.num_classes = c.num_classes;
  split.labeled = generate_synthetic(c.synthetic, c.counts.labeled, 0, true);
  split.unlabeled = generate_synthetic(c.synthetic, c.counts.unlabeled, c.counts.labeled, false);
  for (auto& v : split.unlabeled) {
    v.labels.clear();
    v.sdf.clear();
  }
  split.val = generate_synthetic(c.synthetic, c.counts.val, 1000, false);
  split.test = generate_synthetic(c.synthetic, c.counts.test, 2000, false);
  return split;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void criterion5(Check& c) {
  // EMA geometric decay over 100 steps
  {
    Rng rng(1);
    UNetConfig cfg;
    cfg.spatial_rank = 2;
    cfg.base_features = 2;
    cfg.depth = 1;
    auto teacher = DualDecoderNet<double>::make(cfg, true, rng);
    auto student = DualDecoderNet<double>::make(cfg, false, rng);
    for (auto& p : teacher.params()) std::fill(p.tensor.vec().begin(), p.tensor.vec().end(), 1.0);
    for (auto& p : student.params()) std::fill(p.tensor.vec().begin(), p.tensor.vec().end(), 0.0);
    double worst = 0.0;
    for (int n = 1; n <= 100; ++n) {
      ema_update(teacher, student, 0.99);
      worst = std::max(worst, std::abs(teacher.params()[0].tensor.at(0) - std::pow(0.99, n)));
    }
    c.expect_le(worst, 1e-6, "EMA geometric decay tau^n over 100 steps");
  }

  // C^-1 . C bit-exact round trip
  {
    Rng rng(5);
    auto v = rand_uniform<float>(Shape{3, 2, 4, 5, 6}, rng);
    auto back = reshape_c_inv(reshape_c(v), 3);
    c.expect(back.vec() == v.vec(), "C^-1 o C bit-exact round trip");
  }

  // frozen 2D bit-stability through an entire 3D stage
  RunConfig cfg = tiny_run_config();
  DataSplit split = synth_split(cfg);
  {
    auto st = HdTeacherState::init(cfg);
    run_stage(st, StageId::s2d, split);
    std::vector<std::vector<float>> before;
    for (auto& p : st.s2d.params()) before.push_back(p.tensor.vec());
    for (auto& p : st.t2d.params()) before.push_back(p.tensor.vec());
    run_stage(st, StageId::s3d, split);
    std::vector<std::vector<float>> after;
    for (auto& p : st.s2d.params()) after.push_back(p.tensor.vec());
    for (auto& p : st.t2d.params()) after.push_back(p.tensor.vec());
    c.expect(before == after, "frozen 2D parameters bit-stable through the 3D stage");
  }

  // seed-fixed training runs are byte-identical (checkpoints + CSV)
  {
    const fs::path dir = fs::temp_directory_path() / "hdt_accept_det";
    fs::remove_all(dir);
    fs::create_directories(dir);
    auto run_once = [&](const char* tag) {
      auto st = HdTeacherState::init(cfg);
      run_stage(st, StageId::s2d, split, (dir / (std::string(tag) + "_2d.csv")).string());
      run_stage(st, StageId::s3d, split, (dir / (std::string(tag) + "_3d.csv")).string());
      run_stage(st, StageId::hybrid, split, (dir / (std::string(tag) + "_h.csv")).string());
      st.save((dir / tag).string());
    };
    run_once("a");
    run_once("b");
    const bool params_equal =
        file_bytes(dir / "a" / "params.bin") == file_bytes(dir / "b" / "params.bin");
    const bool manifest_equal =
        file_bytes(dir / "a" / "manifest.json") == file_bytes(dir / "b" / "manifest.json");
    bool csv_equal = true;
    for (const char* s : {"_2d.csv", "_3d.csv", "_h.csv"})
      csv_equal = csv_equal && file_bytes(dir / (std::string("a") + s)) ==
                                   file_bytes(dir / (std::string("b") + s));
    c.expect(params_equal && !file_bytes(dir / "a" / "params.bin").empty(),
             "seed-fixed runs produce byte-identical checkpoints");
    c.expect(manifest_equal, "seed-fixed runs produce byte-identical manifests");
    c.expect(csv_equal, "seed-fixed runs produce byte-identical epoch CSVs");
    fs::remove_all(dir);
  }
}

// ---------------------------------------------------------------------------
// 6. Metrics oracles
// ---------------------------------------------------------------------------

void criterion6(Check& c) {
  Rng rng(606);
  double worst_surface = 0.0, worst_identity = 0.0;
  int defined = 0;
  for (int trial = 0; trial < 100; ++trial) {
    LabelVolume a, b;
    a.dims = {2 + rng.below(11), 2 + rng.below(11), 2 + rng.below(11)};
    a.spacing = trial % 2 ? std::array<double, 3>{0.4, 0.4, 5.0}
                          : std::array<double, 3>{1.0, 1.0, 1.0};
    a.num_classes = 2;
    a.labels.assign(static_cast<size_t>(a.voxels()), 0);
    b = a;
    const double pa = rng.uniform(0.05, 0.6), pb = rng.uniform(0.05, 0.6);
    for (auto& l : a.labels) l = rng.uniform() < pa;
    for (auto& l : b.labels) l = rng.uniform() < pb;

    // overlap + J = D/(2-D)
    auto [dice, jac] = overlap_metrics(a, b, 1);
    int64_t np = 0, nr = 0, ni = 0;
    for (size_t i = 0; i < a.labels.size(); ++i) {
      np += a.labels[i] == 1;
      nr += b.labels[i] == 1;
      ni += a.labels[i] == 1 && b.labels[i] == 1;
    }
    if (np + nr > 0) {
      const double dice_ref = 2.0 * ni / double(np + nr);
      const double jac_ref = ni == 0 ? 0.0 : double(ni) / double(np + nr - ni);
      c.expect_le(std::abs(dice - dice_ref), 1e-12, "dice matches direct counting");
      c.expect_le(std::abs(jac - jac_ref), 1e-12, "jaccard matches direct counting");
      if (dice > 0) worst_identity = std::max(worst_identity, std::abs(jac - dice / (2 - dice)));
    }

    // surface metrics vs exhaustive all-pairs oracle
    auto fast = surface_metrics(a, b, 1);
    // oracle: all-pairs directed distances between 6-neighbor boundaries
    auto boundary_pts = [&](const LabelVolume& v) {
      std::vector<std::array<int64_t, 3>> pts;
      const int64_t d = v.dims[0], w = v.dims[1], h = v.dims[2];
      auto fg = [&](int64_t i, int64_t j, int64_t k) {
        return v.labels[(i * w + j) * h + k] == 1;
      };
      for (int64_t i = 0; i < d; ++i)
        for (int64_t j = 0; j < w; ++j)
          for (int64_t k = 0; k < h; ++k)
            if (fg(i, j, k) &&
                ((i > 0 && !fg(i - 1, j, k)) || (i + 1 < d && !fg(i + 1, j, k)) ||
                 (j > 0 && !fg(i, j - 1, k)) || (j + 1 < w && !fg(i, j + 1, k)) ||
                 (k > 0 && !fg(i, j, k - 1)) || (k + 1 < h && !fg(i, j, k + 1))))
              pts.push_back({i, j, k});
      return pts;
    };
    auto pa_pts = boundary_pts(a), pb_pts = boundary_pts(b);
    bool a_any = false, b_any = false;
    for (auto l : a.labels) a_any |= l == 1;
    for (auto l : b.labels) b_any |= l == 1;
    if (!a_any || !b_any || pa_pts.empty() || pb_pts.empty()) {
      c.expect(!fast.defined(), "surface metrics undefined for empty masks");
      continue;
    }
    ++defined;
    auto directed = [&](const auto& from, const auto& to) {
      std::vector<double> out;
      for (const auto& p : from) {
        double best = 1e300;
        for (const auto& q : to) {
          const double dz = double(p[0] - q[0]) * a.spacing[2];
          const double dx = double(p[1] - q[1]) * a.spacing[0];
          const double dy = double(p[2] - q[2]) * a.spacing[1];
          best = std::min(best, dz * dz + dx * dx + dy * dy);
        }
        out.push_back(std::sqrt(best));
      }
      return out;
    };
    auto d_ab = directed(pa_pts, pb_pts), d_ba = directed(pb_pts, pa_pts);
    const double hd_ref = std::max(percentile(d_ab, 95.0), percentile(d_ba, 95.0));
    double sum = 0.0;
    for (double v : d_ab) sum += v;
    for (double v : d_ba) sum += v;
    const double asd_ref = sum / double(d_ab.size() + d_ba.size());
    worst_surface = std::max(worst_surface, std::abs(fast.hd95 - hd_ref));
    worst_surface = std::max(worst_surface, std::abs(fast.asd - asd_ref));
  }
  c.expect(defined >= 80, "enough defined surface-metric trials");
  c.expect_le(worst_surface, 1e-9, "surface metrics match the all-pairs oracle");
  c.expect_le(worst_identity, 1e-9, "J = D/(2-D) identity");
  c.log << "    " << defined << " defined surface trials, worst surface deviation "
        << worst_surface << "\n";
}

// ---------------------------------------------------------------------------
// 7. End-to-end semi-supervised trend at desk scale
// ---------------------------------------------------------------------------

void criterion7(Check& c) {
  const double start = now_seconds();
  RunConfig cfg = RunConfig::desk_preset();  // 40 train volumes, 4 labeled, 32x32x16, depth-2/8
  DataSplit split = synth_split(cfg);

  // full three-stage HD-Teacher run
  auto hd = HdTeacherState::init(cfg);
  run_stage(hd, StageId::s2d, split);
  run_stage(hd, StageId::s3d, split);
  run_stage(hd, StageId::hybrid, split);
  const double hd_dice = evaluate_mean_dice(hd, split.test, 1);

  // labeled-only supervised baseline, trained identically on the same volumes
  RunConfig base_cfg = cfg;
  base_cfg.ablation = Ablation::supervised_3d;
  auto base = HdTeacherState::init(base_cfg);
  run_stage(base, StageId::supervised3d, split);
  const double base_dice = evaluate_mean_dice(base, split.test, 1);

  const double elapsed = now_seconds() - start;
  c.log << "    HD-Teacher test dice " << hd_dice << ", supervised baseline " << base_dice
        << ", elapsed " << elapsed << " s\n";
  c.expect(hd_dice >= base_dice, "semi-supervised dice >= labeled-only baseline");
  c.expect(hd_dice > 0.5, "hybrid 3D-teacher dice > 0.5 absolute");
  c.expect_le(elapsed, 1800.0, "criterion 7 runtime (s)");
}

// ---------------------------------------------------------------------------
// 8. Ablation presets execute and emit comparable metric CSVs
// ---------------------------------------------------------------------------

void criterion8(Check& c) {
  const fs::path dir = fs::temp_directory_path() / "hdt_accept_ablation";
  fs::remove_all(dir);
  fs::create_directories(dir);

  RunConfig desk = RunConfig::desk_preset();
  // desk data and net shapes, shortened schedules
  for (StageConfig* s : {&desk.stage_2d, &desk.stage_3d, &desk.stage_hybrid}) {
    s->epochs = 1;
    s->steps_per_epoch = 8;
  }
  DataSplit split = synth_split(desk);

  const std::vector<std::pair<Ablation, std::vector<StageId>>> presets = {
      {Ablation::no_sdf, {StageId::s2d}},
      {Ablation::sdf_2d, {StageId::s2d}},
      {Ablation::separate_reg, {StageId::s2d, StageId::s3d, StageId::hybrid}},
      {Ablation::hybrid_reg, {StageId::s2d, StageId::s3d, StageId::hybrid}},
  };
  std::string header_seen;
  for (const auto& [ablation, stages] : presets) {
    RunConfig cfg = desk;
    cfg.ablation = ablation;
    if (ablation == Ablation::no_sdf) cfg.sdf_loss_weight = 0.0;
    bool ok = true;
    std::string what;
    try {
      auto st = HdTeacherState::init(cfg);
      for (StageId stage : stages) run_stage(st, stage, split);
      // comparable metrics CSV: volume rows + mean row, fixed schema
      const fs::path csv_path = dir / (to_string(ablation) + ".csv");
      std::ofstream csv(csv_path);
      csv << "volume,dice,jaccard,hd95,asd\n";
      double acc = 0.0;
      for (size_t i = 0; i < split.test.size(); ++i) {
        auto r = infer(st, split.test[i], i);
        auto rep = evaluate_metrics(r.labels, split.test[i].label_volume());
        char buf[256];
        std::snprintf(buf, sizeof(buf), "test_%03zu,%.6f,%.6f,%.6f,%.6f\n", i, rep.mean_dice,
                      rep.mean_jaccard, rep.mean_hd95, rep.mean_asd);
        csv << buf;
        acc += rep.mean_dice;
      }
      csv << "mean," << acc / split.test.size() << ",,,\n";
      csv.close();
      std::ifstream back(csv_path);
      std::string header;
      std::getline(back, header);
      if (header_seen.empty()) header_seen = header;
      ok = header == header_seen;
      what = "csv header mismatch for " + to_string(ablation);
      int rows = 0;
      for (std::string line; std::getline(back, line);) ++rows;
      if (rows != static_cast<int>(split.test.size()) + 1) {
        ok = false;
        what = "csv row count for " + to_string(ablation);
      }
    } catch (const std::exception& e) {
      ok = false;
      what = to_string(ablation) + " raised: " + e.what();
    }
    c.expect(ok, what.empty() ? "ablation " + to_string(ablation) : what);
    c.log << "    " << to_string(ablation) << " trained and evaluated\n";
  }
  fs::remove_all(dir);
}

// ---------------------------------------------------------------------------

struct Criterion {
  int id;
  const char* name;
  void (*fn)(Check&);
};

const Criterion kCriteria[] = {
    {1, "gradient correctness of all primitives and the full dual-decoder net", criterion1},
    {2, "SDF transform equals the brute-force oracle", criterion2},
    {3, "fusion math: entropy, weights, convexity, hand case, order invariance", criterion3},
    {4, "loss composition identities and warm-up endpoints", criterion4},
    {5, "EMA decay, freeze contract, reshape round trip, run determinism", criterion5},
    {6, "overlap and surface metrics match exhaustive oracles", criterion6},
    {7, "desk-scale semi-supervised trend beats the labeled-only baseline", criterion7},
    {8, "ablation presets train and emit comparable metric CSVs", criterion8},
};

}  // namespace

int main(int argc, char** argv) {
  int only = 0;
  for (int i = 1; i < argc; ++i) {
    if (std::strcmp(argv[i], "--criterion") == 0 && i + 1 < argc) only = std::atoi(argv[++i]);
  }
  int failures = 0;
  for (const Criterion& crit : kCriteria) {
    if (only != 0 && crit.id != only) continue;
    Check check;
    try {
      crit.fn(check);
    } catch (const std::exception& e) {
      check.ok = false;
      check.log << "    exception: " << e.what() << "\n";
    }
    std::printf("[%s] criterion %d: %s\n", check.ok ? "PASS" : "FAIL", crit.id, crit.name);
    const std::string detail = check.log.str();
    if (!detail.empty()) std::fputs(detail.c_str(), stdout);
    if (!check.ok) ++failures;
  }
  return failures;
}
