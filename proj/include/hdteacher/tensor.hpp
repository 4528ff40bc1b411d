#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "hdteacher/common.hpp"
#include "hdteacher/rng.hpp"

namespace hdt {

// Dense n-d float array (rank 1-5, channels-first, row-major) with optional
// gradient storage. Tensor is a shared handle; copies alias the same node.
template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;          // empty until a backward pass touches it
  bool requires_grad = false;   // leaf parameters opt in
  bool traced = false;          // produced by an op recorded on the live tape

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false)
      : n_(std::make_shared<TensorNode<T>>()) {
    HDT_CHECK(!shape.empty() && shape.size() <= 5, "tensor rank must be 1-5, got ",
              shape.size());
    for (int64_t e : shape) HDT_CHECK(e > 0, "non-positive extent in shape ", shape_str(shape));
    n_->shape = std::move(shape);
    n_->data.assign(static_cast<size_t>(numel_of(n_->shape)), fill);
    n_->requires_grad = requires_grad;
  }

  static Tensor from_vector(Shape shape, std::vector<T> values, bool requires_grad = false) {
    Tensor t(shape, T(0), requires_grad);
    HDT_CHECK(static_cast<int64_t>(values.size()) == t.numel(), "value count ",
              values.size(), " does not match shape ", shape_str(shape));
    t.n_->data = std::move(values);
    return t;
  }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  int64_t numel() const { return static_cast<int64_t>(n_->data.size()); }
  int64_t rank() const { return static_cast<int64_t>(n_->shape.size()); }

  T* data() { return n_->data.data(); }
  const T* data() const { return n_->data.data(); }
  std::vector<T>& vec() { return n_->data; }
  const std::vector<T>& vec() const { return n_->data; }
  T& at(int64_t i) { return n_->data[static_cast<size_t>(i)]; }
  T at(int64_t i) const { return n_->data[static_cast<size_t>(i)]; }

  T scalar() const {
    HDT_CHECK(numel() == 1, "scalar() on tensor of shape ", shape_str(shape()));
    return n_->data[0];
  }

  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool v) { n_->requires_grad = v; }
  bool tracked() const { return n_->requires_grad || n_->traced; }

  bool has_grad() const { return !n_->grad.empty(); }
  const std::vector<T>& grad() const { return n_->grad; }
  void clear_grad() { n_->grad.clear(); }

  // Deep copy of values; grad/trace state is not carried over.
  Tensor clone() const {
    Tensor t(n_->shape);
    t.n_->data = n_->data;
    return t;
  }

  bool all_finite() const {
    for (T v : n_->data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  std::shared_ptr<TensorNode<T>>& node() { return n_; }
  const std::shared_ptr<TensorNode<T>>& node() const { return n_; }

 private:
  std::shared_ptr<TensorNode<T>> n_;
};

// Ordered record of the operations executed under it. Replaying the entries
// in reverse order propagates gradients from the seeded loss to every
// reachable requires_grad tensor (execution order is a topological order of
// the DAG, so the reverse sweep is valid).
template <typename T>
class Tape {
 public:
  Tape() : prev_(active_ref()) { active_ref() = this; }
  ~Tape() {
    for (auto& n : outputs_) n->traced = false;
    active_ref() = prev_;
  }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  void record(std::function<void()> backward_rule, const std::shared_ptr<TensorNode<T>>& out) {
    entries_.push_back(std::move(backward_rule));
    out->traced = true;
    outputs_.push_back(out);
  }

  size_t size() const { return entries_.size(); }

  void backward(const Tensor<T>& loss) {
    HDT_CHECK(!replayed_, "tape already replayed");
    HDT_CHECK(loss.numel() == 1, "backward expects a scalar loss, got ",
              shape_str(loss.shape()));
    replayed_ = true;
    loss.node()->ensure_grad();
    loss.node()->grad[0] = T(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
  }

 private:
  static Tape*& active_ref() {
    thread_local Tape* t = nullptr;
    return t;
  }

  std::vector<std::function<void()>> entries_;
  std::vector<std::shared_ptr<TensorNode<T>>> outputs_;
  Tape* prev_ = nullptr;
  bool replayed_ = false;
};

// Suspends recording while alive (teacher passes, fused targets, inference).
template <typename T>
class NoGradScope {
 public:
  NoGradScope() { depth()++; }
  ~NoGradScope() { depth()--; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

  static bool active() { return depth() > 0; }

 private:
  static int& depth() {
    thread_local int n = 0;
    return n;
  }
};

template <typename T>
Tape<T>* Tape<T>::active() {
  return NoGradScope<T>::active() ? nullptr : active_ref();
}

namespace detail {

// True when the node's grad buffer should receive contributions.
template <typename T>
bool wants_grad(const std::shared_ptr<TensorNode<T>>& n) {
  return n->requires_grad || n->traced;
}

// Output grad of a recorded op; empty means no gradient flowed there.
template <typename T>
const std::vector<T>* out_grad(const std::shared_ptr<TensorNode<T>>& n) {
  if (n->grad.empty()) return nullptr;
  return &n->grad;
}

template <typename T>
bool should_record(std::initializer_list<const Tensor<T>*> inputs) {
  if (!Tape<T>::active()) return false;
  for (const Tensor<T>* t : inputs)
    if (t->tracked()) return true;
  return false;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  HDT_CHECK(a.shape() == b.shape(), op, ": shape mismatch ", shape_str(a.shape()), " vs ",
            shape_str(b.shape()));
}

template <typename T, typename Fwd, typename Bwd>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, const char* name, Fwd fwd, Bwd bwd) {
  check_same_shape(a, b, name);
  Tensor<T> out(a.shape());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out.at(i) = fwd(a.at(i), b.at(i));
  if (detail::should_record<T>({&a, &b})) {
    auto an = a.node(), bn = b.node(), on = out.node();
    Tape<T>::active()->record(
        [an, bn, on, bwd, n] {
          const std::vector<T>* g = detail::out_grad(on);
          if (!g) return;
          const bool ga = detail::wants_grad(an), gb = detail::wants_grad(bn);
          if (ga) an->ensure_grad();
          if (gb) bn->ensure_grad();
          for (int64_t i = 0; i < n; ++i) {
            auto [da, db] = bwd(an->data[i], bn->data[i], on->data[i]);
            if (ga) an->grad[i] += (*g)[i] * da;
            if (gb) bn->grad[i] += (*g)[i] * db;
          }
        },
        on);
  }
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(a, b, "add", [](T x, T y) { return x + y; },
                   [](T, T, T) { return std::pair<T, T>(T(1), T(1)); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(a, b, "sub", [](T x, T y) { return x - y; },
                   [](T, T, T) { return std::pair<T, T>(T(1), T(-1)); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(a, b, "mul", [](T x, T y) { return x * y; },
                   [](T x, T y, T) { return std::pair<T, T>(y, x); });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(a, b, "div", [](T x, T y) { return x / y; },
                   [](T x, T y, T) { return std::pair<T, T>(T(1) / y, -x / (y * y)); });
}

template <typename T, typename Fwd, typename Bwd>
Tensor<T> unary_op(const Tensor<T>& a, Fwd fwd, Bwd bwd) {
  Tensor<T> out(a.shape());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out.at(i) = fwd(a.at(i));
  if (detail::should_record<T>({&a})) {
    auto an = a.node(), on = out.node();
    Tape<T>::active()->record(
        [an, on, bwd, n] {
          const std::vector<T>* g = detail::out_grad(on);
          if (!g || !detail::wants_grad(an)) return;
          an->ensure_grad();
          for (int64_t i = 0; i < n; ++i) an->grad[i] += (*g)[i] * bwd(an->data[i], on->data[i]);
        },
        on);
  }
  return out;
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return unary_op(a, [](T x) { return -x; }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  return unary_op(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  return unary_op(a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& a) {
  return unary_op(a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return unary_op(a, [](T x) { return x > T(0) ? x : T(0); },
                  [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
  return unary_op(a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  return unary_op(a, [c](T x) { return x + c; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T c) {
  return unary_op(a, [c](T x) { return x * c; }, [c](T, T) { return c; });
}

// x scaled per location by a constant weight map w. w is either the same
// shape as x or has a singleton channel axis that broadcasts over x's
// channels. w must not be on the gradient path.
template <typename T>
Tensor<T> scale_by_map(const Tensor<T>& x, const Tensor<T>& w) {
  HDT_CHECK(!w.tracked(), "scale_by_map: weight map must not require gradients");
  const bool broadcast = w.shape() != x.shape();
  int64_t channels = 1, inner = x.numel(), outer = 1;
  if (broadcast) {
    HDT_CHECK(x.rank() >= 2 && w.rank() == x.rank() && w.shape()[1] == 1,
              "scale_by_map: weight shape ", shape_str(w.shape()),
              " does not match or channel-broadcast to ", shape_str(x.shape()));
    Shape expect = x.shape();
    expect[1] = 1;
    HDT_CHECK(w.shape() == expect, "scale_by_map: weight shape ", shape_str(w.shape()),
              " does not match or channel-broadcast to ", shape_str(x.shape()));
    outer = x.shape()[0];
    channels = x.shape()[1];
    inner = x.numel() / (outer * channels);
  }
  Tensor<T> out(x.shape());
  if (!broadcast) {
    for (int64_t i = 0; i < x.numel(); ++i) out.at(i) = x.at(i) * w.at(i);
  } else {
    for (int64_t b = 0; b < outer; ++b)
      for (int64_t c = 0; c < channels; ++c) {
        const T* wp = w.data() + b * inner;
        const T* xp = x.data() + (b * channels + c) * inner;
        T* op = out.data() + (b * channels + c) * inner;
        for (int64_t i = 0; i < inner; ++i) op[i] = xp[i] * wp[i];
      }
  }
  if (detail::should_record<T>({&x})) {
    auto xn = x.node(), wn = w.node(), on = out.node();
    Tape<T>::active()->record(
        [xn, wn, on, broadcast, outer, channels, inner] {
          const std::vector<T>* g = detail::out_grad(on);
          if (!g || !detail::wants_grad(xn)) return;
          xn->ensure_grad();
          if (!broadcast) {
            for (size_t i = 0; i < xn->data.size(); ++i) xn->grad[i] += (*g)[i] * wn->data[i];
          } else {
            for (int64_t b = 0; b < outer; ++b)
              for (int64_t c = 0; c < channels; ++c) {
                const T* wp = wn->data.data() + b * inner;
                const T* gp = g->data() + (b * channels + c) * inner;
                T* xg = xn->grad.data() + (b * channels + c) * inner;
                for (int64_t i = 0; i < inner; ++i) xg[i] += gp[i] * wp[i];
              }
          }
        },
        on);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
  Tensor<T> out(Shape{1});
  T s = T(0);
  for (int64_t i = 0; i < a.numel(); ++i) s += a.at(i);
  out.at(0) = s;
  if (detail::should_record<T>({&a})) {
    auto an = a.node(), on = out.node();
    Tape<T>::active()->record(
        [an, on] {
          const std::vector<T>* g = detail::out_grad(on);
          if (!g || !detail::wants_grad(an)) return;
          an->ensure_grad();
          const T gv = (*g)[0];
          for (auto& v : an->grad) v += gv;
        },
        on);
  }
  return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
  return mul_scalar(sum_all(a), T(1) / static_cast<T>(a.numel()));
}

// Per-channel totals: [b, C, spatial...] -> [C].
template <typename T>
Tensor<T> sum_per_channel(const Tensor<T>& a) {
  HDT_CHECK(a.rank() >= 2, "sum_per_channel expects rank >= 2, got ", shape_str(a.shape()));
  const int64_t batch = a.shape()[0], channels = a.shape()[1];
  const int64_t inner = a.numel() / (batch * channels);
  Tensor<T> out(Shape{channels});
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t c = 0; c < channels; ++c) {
      const T* p = a.data() + (b * channels + c) * inner;
      T s = T(0);
      for (int64_t i = 0; i < inner; ++i) s += p[i];
      out.at(c) += s;
    }
  if (detail::should_record<T>({&a})) {
    auto an = a.node(), on = out.node();
    Tape<T>::active()->record(
        [an, on, batch, channels, inner] {
          const std::vector<T>* g = detail::out_grad(on);
          if (!g || !detail::wants_grad(an)) return;
          an->ensure_grad();
          for (int64_t b = 0; b < batch; ++b)
            for (int64_t c = 0; c < channels; ++c) {
              T* p = an->grad.data() + (b * channels + c) * inner;
              const T gv = (*g)[c];
              for (int64_t i = 0; i < inner; ++i) p[i] += gv;
            }
        },
        on);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Layout ops
// ---------------------------------------------------------------------------

// First `len` entries along the batch axis.
template <typename T>
Tensor<T> narrow_batch(const Tensor<T>& a, int64_t start, int64_t len) {
  HDT_CHECK(a.rank() >= 2, "narrow_batch expects rank >= 2");
  const int64_t batch = a.shape()[0];
  HDT_CHECK(start >= 0 && len >= 1 && start + len <= batch, "narrow_batch: range [", start,
            ", ", start + len, ") out of batch ", batch);
  Shape oshape = a.shape();
  oshape[0] = len;
  const int64_t stride = a.numel() / batch;
  Tensor<T> out(oshape);
  std::copy_n(a.data() + start * stride, len * stride, out.data());
  if (detail::should_record<T>({&a})) {
    auto an = a.node(), on = out.node();
    Tape<T>::active()->record(
        [an, on, start, len, stride] {
          const std::vector<T>* g = detail::out_grad(on);
          if (!g || !detail::wants_grad(an)) return;
          an->ensure_grad();
          T* dst = an->grad.data() + start * stride;
          for (int64_t i = 0; i < len * stride; ++i) dst[i] += (*g)[i];
        },
        on);
  }
  return out;
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  HDT_CHECK(a.rank() == b.rank() && a.rank() >= 2, "concat_channels: rank mismatch ",
            shape_str(a.shape()), " vs ", shape_str(b.shape()));
  for (int64_t i = 0; i < a.rank(); ++i)
    if (i != 1)
      HDT_CHECK(a.shape()[i] == b.shape()[i], "concat_channels: shape mismatch ",
                shape_str(a.shape()), " vs ", shape_str(b.shape()));
  const int64_t batch = a.shape()[0];
  const int64_t ca = a.shape()[1], cb = b.shape()[1];
  const int64_t inner = a.numel() / (batch * ca);
  Shape oshape = a.shape();
  oshape[1] = ca + cb;
  Tensor<T> out(oshape);
  for (int64_t n = 0; n < batch; ++n) {
    std::copy_n(a.data() + n * ca * inner, ca * inner, out.data() + n * (ca + cb) * inner);
    std::copy_n(b.data() + n * cb * inner, cb * inner,
                out.data() + (n * (ca + cb) + ca) * inner);
  }
  if (detail::should_record<T>({&a, &b})) {
    auto an = a.node(), bn = b.node(), on = out.node();
    Tape<T>::active()->record(
        [an, bn, on, batch, ca, cb, inner] {
          const std::vector<T>* g = detail::out_grad(on);
          if (!g) return;
          if (detail::wants_grad(an)) {
            an->ensure_grad();
            for (int64_t n = 0; n < batch; ++n) {
              const T* src = g->data() + n * (ca + cb) * inner;
              T* dst = an->grad.data() + n * ca * inner;
              for (int64_t i = 0; i < ca * inner; ++i) dst[i] += src[i];
            }
          }
          if (detail::wants_grad(bn)) {
            bn->ensure_grad();
            for (int64_t n = 0; n < batch; ++n) {
              const T* src = g->data() + (n * (ca + cb) + ca) * inner;
              T* dst = bn->grad.data() + n * cb * inner;
              for (int64_t i = 0; i < cb * inner; ++i) dst[i] += src[i];
            }
          }
        },
        on);
  }
  return out;
}

namespace detail {
// [b,c,d,w,h] element index of (i, ch, j, y, x).
inline int64_t vol_index(int64_t i, int64_t ch, int64_t j, int64_t y, int64_t x, int64_t c,
                         int64_t d, int64_t w, int64_t h) {
  return (((i * c + ch) * d + j) * w + y) * h + x;
}
}  // namespace detail

// C: stacks batch and depth, [b,c,d,w,h] -> [(b*d),c,w,h]; slice j of volume
// i lands at 2D batch index i*d + j.
template <typename T>
Tensor<T> reshape_slices_to_batch(const Tensor<T>& v) {
  HDT_CHECK(v.rank() == 5, "C expects a rank-5 tensor, got ", shape_str(v.shape()));
  const int64_t b = v.shape()[0], c = v.shape()[1], d = v.shape()[2], w = v.shape()[3],
                h = v.shape()[4];
  Tensor<T> out(Shape{b * d, c, w, h});
  const int64_t plane = w * h;
  for (int64_t i = 0; i < b; ++i)
    for (int64_t j = 0; j < d; ++j)
      for (int64_t ch = 0; ch < c; ++ch) {
        const T* src = v.data() + detail::vol_index(i, ch, j, 0, 0, c, d, w, h);
        T* dst = out.data() + (((i * d + j) * c) + ch) * plane;
        std::copy_n(src, plane, dst);
      }
  if (detail::should_record<T>({&v})) {
    auto vn = v.node(), on = out.node();
    Tape<T>::active()->record(
        [vn, on, b, c, d, w, h, plane] {
          const std::vector<T>* g = detail::out_grad(on);
          if (!g || !detail::wants_grad(vn)) return;
          vn->ensure_grad();
          for (int64_t i = 0; i < b; ++i)
            for (int64_t j = 0; j < d; ++j)
              for (int64_t ch = 0; ch < c; ++ch) {
                const T* src = g->data() + (((i * d + j) * c) + ch) * plane;
                T* dst = vn->grad.data() + detail::vol_index(i, ch, j, 0, 0, c, d, w, h);
                for (int64_t k = 0; k < plane; ++k) dst[k] += src[k];
              }
        },
        on);
  }
  return out;
}

// C^-1: exact inverse of reshape_slices_to_batch for a known volume batch b.
template <typename T>
Tensor<T> reshape_batch_to_slices(const Tensor<T>& s, int64_t b) {
  HDT_CHECK(s.rank() == 4, "C^-1 expects a rank-4 tensor, got ", shape_str(s.shape()));
  HDT_CHECK(b >= 1 && s.shape()[0] % b == 0, "C^-1: 2D batch ", s.shape()[0],
            " not divisible by volume batch ", b);
  const int64_t d = s.shape()[0] / b, c = s.shape()[1], w = s.shape()[2], h = s.shape()[3];
  Tensor<T> out(Shape{b, c, d, w, h});
  const int64_t plane = w * h;
  for (int64_t i = 0; i < b; ++i)
    for (int64_t j = 0; j < d; ++j)
      for (int64_t ch = 0; ch < c; ++ch) {
        const T* src = s.data() + (((i * d + j) * c) + ch) * plane;
        T* dst = out.data() + detail::vol_index(i, ch, j, 0, 0, c, d, w, h);
        std::copy_n(src, plane, dst);
      }
  if (detail::should_record<T>({&s})) {
    auto sn = s.node(), on = out.node();
    Tape<T>::active()->record(
        [sn, on, b, c, d, w, h, plane] {
          const std::vector<T>* g = detail::out_grad(on);
          if (!g || !detail::wants_grad(sn)) return;
          sn->ensure_grad();
          for (int64_t i = 0; i < b; ++i)
            for (int64_t j = 0; j < d; ++j)
              for (int64_t ch = 0; ch < c; ++ch) {
                const T* src = g->data() + detail::vol_index(i, ch, j, 0, 0, c, d, w, h);
                T* dst = sn->grad.data() + (((i * d + j) * c) + ch) * plane;
                for (int64_t k = 0; k < plane; ++k) dst[k] += src[k];
              }
        },
        on);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Constants and random fills (never recorded)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> randn(const Shape& shape, Rng& rng, T stddev = T(1)) {
  Tensor<T> t(shape);
  for (int64_t i = 0; i < t.numel(); ++i) t.at(i) = static_cast<T>(rng.normal()) * stddev;
  return t;
}

template <typename T>
Tensor<T> rand_uniform(const Shape& shape, Rng& rng, T lo = T(0), T hi = T(1)) {
  Tensor<T> t(shape);
  for (int64_t i = 0; i < t.numel(); ++i) t.at(i) = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

// Gaussian perturbation with values clipped to +/- 2 sigma.
template <typename T>
Tensor<T> clipped_noise(const Shape& shape, T sigma, Rng& rng) {
  Tensor<T> t(shape);
  const T lim = T(2) * sigma;
  for (int64_t i = 0; i < t.numel(); ++i) {
    T v = static_cast<T>(rng.normal()) * sigma;
    t.at(i) = std::clamp(v, -lim, lim);
  }
  return t;
}

template <typename T>
Tensor<T> add_input_noise(const Tensor<T>& x, T sigma, Rng& rng) {
  if (sigma <= T(0)) return x;
  return add(x, clipped_noise<T>(x.shape(), sigma, rng));
}

}  // namespace hdt
