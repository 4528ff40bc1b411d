#pragma once

#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include "hdteacher/tensor.hpp"

namespace hdt {

// ---------------------------------------------------------------------------
// Convolution (cross-correlation), direct loops. Stride-1 inner loops run
// over the contiguous last axis so they vectorize.
// ---------------------------------------------------------------------------

namespace detail {

// 3x3, stride 1, pad 1 stencil: each output row is accumulated in a scratch
// buffer across all taps and input channels, then stored once.
template <typename T>
void conv2d_k3_forward(const T* in, const T* ker, T* out, int64_t batch, int64_t ci,
                       int64_t co, int64_t iw, int64_t ih) {
  std::vector<T> acc(static_cast<size_t>(ih));
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t oc = 0; oc < co; ++oc) {
      T* oplane = out + (b * co + oc) * iw * ih;
      for (int64_t y = 0; y < iw; ++y) {
        std::fill(acc.begin(), acc.end(), T(0));
        T* arow = acc.data();
        for (int64_t ic = 0; ic < ci; ++ic) {
          const T* iplane = in + (b * ci + ic) * iw * ih;
          const T* kk = ker + (oc * ci + ic) * 9;
          for (int64_t ky = 0; ky < 3; ++ky) {
            const int64_t yy = y + ky - 1;
            if (yy < 0 || yy >= iw) continue;
            const T* ir = iplane + yy * ih;
            const T w0 = kk[ky * 3], w1 = kk[ky * 3 + 1], w2 = kk[ky * 3 + 2];
            for (int64_t x = 1; x < ih - 1; ++x)
              arow[x] += w0 * ir[x - 1] + w1 * ir[x] + w2 * ir[x + 1];
            arow[0] += w1 * ir[0] + w2 * ir[1];
            arow[ih - 1] += w0 * ir[ih - 2] + w1 * ir[ih - 1];
          }
        }
        std::copy(acc.begin(), acc.end(), oplane + y * ih);
      }
    }
}

template <typename T>
void conv3d_k3_forward(const T* in, const T* ker, T* out, int64_t batch, int64_t ci,
                       int64_t co, int64_t id, int64_t iw, int64_t ih) {
  std::vector<T> acc(static_cast<size_t>(ih));
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t oc = 0; oc < co; ++oc) {
      T* ovol = out + (b * co + oc) * id * iw * ih;
      for (int64_t z = 0; z < id; ++z)
        for (int64_t y = 0; y < iw; ++y) {
          std::fill(acc.begin(), acc.end(), T(0));
          T* arow = acc.data();
          for (int64_t ic = 0; ic < ci; ++ic) {
            const T* ivol = in + (b * ci + ic) * id * iw * ih;
            const T* kk = ker + (oc * ci + ic) * 27;
            for (int64_t kz = 0; kz < 3; ++kz) {
              const int64_t zz = z + kz - 1;
              if (zz < 0 || zz >= id) continue;
              for (int64_t ky = 0; ky < 3; ++ky) {
                const int64_t yy = y + ky - 1;
                if (yy < 0 || yy >= iw) continue;
                const T* ir = ivol + (zz * iw + yy) * ih;
                const T* kr = kk + (kz * 3 + ky) * 3;
                const T w0 = kr[0], w1 = kr[1], w2 = kr[2];
                for (int64_t x = 1; x < ih - 1; ++x)
                  arow[x] += w0 * ir[x - 1] + w1 * ir[x] + w2 * ir[x + 1];
                arow[0] += w1 * ir[0] + w2 * ir[1];
                arow[ih - 1] += w0 * ir[ih - 2] + w1 * ir[ih - 1];
              }
            }
          }
          std::copy(acc.begin(), acc.end(), ovol + (z * iw + y) * ih);
        }
    }
}

// Fixed 8-lane dot product; the lane structure keeps the summation order
// deterministic while letting the compiler vectorize the reduction.
template <typename T>
T dot_range(const T* a, const T* b, int64_t n) {
  T lane[8] = {T(0), T(0), T(0), T(0), T(0), T(0), T(0), T(0)};
  int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (int j = 0; j < 8; ++j) lane[j] += a[i + j] * b[i + j];
  T tail = T(0);
  for (; i < n; ++i) tail += a[i] * b[i];
  return ((lane[0] + lane[1]) + (lane[2] + lane[3])) +
         ((lane[4] + lane[5]) + (lane[6] + lane[7])) + tail;
}

// Gradient w.r.t. the kernel for the 3x3 stride-1 pad-1 path: 9 (27) shifted
// row dot products per (oc, ic) pair.
template <typename T>
void conv2d_k3_backward_kernel(const T* in, const T* gout, T* gker, int64_t batch, int64_t ci,
                               int64_t co, int64_t iw, int64_t ih) {
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t oc = 0; oc < co; ++oc) {
      const T* gplane = gout + (b * co + oc) * iw * ih;
      for (int64_t ic = 0; ic < ci; ++ic) {
        const T* iplane = in + (b * ci + ic) * iw * ih;
        T* gk = gker + (oc * ci + ic) * 9;
        for (int64_t ky = 0; ky < 3; ++ky)
          for (int64_t kx = 0; kx < 3; ++kx) {
            const int64_t dy = ky - 1, dx = kx - 1;
            T s = T(0);
            const int64_t y0 = std::max<int64_t>(0, -dy), y1 = std::min(iw, iw - dy);
            const int64_t x0 = std::max<int64_t>(0, -dx), x1 = std::min(ih, ih - dx);
            for (int64_t y = y0; y < y1; ++y)
              s += dot_range(gplane + y * ih + x0, iplane + (y + dy) * ih + dx + x0, x1 - x0);
            gk[ky * 3 + kx] += s;
          }
      }
    }
}

template <typename T>
void conv3d_k3_backward_kernel(const T* in, const T* gout, T* gker, int64_t batch, int64_t ci,
                               int64_t co, int64_t id, int64_t iw, int64_t ih) {
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t oc = 0; oc < co; ++oc) {
      const T* gvol = gout + (b * co + oc) * id * iw * ih;
      for (int64_t ic = 0; ic < ci; ++ic) {
        const T* ivol = in + (b * ci + ic) * id * iw * ih;
        T* gk = gker + (oc * ci + ic) * 27;
        for (int64_t kz = 0; kz < 3; ++kz)
          for (int64_t ky = 0; ky < 3; ++ky)
            for (int64_t kx = 0; kx < 3; ++kx) {
              const int64_t dz = kz - 1, dy = ky - 1, dx = kx - 1;
              T s = T(0);
              const int64_t z0 = std::max<int64_t>(0, -dz), z1 = std::min(id, id - dz);
              const int64_t y0 = std::max<int64_t>(0, -dy), y1 = std::min(iw, iw - dy);
              const int64_t x0 = std::max<int64_t>(0, -dx), x1 = std::min(ih, ih - dx);
              for (int64_t z = z0; z < z1; ++z)
                for (int64_t y = y0; y < y1; ++y)
                  s += dot_range(gvol + (z * iw + y) * ih + x0,
                                 ivol + ((z + dz) * iw + y + dy) * ih + dx + x0, x1 - x0);
              gk[(kz * 3 + ky) * 3 + kx] += s;
            }
      }
    }
}

// Kernel transposed across (oc, ic) and spatially flipped, so the input
// gradient is itself a 3x3 stride-1 pad-1 correlation of gout.
template <typename T>
std::vector<T> flip_transpose_kernel(const T* ker, int64_t co, int64_t ci, int64_t taps) {
  std::vector<T> out(static_cast<size_t>(co * ci * taps));
  for (int64_t oc = 0; oc < co; ++oc)
    for (int64_t ic = 0; ic < ci; ++ic)
      for (int64_t t = 0; t < taps; ++t)
        out[(ic * co + oc) * taps + (taps - 1 - t)] = ker[(oc * ci + ic) * taps + t];
  return out;
}

template <typename T>
void conv2d_forward(const T* in, const T* ker, T* out, int64_t batch, int64_t ci, int64_t co,
                    int64_t iw, int64_t ih, int64_t kw, int64_t kh, int64_t stride, int64_t pad,
                    int64_t ow, int64_t oh) {
  if (stride == 1 && pad == 1 && kw == 3 && kh == 3 && ih >= 2) {
    conv2d_k3_forward(in, ker, out, batch, ci, co, iw, ih);
    return;
  }
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t oc = 0; oc < co; ++oc) {
      T* oplane = out + (b * co + oc) * ow * oh;
      for (int64_t ic = 0; ic < ci; ++ic) {
        const T* iplane = in + (b * ci + ic) * iw * ih;
        const T* kplane = ker + (oc * ci + ic) * kw * kh;
        for (int64_t ky = 0; ky < kw; ++ky)
          for (int64_t kx = 0; kx < kh; ++kx) {
            const T wv = kplane[ky * kh + kx];
            if (wv == T(0)) continue;
            for (int64_t oy = 0; oy < ow; ++oy) {
              const int64_t iy = oy * stride - pad + ky;
              if (iy < 0 || iy >= iw) continue;
              const T* irow = iplane + iy * ih;
              T* orow = oplane + oy * oh;
              const int64_t base = -pad + kx;
              int64_t ox0 = 0, ox1 = oh;
              if (stride == 1) {
                ox0 = std::max<int64_t>(0, -base);
                ox1 = std::min<int64_t>(oh, ih - base);
                const T* ir = irow + base;
                for (int64_t ox = ox0; ox < ox1; ++ox) orow[ox] += wv * ir[ox];
              } else {
                for (int64_t ox = ox0; ox < ox1; ++ox) {
                  const int64_t ix = ox * stride + base;
                  if (ix < 0 || ix >= ih) continue;
                  orow[ox] += wv * irow[ix];
                }
              }
            }
          }
      }
    }
}

template <typename T>
void conv2d_backward(const T* in, const T* ker, const T* gout, T* gin, T* gker, int64_t batch,
                     int64_t ci, int64_t co, int64_t iw, int64_t ih, int64_t kw, int64_t kh,
                     int64_t stride, int64_t pad, int64_t ow, int64_t oh) {
  if (stride == 1 && pad == 1 && kw == 3 && kh == 3 && ih >= 2) {
    if (gker) conv2d_k3_backward_kernel(in, gout, gker, batch, ci, co, iw, ih);
    if (gin) {
      const std::vector<T> flipped = flip_transpose_kernel(ker, co, ci, 9);
      std::vector<T> scratch(static_cast<size_t>(batch * ci * iw * ih));
      conv2d_k3_forward(gout, flipped.data(), scratch.data(), batch, co, ci, iw, ih);
      for (size_t i = 0; i < scratch.size(); ++i) gin[i] += scratch[i];
    }
    return;
  }
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t oc = 0; oc < co; ++oc) {
      const T* gplane = gout + (b * co + oc) * ow * oh;
      for (int64_t ic = 0; ic < ci; ++ic) {
        const T* iplane = in + (b * ci + ic) * iw * ih;
        const T* kplane = ker + (oc * ci + ic) * kw * kh;
        T* giplane = gin ? gin + (b * ci + ic) * iw * ih : nullptr;
        T* gkplane = gker ? gker + (oc * ci + ic) * kw * kh : nullptr;
        for (int64_t ky = 0; ky < kw; ++ky)
          for (int64_t kx = 0; kx < kh; ++kx) {
            const T wv = kplane[ky * kh + kx];
            T wgrad = T(0);
            for (int64_t oy = 0; oy < ow; ++oy) {
              const int64_t iy = oy * stride - pad + ky;
              if (iy < 0 || iy >= iw) continue;
              const T* irow = iplane + iy * ih;
              const T* grow = gplane + oy * oh;
              T* girow = giplane ? giplane + iy * ih : nullptr;
              const int64_t base = -pad + kx;
              if (stride == 1) {
                const int64_t ox0 = std::max<int64_t>(0, -base);
                const int64_t ox1 = std::min<int64_t>(oh, ih - base);
                if (gker) {
                  T s = T(0);
                  const T* ir = irow + base;
                  for (int64_t ox = ox0; ox < ox1; ++ox) s += grow[ox] * ir[ox];
                  wgrad += s;
                }
                if (gin) {
                  T* gir = girow + base;
                  for (int64_t ox = ox0; ox < ox1; ++ox) gir[ox] += wv * grow[ox];
                }
              } else {
                for (int64_t ox = 0; ox < oh; ++ox) {
                  const int64_t ix = ox * stride + base;
                  if (ix < 0 || ix >= ih) continue;
                  if (gker) wgrad += grow[ox] * irow[ix];
                  if (gin) girow[ix] += wv * grow[ox];
                }
              }
            }
            if (gker) gkplane[ky * kh + kx] += wgrad;
          }
      }
    }
}

template <typename T>
void conv3d_forward(const T* in, const T* ker, T* out, int64_t batch, int64_t ci, int64_t co,
                    int64_t id, int64_t iw, int64_t ih, int64_t kd, int64_t kw, int64_t kh,
                    int64_t stride, int64_t pad, int64_t od, int64_t ow, int64_t oh) {
  if (stride == 1 && pad == 1 && kd == 3 && kw == 3 && kh == 3 && ih >= 2) {
    conv3d_k3_forward(in, ker, out, batch, ci, co, id, iw, ih);
    return;
  }
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t oc = 0; oc < co; ++oc) {
      T* ovol = out + (b * co + oc) * od * ow * oh;
      for (int64_t ic = 0; ic < ci; ++ic) {
        const T* ivol = in + (b * ci + ic) * id * iw * ih;
        const T* kvol = ker + (oc * ci + ic) * kd * kw * kh;
        for (int64_t kz = 0; kz < kd; ++kz)
          for (int64_t ky = 0; ky < kw; ++ky)
            for (int64_t kx = 0; kx < kh; ++kx) {
              const T wv = kvol[(kz * kw + ky) * kh + kx];
              if (wv == T(0)) continue;
              for (int64_t oz = 0; oz < od; ++oz) {
                const int64_t iz = oz * stride - pad + kz;
                if (iz < 0 || iz >= id) continue;
                for (int64_t oy = 0; oy < ow; ++oy) {
                  const int64_t iy = oy * stride - pad + ky;
                  if (iy < 0 || iy >= iw) continue;
                  const T* irow = ivol + (iz * iw + iy) * ih;
                  T* orow = ovol + (oz * ow + oy) * oh;
                  const int64_t base = -pad + kx;
                  if (stride == 1) {
                    const int64_t ox0 = std::max<int64_t>(0, -base);
                    const int64_t ox1 = std::min<int64_t>(oh, ih - base);
                    const T* ir = irow + base;
                    for (int64_t ox = ox0; ox < ox1; ++ox) orow[ox] += wv * ir[ox];
                  } else {
                    for (int64_t ox = 0; ox < oh; ++ox) {
                      const int64_t ix = ox * stride + base;
                      if (ix < 0 || ix >= ih) continue;
                      orow[ox] += wv * irow[ix];
                    }
                  }
                }
              }
            }
      }
    }
}

template <typename T>
void conv3d_backward(const T* in, const T* ker, const T* gout, T* gin, T* gker, int64_t batch,
                     int64_t ci, int64_t co, int64_t id, int64_t iw, int64_t ih, int64_t kd,
                     int64_t kw, int64_t kh, int64_t stride, int64_t pad, int64_t od, int64_t ow,
                     int64_t oh) {
  if (stride == 1 && pad == 1 && kd == 3 && kw == 3 && kh == 3 && ih >= 2) {
    if (gker) conv3d_k3_backward_kernel(in, gout, gker, batch, ci, co, id, iw, ih);
    if (gin) {
      const std::vector<T> flipped = flip_transpose_kernel(ker, co, ci, 27);
      std::vector<T> scratch(static_cast<size_t>(batch * ci * id * iw * ih));
      conv3d_k3_forward(gout, flipped.data(), scratch.data(), batch, co, ci, id, iw, ih);
      for (size_t i = 0; i < scratch.size(); ++i) gin[i] += scratch[i];
    }
    return;
  }
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t oc = 0; oc < co; ++oc) {
      const T* gvol = gout + (b * co + oc) * od * ow * oh;
      for (int64_t ic = 0; ic < ci; ++ic) {
        const T* ivol = in + (b * ci + ic) * id * iw * ih;
        const T* kvol = ker + (oc * ci + ic) * kd * kw * kh;
        T* givol = gin ? gin + (b * ci + ic) * id * iw * ih : nullptr;
        T* gkvol = gker ? gker + (oc * ci + ic) * kd * kw * kh : nullptr;
        for (int64_t kz = 0; kz < kd; ++kz)
          for (int64_t ky = 0; ky < kw; ++ky)
            for (int64_t kx = 0; kx < kh; ++kx) {
              const T wv = kvol[(kz * kw + ky) * kh + kx];
              T wgrad = T(0);
              for (int64_t oz = 0; oz < od; ++oz) {
                const int64_t iz = oz * stride - pad + kz;
                if (iz < 0 || iz >= id) continue;
                for (int64_t oy = 0; oy < ow; ++oy) {
                  const int64_t iy = oy * stride - pad + ky;
                  if (iy < 0 || iy >= iw) continue;
                  const T* irow = ivol + (iz * iw + iy) * ih;
                  const T* grow = gvol + (oz * ow + oy) * oh;
                  T* girow = givol ? givol + (iz * iw + iy) * ih : nullptr;
                  const int64_t base = -pad + kx;
                  if (stride == 1) {
                    const int64_t ox0 = std::max<int64_t>(0, -base);
                    const int64_t ox1 = std::min<int64_t>(oh, ih - base);
                    if (gker) {
                      T s = T(0);
                      const T* ir = irow + base;
                      for (int64_t ox = ox0; ox < ox1; ++ox) s += grow[ox] * ir[ox];
                      wgrad += s;
                    }
                    if (gin) {
                      T* gir = girow + base;
                      for (int64_t ox = ox0; ox < ox1; ++ox) gir[ox] += wv * grow[ox];
                    }
                  } else {
                    for (int64_t ox = 0; ox < oh; ++ox) {
                      const int64_t ix = ox * stride + base;
                      if (ix < 0 || ix >= ih) continue;
                      if (gker) wgrad += grow[ox] * irow[ix];
                      if (gin) girow[ix] += wv * grow[ox];
                    }
                  }
                }
              }
              if (gker) gkvol[(kz * kw + ky) * kh + kx] += wgrad;
            }
      }
    }
}

}  // namespace detail

// input [b, ci, spatial...], kernel [co, ci, kspatial...].
template <typename T>
Tensor<T> conv(const Tensor<T>& input, const Tensor<T>& kernel, int spatial_rank,
               int64_t stride = 1, int64_t pad = 0) {
  HDT_CHECK(spatial_rank == 2 || spatial_rank == 3, "conv: spatial_rank must be 2 or 3");
  HDT_CHECK(input.rank() == spatial_rank + 2, "conv: input rank ", input.rank(),
            " does not match spatial_rank ", spatial_rank, " (expected ", spatial_rank + 2,
            "), input ", shape_str(input.shape()));
  HDT_CHECK(kernel.rank() == spatial_rank + 2, "conv: kernel rank ", kernel.rank(),
            " does not match spatial_rank ", spatial_rank, ", kernel ",
            shape_str(kernel.shape()));
  HDT_CHECK(input.shape()[1] == kernel.shape()[1], "conv: input channels ", input.shape()[1],
            " do not match kernel channels ", kernel.shape()[1], "; input ",
            shape_str(input.shape()), " kernel ", shape_str(kernel.shape()));
  HDT_CHECK(stride >= 1, "conv: stride must be >= 1");
  HDT_CHECK(pad >= 0, "conv: padding must be >= 0");

  const int64_t batch = input.shape()[0], ci = input.shape()[1], co = kernel.shape()[0];
  Shape oshape{batch, co};
  for (int s = 0; s < spatial_rank; ++s) {
    const int64_t ie = input.shape()[2 + s], ke = kernel.shape()[2 + s];
    const int64_t oe = (ie + 2 * pad - ke) / stride + 1;
    HDT_CHECK(oe >= 1, "conv: kernel ", shape_str(kernel.shape()), " too large for input ",
              shape_str(input.shape()), " with pad ", pad);
    oshape.push_back(oe);
  }
  Tensor<T> out(oshape);

  if (spatial_rank == 2) {
    detail::conv2d_forward(input.data(), kernel.data(), out.data(), batch, ci, co,
                           input.shape()[2], input.shape()[3], kernel.shape()[2],
                           kernel.shape()[3], stride, pad, oshape[2], oshape[3]);
  } else {
    detail::conv3d_forward(input.data(), kernel.data(), out.data(), batch, ci, co,
                           input.shape()[2], input.shape()[3], input.shape()[4],
                           kernel.shape()[2], kernel.shape()[3], kernel.shape()[4], stride, pad,
                           oshape[2], oshape[3], oshape[4]);
  }

  if (detail::should_record<T>({&input, &kernel})) {
    auto in = input.node(), kn = kernel.node(), on = out.node();
    const Shape ishape = input.shape(), kshape = kernel.shape();
    Tape<T>::active()->record(
        [in, kn, on, ishape, kshape, oshape, spatial_rank, stride, pad, batch, ci, co] {
          const std::vector<T>* g = detail::out_grad(on);
          if (!g) return;
          T* gin = nullptr;
          T* gker = nullptr;
          if (detail::wants_grad(in)) {
            in->ensure_grad();
            gin = in->grad.data();
          }
          if (detail::wants_grad(kn)) {
            kn->ensure_grad();
            gker = kn->grad.data();
          }
          if (!gin && !gker) return;
          if (spatial_rank == 2) {
            detail::conv2d_backward(in->data.data(), kn->data.data(), g->data(), gin, gker,
                                    batch, ci, co, ishape[2], ishape[3], kshape[2], kshape[3],
                                    stride, pad, oshape[2], oshape[3]);
          } else {
            detail::conv3d_backward(in->data.data(), kn->data.data(), g->data(), gin, gker,
                                    batch, ci, co, ishape[2], ishape[3], ishape[4], kshape[2],
                                    kshape[3], kshape[4], stride, pad, oshape[2], oshape[3],
                                    oshape[4]);
          }
        },
        on);
  }
  return out;
}

// Per-channel bias: out[b,c,...] = x[b,c,...] + bias[c].
template <typename T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  HDT_CHECK(x.rank() >= 2 && bias.rank() == 1 && bias.shape()[0] == x.shape()[1],
            "add_channel_bias: bias ", shape_str(bias.shape()), " does not match channels of ",
            shape_str(x.shape()));
  const int64_t batch = x.shape()[0], channels = x.shape()[1];
  const int64_t inner = x.numel() / (batch * channels);
  Tensor<T> out(x.shape());
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t c = 0; c < channels; ++c) {
      const T bv = bias.at(c);
      const T* xp = x.data() + (b * channels + c) * inner;
      T* op = out.data() + (b * channels + c) * inner;
      for (int64_t i = 0; i < inner; ++i) op[i] = xp[i] + bv;
    }
  if (detail::should_record<T>({&x, &bias})) {
    auto xn = x.node(), bn = bias.node(), on = out.node();
    Tape<T>::active()->record(
        [xn, bn, on, batch, channels, inner] {
          const std::vector<T>* g = detail::out_grad(on);
          if (!g) return;
          if (detail::wants_grad(xn)) {
            xn->ensure_grad();
            for (size_t i = 0; i < g->size(); ++i) xn->grad[i] += (*g)[i];
          }
          if (detail::wants_grad(bn)) {
            bn->ensure_grad();
            for (int64_t b = 0; b < batch; ++b)
              for (int64_t c = 0; c < channels; ++c) {
                const T* gp = g->data() + (b * channels + c) * inner;
                T s = T(0);
                for (int64_t i = 0; i < inner; ++i) s += gp[i];
                bn->grad[c] += s;
              }
          }
        },
        on);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pooling / upsampling (window 2, stride 2)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> max_pool2(const Tensor<T>& x, int spatial_rank) {
  HDT_CHECK(spatial_rank == 2 || spatial_rank == 3, "max_pool2: spatial_rank must be 2 or 3");
  HDT_CHECK(x.rank() == spatial_rank + 2, "max_pool2: input rank ", x.rank(),
            " does not match spatial_rank ", spatial_rank);
  Shape oshape = x.shape();
  for (int s = 0; s < spatial_rank; ++s) {
    HDT_CHECK(x.shape()[2 + s] % 2 == 0, "max_pool2: spatial extent ", x.shape()[2 + s],
              " of ", shape_str(x.shape()), " is not even");
    oshape[2 + s] /= 2;
  }
  Tensor<T> out(oshape);
  auto argmax = std::make_shared<std::vector<int64_t>>(out.numel());

  const int64_t planes = x.shape()[0] * x.shape()[1];
  if (spatial_rank == 2) {
    const int64_t iw = x.shape()[2], ih = x.shape()[3], ow = oshape[2], oh = oshape[3];
    for (int64_t p = 0; p < planes; ++p) {
      const T* ip = x.data() + p * iw * ih;
      T* op = out.data() + p * ow * oh;
      int64_t* ap = argmax->data() + p * ow * oh;
      for (int64_t oy = 0; oy < ow; ++oy)
        for (int64_t ox = 0; ox < oh; ++ox) {
          int64_t best = (2 * oy) * ih + 2 * ox;
          T bv = ip[best];
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
              const int64_t idx = (2 * oy + dy) * ih + 2 * ox + dx;
              if (ip[idx] > bv) {
                bv = ip[idx];
                best = idx;
              }
            }
          op[oy * oh + ox] = bv;
          ap[oy * oh + ox] = p * iw * ih + best;
        }
    }
  } else {
    const int64_t id = x.shape()[2], iw = x.shape()[3], ih = x.shape()[4];
    const int64_t od = oshape[2], ow = oshape[3], oh = oshape[4];
    for (int64_t p = 0; p < planes; ++p) {
      const T* ip = x.data() + p * id * iw * ih;
      T* op = out.data() + p * od * ow * oh;
      int64_t* ap = argmax->data() + p * od * ow * oh;
      for (int64_t oz = 0; oz < od; ++oz)
        for (int64_t oy = 0; oy < ow; ++oy)
          for (int64_t ox = 0; ox < oh; ++ox) {
            int64_t best = ((2 * oz) * iw + 2 * oy) * ih + 2 * ox;
            T bv = ip[best];
            for (int dz = 0; dz < 2; ++dz)
              for (int dy = 0; dy < 2; ++dy)
                for (int dx = 0; dx < 2; ++dx) {
                  const int64_t idx = ((2 * oz + dz) * iw + 2 * oy + dy) * ih + 2 * ox + dx;
                  if (ip[idx] > bv) {
                    bv = ip[idx];
                    best = idx;
                  }
                }
            op[(oz * ow + oy) * oh + ox] = bv;
            ap[(oz * ow + oy) * oh + ox] = p * id * iw * ih + best;
          }
    }
  }

  if (detail::should_record<T>({&x})) {
    auto xn = x.node(), on = out.node();
    Tape<T>::active()->record(
        [xn, on, argmax] {
          const std::vector<T>* g = detail::out_grad(on);
          if (!g || !detail::wants_grad(xn)) return;
          xn->ensure_grad();
          for (size_t i = 0; i < g->size(); ++i) xn->grad[(*argmax)[i]] += (*g)[i];
        },
        on);
  }
  return out;
}

template <typename T>
Tensor<T> upsample_nearest2(const Tensor<T>& x, int spatial_rank) {
  HDT_CHECK(spatial_rank == 2 || spatial_rank == 3, "upsample: spatial_rank must be 2 or 3");
  HDT_CHECK(x.rank() == spatial_rank + 2, "upsample: input rank ", x.rank(),
            " does not match spatial_rank ", spatial_rank);
  Shape oshape = x.shape();
  for (int s = 0; s < spatial_rank; ++s) oshape[2 + s] *= 2;
  Tensor<T> out(oshape);
  const int64_t planes = x.shape()[0] * x.shape()[1];
  if (spatial_rank == 2) {
    const int64_t iw = x.shape()[2], ih = x.shape()[3];
    for (int64_t p = 0; p < planes; ++p) {
      const T* ip = x.data() + p * iw * ih;
      T* op = out.data() + p * 4 * iw * ih;
      for (int64_t y = 0; y < 2 * iw; ++y)
        for (int64_t x2 = 0; x2 < 2 * ih; ++x2)
          op[y * 2 * ih + x2] = ip[(y / 2) * ih + x2 / 2];
    }
  } else {
    const int64_t id = x.shape()[2], iw = x.shape()[3], ih = x.shape()[4];
    for (int64_t p = 0; p < planes; ++p) {
      const T* ip = x.data() + p * id * iw * ih;
      T* op = out.data() + p * 8 * id * iw * ih;
      for (int64_t z = 0; z < 2 * id; ++z)
        for (int64_t y = 0; y < 2 * iw; ++y)
          for (int64_t x2 = 0; x2 < 2 * ih; ++x2)
            op[(z * 2 * iw + y) * 2 * ih + x2] = ip[((z / 2) * iw + y / 2) * ih + x2 / 2];
    }
  }
  if (detail::should_record<T>({&x})) {
    auto xn = x.node(), on = out.node();
    const Shape ishape = x.shape();
    Tape<T>::active()->record(
        [xn, on, ishape, spatial_rank, planes] {
          const std::vector<T>* g = detail::out_grad(on);
          if (!g || !detail::wants_grad(xn)) return;
          xn->ensure_grad();
          if (spatial_rank == 2) {
            const int64_t iw = ishape[2], ih = ishape[3];
            for (int64_t p = 0; p < planes; ++p) {
              const T* gp = g->data() + p * 4 * iw * ih;
              T* xg = xn->grad.data() + p * iw * ih;
              for (int64_t y = 0; y < 2 * iw; ++y)
                for (int64_t x2 = 0; x2 < 2 * ih; ++x2)
                  xg[(y / 2) * ih + x2 / 2] += gp[y * 2 * ih + x2];
            }
          } else {
            const int64_t id = ishape[2], iw = ishape[3], ih = ishape[4];
            for (int64_t p = 0; p < planes; ++p) {
              const T* gp = g->data() + p * 8 * id * iw * ih;
              T* xg = xn->grad.data() + p * id * iw * ih;
              for (int64_t z = 0; z < 2 * id; ++z)
                for (int64_t y = 0; y < 2 * iw; ++y)
                  for (int64_t x2 = 0; x2 < 2 * ih; ++x2)
                    xg[((z / 2) * iw + y / 2) * ih + x2 / 2] +=
                        gp[(z * 2 * iw + y) * 2 * ih + x2];
            }
          }
        },
        on);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Softmax / dropout
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int64_t axis) {
  HDT_CHECK(axis >= 0 && axis < x.rank(), "softmax: axis ", axis, " out of range for ",
            shape_str(x.shape()));
  const int64_t extent = x.shape()[axis];
  int64_t inner = 1, outer = 1;
  for (int64_t i = axis + 1; i < x.rank(); ++i) inner *= x.shape()[i];
  for (int64_t i = 0; i < axis; ++i) outer *= x.shape()[i];
  Tensor<T> out(x.shape());
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t i = 0; i < inner; ++i) {
      const int64_t base = o * extent * inner + i;
      T mx = x.at(base);
      for (int64_t c = 1; c < extent; ++c) mx = std::max(mx, x.at(base + c * inner));
      T denom = T(0);
      for (int64_t c = 0; c < extent; ++c) {
        const T e = std::exp(x.at(base + c * inner) - mx);
        out.at(base + c * inner) = e;
        denom += e;
      }
      const T inv = T(1) / denom;
      for (int64_t c = 0; c < extent; ++c) out.at(base + c * inner) *= inv;
    }
  if (detail::should_record<T>({&x})) {
    auto xn = x.node(), on = out.node();
    Tape<T>::active()->record(
        [xn, on, outer, inner, extent] {
          const std::vector<T>* g = detail::out_grad(on);
          if (!g || !detail::wants_grad(xn)) return;
          xn->ensure_grad();
          for (int64_t o = 0; o < outer; ++o)
            for (int64_t i = 0; i < inner; ++i) {
              const int64_t base = o * extent * inner + i;
              T dot = T(0);
              for (int64_t c = 0; c < extent; ++c)
                dot += (*g)[base + c * inner] * on->data[base + c * inner];
              for (int64_t c = 0; c < extent; ++c) {
                const int64_t k = base + c * inner;
                xn->grad[k] += on->data[k] * ((*g)[k] - dot);
              }
            }
        },
        on);
  }
  return out;
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, bool training, Rng& rng) {
  HDT_CHECK(rate >= 0.0 && rate < 1.0, "dropout: rate must be in [0, 1), got ", rate);
  if (!training || rate == 0.0) return x;
  const T scale = static_cast<T>(1.0 / (1.0 - rate));
  auto mask = std::make_shared<std::vector<T>>(x.numel());
  Tensor<T> out(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) {
    const T m = rng.uniform() >= rate ? scale : T(0);
    (*mask)[i] = m;
    out.at(i) = x.at(i) * m;
  }
  if (detail::should_record<T>({&x})) {
    auto xn = x.node(), on = out.node();
    Tape<T>::active()->record(
        [xn, on, mask] {
          const std::vector<T>* g = detail::out_grad(on);
          if (!g || !detail::wants_grad(xn)) return;
          xn->ensure_grad();
          for (size_t i = 0; i < g->size(); ++i) xn->grad[i] += (*g)[i] * (*mask)[i];
        },
        on);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Parameters, SGD, gradient checking
// ---------------------------------------------------------------------------

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
void sgd_step(std::vector<NamedParam<T>>& params, double learning_rate) {
  for (auto& p : params)
    HDT_CHECK(p.tensor.has_grad(), "sgd_step: parameter '", p.name, "' has no gradient");
  for (auto& p : params) {
    T* d = p.tensor.data();
    const std::vector<T>& g = p.tensor.grad();
    const T lr = static_cast<T>(learning_rate);
    for (size_t i = 0; i < g.size(); ++i) d[i] -= lr * g[i];
    p.tensor.clear_grad();
  }
}

// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
// f must be a deterministic scalar-valued function of its input.
template <typename F>
double grad_check(F&& f, Tensor<double> input, double epsilon = 1e-5) {
  input.set_requires_grad(true);
  input.clear_grad();
  std::vector<double> analytic;
  {
    Tape<double> tape;
    Tensor<double> y = f(input);
    HDT_CHECK(y.numel() == 1, "grad_check: f must be scalar-valued");
    tape.backward(y);
    analytic = input.has_grad() ? input.grad() : std::vector<double>(input.numel(), 0.0);
  }
  input.clear_grad();
  input.set_requires_grad(false);
  double max_err = 0.0;
  for (int64_t i = 0; i < input.numel(); ++i) {
    const double saved = input.at(i);
    input.at(i) = saved + epsilon;
    const double yp = f(input).scalar();
    input.at(i) = saved - epsilon;
    const double ym = f(input).scalar();
    input.at(i) = saved;
    const double numeric = (yp - ym) / (2.0 * epsilon);
    const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
    max_err = std::max(max_err, err);
  }
  return max_err;
}

}  // namespace hdt
