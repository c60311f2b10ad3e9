#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <vector>

#include "misod/core/autograd.hpp"

namespace misod {

namespace detail {

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using EMap = Eigen::Map<EMat<T>>;
template <typename T>
using ECMap = Eigen::Map<const EMat<T>>;
template <typename T>
using EStrideMap =
    Eigen::Map<EMat<T>, Eigen::Unaligned, Eigen::OuterStride<>>;
template <typename T>
using ECStrideMap =
    Eigen::Map<const EMat<T>, Eigen::Unaligned, Eigen::OuterStride<>>;

inline int conv_out_size(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

// Unrolls the [oy0, oy1) band of output rows of one batch item into
// cols[(c*kh+ky)*kw+kx][(oy-oy0)*out_w+ox], zero-filling out-of-bounds taps.
template <typename T>
void im2col_band(const T* x, int c_in, int h, int w, int kh, int kw,
                 int stride, int pad, int oy0, int oy1, int out_w, T* cols) {
  const int band = (oy1 - oy0) * out_w;
  for (int ci = 0; ci < c_in; ++ci) {
    const T* xc = x + static_cast<std::size_t>(ci) * h * w;
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        T* row = cols + (static_cast<std::size_t>(ci) * kh * kw + ky * kw + kx) *
                            band;
        for (int oy = oy0; oy < oy1; ++oy) {
          const int iy = oy * stride - pad + ky;
          T* dst = row + static_cast<std::size_t>(oy - oy0) * out_w;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + out_w, T(0));
            continue;
          }
          const T* src = xc + static_cast<std::size_t>(iy) * w;
          for (int ox = 0; ox < out_w; ++ox) {
            const int ix = ox * stride - pad + kx;
            dst[ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

// Transpose of im2col_band: scatter-adds cols back into dx.
template <typename T>
void col2im_band_add(T* dx, int c_in, int h, int w, int kh, int kw, int stride,
                     int pad, int oy0, int oy1, int out_w, const T* cols) {
  const int band = (oy1 - oy0) * out_w;
  for (int ci = 0; ci < c_in; ++ci) {
    T* xc = dx + static_cast<std::size_t>(ci) * h * w;
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        const T* row =
            cols +
            (static_cast<std::size_t>(ci) * kh * kw + ky * kw + kx) * band;
        for (int oy = oy0; oy < oy1; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          const T* src = row + static_cast<std::size_t>(oy - oy0) * out_w;
          T* dst = xc + static_cast<std::size_t>(iy) * w;
          for (int ox = 0; ox < out_w; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

// band height keeping the unrolled patch matrix around ~32 MB of floats
inline int conv_band_rows(int k_dim, int out_h, int out_w) {
  const std::size_t budget = 8u * 1024u * 1024u;
  std::size_t rows = budget / (static_cast<std::size_t>(k_dim) * out_w);
  if (rows < 1) rows = 1;
  if (rows > static_cast<std::size_t>(out_h)) rows = out_h;
  return static_cast<int>(rows);
}

struct AxisWeights {
  std::vector<int> i0, i1;
  std::vector<double> w0, w1;
};

// Half-pixel-center bilinear sampling grid (output corners do not align to
// input corners); the single convention used everywhere, including the
// ground-truth downsampling.
inline AxisWeights bilinear_axis(int in, int out) {
  AxisWeights a;
  a.i0.resize(out);
  a.i1.resize(out);
  a.w0.resize(out);
  a.w1.resize(out);
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double s = (o + 0.5) * scale - 0.5;
    if (s < 0) s = 0;
    if (s > in - 1) s = in - 1;
    const int lo = static_cast<int>(std::floor(s));
    const int hi = std::min(lo + 1, in - 1);
    const double frac = s - lo;
    a.i0[o] = lo;
    a.i1[o] = hi;
    a.w0[o] = 1.0 - frac;
    a.w1[o] = frac;
  }
  return a;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// plain-tensor helpers (shared by ops and the data pipeline)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> bilinear_resize_tensor(const Tensor<T>& x, int out_h, int out_w) {
  internal_check(out_h >= 1 && out_w >= 1, "resize target must be >= 1");
  if (out_h == x.h() && out_w == x.w()) return x;
  const auto ay = detail::bilinear_axis(x.h(), out_h);
  const auto ax = detail::bilinear_axis(x.w(), out_w);
  Tensor<T> out(x.n(), x.c(), out_h, out_w);
  for (int n = 0; n < x.n(); ++n) {
    for (int c = 0; c < x.c(); ++c) {
      const T* src = x.plane(n, c);
      T* dst = out.plane(n, c);
      for (int oy = 0; oy < out_h; ++oy) {
        const T* r0 = src + static_cast<std::size_t>(ay.i0[oy]) * x.w();
        const T* r1 = src + static_cast<std::size_t>(ay.i1[oy]) * x.w();
        for (int ox = 0; ox < out_w; ++ox) {
          const double top = ay.w0[oy] * (ax.w0[ox] * r0[ax.i0[ox]] +
                                          ax.w1[ox] * r0[ax.i1[ox]]);
          const double bot = ay.w1[oy] * (ax.w0[ox] * r1[ax.i0[ox]] +
                                          ax.w1[ox] * r1[ax.i1[ox]]);
          dst[static_cast<std::size_t>(oy) * out_w + ox] =
              static_cast<T>(top + bot);
        }
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> nearest_resize_tensor(const Tensor<T>& x, int out_h, int out_w) {
  internal_check(out_h >= 1 && out_w >= 1, "resize target must be >= 1");
  if (out_h == x.h() && out_w == x.w()) return x;
  Tensor<T> out(x.n(), x.c(), out_h, out_w);
  const double sy = static_cast<double>(x.h()) / out_h;
  const double sx = static_cast<double>(x.w()) / out_w;
  for (int n = 0; n < x.n(); ++n) {
    for (int c = 0; c < x.c(); ++c) {
      const T* src = x.plane(n, c);
      T* dst = out.plane(n, c);
      for (int oy = 0; oy < out_h; ++oy) {
        int iy = std::min(static_cast<int>((oy + 0.5) * sy), x.h() - 1);
        for (int ox = 0; ox < out_w; ++ox) {
          int ix = std::min(static_cast<int>((ox + 0.5) * sx), x.w() - 1);
          dst[static_cast<std::size_t>(oy) * out_w + ox] =
              src[static_cast<std::size_t>(iy) * x.w() + ix];
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// elementwise / shape ops
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  internal_check(a.shape() == b.shape(),
                 "add: shape mismatch " + a.shape().str() + " vs " +
                     b.shape().str());
  Tensor<T> out = a.value();
  out += b.value();
  auto an = a.node();
  auto bn = b.node();
  return make_op<T>(std::move(out), {a, b}, [an, bn](Node<T>& self) {
    if (an->requires_grad) an->accumulate(self.grad);
    if (bn->requires_grad) bn->accumulate(self.grad);
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  internal_check(a.shape() == b.shape(), "sub: shape mismatch");
  Tensor<T> out = a.value();
  out -= b.value();
  auto an = a.node();
  auto bn = b.node();
  return make_op<T>(std::move(out), {a, b}, [an, bn](Node<T>& self) {
    if (an->requires_grad) an->accumulate(self.grad);
    if (bn->requires_grad) {
      bn->ensure_grad();
      bn->grad.add_scaled(self.grad, T(-1));
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  internal_check(a.shape() == b.shape(), "mul: shape mismatch");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
  auto an = a.node();
  auto bn = b.node();
  return make_op<T>(std::move(out), {a, b}, [an, bn](Node<T>& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < self.grad.numel(); ++i)
        an->grad[i] += self.grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < self.grad.numel(); ++i)
        bn->grad[i] += self.grad[i] * an->value[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T k) {
  Tensor<T> out = a.value();
  out *= k;
  auto an = a.node();
  return make_op<T>(std::move(out), {a}, [an, k](Node<T>& self) {
    an->ensure_grad();
    an->grad.add_scaled(self.grad, k);
  });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < out.numel(); ++i)
    if (out[i] < T(0)) out[i] = T(0);
  auto xn = x.node();
  return make_op<T>(std::move(out), {x}, [xn](Node<T>& self) {
    xn->ensure_grad();
    for (std::size_t i = 0; i < self.grad.numel(); ++i)
      if (xn->value[i] > T(0)) xn->grad[i] += self.grad[i];
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < out.numel(); ++i)
    out[i] = T(1) / (T(1) + std::exp(-out[i]));
  auto xn = x.node();
  return make_op<T>(std::move(out), {x}, [xn](Node<T>& self) {
    xn->ensure_grad();
    for (std::size_t i = 0; i < self.grad.numel(); ++i) {
      const T s = self.value[i];
      xn->grad[i] += self.grad[i] * s * (T(1) - s);
    }
  });
}

// gradient passes where lo <= x <= hi
template <typename T>
Var<T> clamp(const Var<T>& x, T lo, T hi) {
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < out.numel(); ++i)
    out[i] = std::min(hi, std::max(lo, out[i]));
  auto xn = x.node();
  return make_op<T>(std::move(out), {x}, [xn, lo, hi](Node<T>& self) {
    xn->ensure_grad();
    for (std::size_t i = 0; i < self.grad.numel(); ++i) {
      const T v = xn->value[i];
      if (v >= lo && v <= hi) xn->grad[i] += self.grad[i];
    }
  });
}

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& xs) {
  internal_check(!xs.empty(), "concat: empty input list");
  const int n = xs[0].shape().n, h = xs[0].shape().h, w = xs[0].shape().w;
  int c_total = 0;
  for (const auto& x : xs) {
    internal_check(x.shape().n == n && x.shape().h == h && x.shape().w == w,
                   "concat: spatial/batch mismatch");
    c_total += x.shape().c;
  }
  Tensor<T> out(n, c_total, h, w);
  int c_off = 0;
  for (const auto& x : xs) {
    const auto& v = x.value();
    for (int in = 0; in < n; ++in) {
      std::copy(v.plane(in, 0), v.plane(in, 0) + v.numel() / n,
                out.plane(in, c_off));
    }
    c_off += x.shape().c;
  }
  std::vector<std::shared_ptr<Node<T>>> nodes;
  for (const auto& x : xs) nodes.push_back(x.node());
  return make_op<T>(std::move(out), xs, [nodes, n, h, w](Node<T>& self) {
    int c_off = 0;
    const std::size_t plane_sz = static_cast<std::size_t>(h) * w;
    for (const auto& xn : nodes) {
      const int ci = xn->value.c();
      if (xn->requires_grad) {
        xn->ensure_grad();
        for (int in = 0; in < n; ++in) {
          const T* src = self.grad.plane(in, c_off);
          T* dst = xn->grad.plane(in, 0);
          for (std::size_t i = 0; i < static_cast<std::size_t>(ci) * plane_sz;
               ++i)
            dst[i] += src[i];
        }
      }
      c_off += ci;
    }
  });
}

// out[n,c,y,x] = x[n,c,y,x] * w[n,c,0,0]; the channel-attention rescaling
template <typename T>
Var<T> broadcast_mul(const Var<T>& x, const Var<T>& w) {
  internal_check(w.shape().n == x.shape().n && w.shape().c == x.shape().c &&
                     w.shape().h == 1 && w.shape().w == 1,
                 "broadcast_mul: weight must be (N,C,1,1) matching x");
  Tensor<T> out = x.value();
  const std::size_t plane = static_cast<std::size_t>(x.shape().h) *
                            x.shape().w;
  for (int n = 0; n < x.shape().n; ++n)
    for (int c = 0; c < x.shape().c; ++c) {
      const T k = w.value().at(n, c, 0, 0);
      T* p = out.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) p[i] *= k;
    }
  auto xn = x.node();
  auto wn = w.node();
  return make_op<T>(std::move(out), {x, w}, [xn, wn, plane](Node<T>& self) {
    const int N = self.value.n(), C = self.value.c();
    if (xn->requires_grad) xn->ensure_grad();
    if (wn->requires_grad) wn->ensure_grad();
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const T* g = self.grad.plane(n, c);
        const T k = wn->value.at(n, c, 0, 0);
        if (xn->requires_grad) {
          T* dx = xn->grad.plane(n, c);
          for (std::size_t i = 0; i < plane; ++i) dx[i] += g[i] * k;
        }
        if (wn->requires_grad) {
          const T* xv = xn->value.plane(n, c);
          T acc = T(0);
          for (std::size_t i = 0; i < plane; ++i) acc += g[i] * xv[i];
          wn->grad.at(n, c, 0, 0) += acc;
        }
      }
  });
}

template <typename T>
Var<T> sum_all(const Var<T>& x) {
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(x.value().sum()));
  auto xn = x.node();
  return make_op<T>(std::move(out), {x}, [xn](Node<T>& self) {
    xn->ensure_grad();
    const T g = self.grad[0];
    for (std::size_t i = 0; i < xn->grad.numel(); ++i) xn->grad[i] += g;
  });
}

template <typename T>
Var<T> mean_all(const Var<T>& x) {
  const T inv = T(1) / static_cast<T>(x.value().numel());
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(x.value().sum()) * inv);
  auto xn = x.node();
  return make_op<T>(std::move(out), {x}, [xn, inv](Node<T>& self) {
    xn->ensure_grad();
    const T g = self.grad[0] * inv;
    for (std::size_t i = 0; i < xn->grad.numel(); ++i) xn->grad[i] += g;
  });
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

// weight: (Cout, Cin, kh, kw); bias (optional, pass Var<T>{}): (1, Cout, 1, 1)
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias,
              int stride = 1, int pad = 0) {
  const Shape4 xs = x.shape();
  const Shape4 ws = weight.shape();
  if (xs.c != ws.c) {
    throw ConfigError("conv2d: input has " + std::to_string(xs.c) +
                      " channels, weight expects " + std::to_string(ws.c));
  }
  const int out_h = detail::conv_out_size(xs.h, ws.h, stride, pad);
  const int out_w = detail::conv_out_size(xs.w, ws.w, stride, pad);
  internal_check(out_h >= 1 && out_w >= 1, "conv2d: empty output");
  const int k_dim = ws.c * ws.h * ws.w;

  Tensor<T> out(xs.n, ws.n, out_h, out_w);
  {
    const int band_rows = detail::conv_band_rows(k_dim, out_h, out_w);
    std::vector<T> cols(static_cast<std::size_t>(k_dim) * band_rows * out_w);
    detail::ECMap<T> wmat(weight.value().data(), ws.n, k_dim);
    for (int n = 0; n < xs.n; ++n) {
      for (int oy0 = 0; oy0 < out_h; oy0 += band_rows) {
        const int oy1 = std::min(out_h, oy0 + band_rows);
        const int band = (oy1 - oy0) * out_w;
        detail::im2col_band(x.value().plane(n, 0), xs.c, xs.h, xs.w, ws.h,
                            ws.w, stride, pad, oy0, oy1, out_w, cols.data());
        detail::ECMap<T> cmat(cols.data(), k_dim, band);
        detail::EStrideMap<T> omat(
            out.plane(n, 0) + static_cast<std::size_t>(oy0) * out_w, ws.n,
            band, Eigen::OuterStride<>(static_cast<Eigen::Index>(out_h) *
                                       out_w));
        omat.noalias() = wmat * cmat;
      }
    }
    if (bias.defined()) {
      internal_check(bias.shape() == Shape4{1, ws.n, 1, 1},
                     "conv2d: bias must be (1,Cout,1,1)");
      const std::size_t plane = static_cast<std::size_t>(out_h) * out_w;
      for (int n = 0; n < xs.n; ++n)
        for (int c = 0; c < ws.n; ++c) {
          const T b = bias.value().at(0, c, 0, 0);
          T* p = out.plane(n, c);
          for (std::size_t i = 0; i < plane; ++i) p[i] += b;
        }
    }
  }

  auto xn = x.node();
  auto wn = weight.node();
  auto bn = bias.defined() ? bias.node() : nullptr;
  std::vector<Var<T>> parents = {x, weight};
  if (bias.defined()) parents.push_back(bias);

  auto backprop = [xn, wn, bn, stride, pad, out_h, out_w,
                   k_dim](Node<T>& self) {
    const Shape4 xs = xn->value.shape();
    const Shape4 ws = wn->value.shape();
    const int band_rows = detail::conv_band_rows(k_dim, out_h, out_w);
    std::vector<T> cols;
    std::vector<T> dcols;
    if (wn->requires_grad) {
      wn->ensure_grad();
      cols.resize(static_cast<std::size_t>(k_dim) * band_rows * out_w);
    }
    if (xn->requires_grad) {
      xn->ensure_grad();
      dcols.resize(static_cast<std::size_t>(k_dim) * band_rows * out_w);
    }
    detail::ECMap<T> wmat(wn->value.data(), ws.n, k_dim);
    for (int n = 0; n < xs.n; ++n) {
      for (int oy0 = 0; oy0 < out_h; oy0 += band_rows) {
        const int oy1 = std::min(out_h, oy0 + band_rows);
        const int band = (oy1 - oy0) * out_w;
        detail::ECStrideMap<T> gmat(
            self.grad.plane(n, 0) + static_cast<std::size_t>(oy0) * out_w,
            ws.n, band,
            Eigen::OuterStride<>(static_cast<Eigen::Index>(out_h) * out_w));
        if (wn->requires_grad) {
          detail::im2col_band(xn->value.plane(n, 0), xs.c, xs.h, xs.w, ws.h,
                              ws.w, stride, pad, oy0, oy1, out_w, cols.data());
          detail::ECMap<T> cmat(cols.data(), k_dim, band);
          detail::EMap<T> dwmat(wn->grad.data(), ws.n, k_dim);
          dwmat.noalias() += gmat * cmat.transpose();
        }
        if (xn->requires_grad) {
          detail::EMap<T> dcmat(dcols.data(), k_dim, band);
          dcmat.noalias() = wmat.transpose() * gmat;
          detail::col2im_band_add(xn->grad.plane(n, 0), xs.c, xs.h, xs.w,
                                  ws.h, ws.w, stride, pad, oy0, oy1, out_w,
                                  dcols.data());
        }
      }
    }
    if (bn && bn->requires_grad) {
      bn->ensure_grad();
      const std::size_t plane = static_cast<std::size_t>(out_h) * out_w;
      for (int n = 0; n < xs.n; ++n)
        for (int c = 0; c < ws.n; ++c) {
          const T* g = self.grad.plane(n, c);
          T acc = T(0);
          for (std::size_t i = 0; i < plane; ++i) acc += g[i];
          bn->grad.at(0, c, 0, 0) += acc;
        }
    }
  };
  return make_op<T>(std::move(out), std::move(parents), std::move(backprop));
}

// ---------------------------------------------------------------------------
// pooling
// ---------------------------------------------------------------------------

template <typename T>
Var<T> max_pool2d(const Var<T>& x, int k, int stride, int pad = 0) {
  const Shape4 xs = x.shape();
  const int out_h = detail::conv_out_size(xs.h, k, stride, pad);
  const int out_w = detail::conv_out_size(xs.w, k, stride, pad);
  internal_check(out_h >= 1 && out_w >= 1, "max_pool2d: empty output");
  Tensor<T> out(xs.n, xs.c, out_h, out_w);
  auto argmax = std::make_shared<std::vector<std::int32_t>>(out.numel());
  std::size_t oidx = 0;
  for (int n = 0; n < xs.n; ++n)
    for (int c = 0; c < xs.c; ++c) {
      const T* src = x.value().plane(n, c);
      for (int oy = 0; oy < out_h; ++oy)
        for (int ox = 0; ox < out_w; ++ox, ++oidx) {
          T best = -std::numeric_limits<T>::infinity();
          std::int32_t best_i = -1;
          for (int ky = 0; ky < k; ++ky) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= xs.h) continue;
            for (int kx = 0; kx < k; ++kx) {
              const int ix = ox * stride - pad + kx;
              if (ix < 0 || ix >= xs.w) continue;
              const T v = src[static_cast<std::size_t>(iy) * xs.w + ix];
              if (v > best) {
                best = v;
                best_i = static_cast<std::int32_t>(iy * xs.w + ix);
              }
            }
          }
          internal_check(best_i >= 0, "max_pool2d: window fully padded");
          out[oidx] = best;
          (*argmax)[oidx] = best_i;
        }
    }
  auto xn = x.node();
  const std::size_t in_plane = static_cast<std::size_t>(xs.h) * xs.w;
  const std::size_t out_plane = static_cast<std::size_t>(out_h) * out_w;
  return make_op<T>(std::move(out), {x},
                    [xn, argmax, in_plane, out_plane](Node<T>& self) {
    xn->ensure_grad();
    const int planes = self.value.n() * self.value.c();
    for (int p = 0; p < planes; ++p) {
      T* dx = xn->grad.data() + p * in_plane;
      const T* g = self.grad.data() + p * out_plane;
      const std::int32_t* am = argmax->data() + p * out_plane;
      for (std::size_t i = 0; i < out_plane; ++i) dx[am[i]] += g[i];
    }
  });
}

// Output grid n x n; cell (i, j) covers rows [floor(i*H/n), ceil((i+1)*H/n)).
template <typename T>
Var<T> adaptive_max_pool2d(const Var<T>& x, int out_n) {
  internal_check(out_n >= 1, "adaptive_max_pool2d: n must be >= 1");
  const Shape4 xs = x.shape();
  internal_check(out_n <= xs.h && out_n <= xs.w,
                 "adaptive_max_pool2d: n exceeds input size");
  Tensor<T> out(xs.n, xs.c, out_n, out_n);
  auto argmax = std::make_shared<std::vector<std::int32_t>>(out.numel());
  auto lo = [](int i, int in, int n) { return (i * in) / n; };
  auto hi = [](int i, int in, int n) { return ((i + 1) * in + n - 1) / n; };
  std::size_t oidx = 0;
  for (int n = 0; n < xs.n; ++n)
    for (int c = 0; c < xs.c; ++c) {
      const T* src = x.value().plane(n, c);
      for (int oy = 0; oy < out_n; ++oy)
        for (int ox = 0; ox < out_n; ++ox, ++oidx) {
          const int y0 = lo(oy, xs.h, out_n), y1 = hi(oy, xs.h, out_n);
          const int x0 = lo(ox, xs.w, out_n), x1 = hi(ox, xs.w, out_n);
          T best = -std::numeric_limits<T>::infinity();
          std::int32_t best_i = -1;
          for (int iy = y0; iy < y1; ++iy)
            for (int ix = x0; ix < x1; ++ix) {
              const T v = src[static_cast<std::size_t>(iy) * xs.w + ix];
              if (v > best) {
                best = v;
                best_i = static_cast<std::int32_t>(iy * xs.w + ix);
              }
            }
          out[oidx] = best;
          (*argmax)[oidx] = best_i;
        }
    }
  auto xn = x.node();
  const std::size_t in_plane = static_cast<std::size_t>(xs.h) * xs.w;
  const std::size_t out_plane = static_cast<std::size_t>(out_n) * out_n;
  return make_op<T>(std::move(out), {x},
                    [xn, argmax, in_plane, out_plane](Node<T>& self) {
    xn->ensure_grad();
    const int planes = self.value.n() * self.value.c();
    for (int p = 0; p < planes; ++p) {
      T* dx = xn->grad.data() + p * in_plane;
      const T* g = self.grad.data() + p * out_plane;
      const std::int32_t* am = argmax->data() + p * out_plane;
      for (std::size_t i = 0; i < out_plane; ++i) dx[am[i]] += g[i];
    }
  });
}

template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  const Shape4 xs = x.shape();
  const std::size_t plane = static_cast<std::size_t>(xs.h) * xs.w;
  Tensor<T> out(xs.n, xs.c, 1, 1);
  for (int n = 0; n < xs.n; ++n)
    for (int c = 0; c < xs.c; ++c) {
      const T* p = x.value().plane(n, c);
      double acc = 0;
      for (std::size_t i = 0; i < plane; ++i) acc += p[i];
      out.at(n, c, 0, 0) = static_cast<T>(acc / plane);
    }
  auto xn = x.node();
  return make_op<T>(std::move(out), {x}, [xn, plane](Node<T>& self) {
    xn->ensure_grad();
    const int N = self.value.n(), C = self.value.c();
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const T g = self.grad.at(n, c, 0, 0) / static_cast<T>(plane);
        T* dx = xn->grad.plane(n, c);
        for (std::size_t i = 0; i < plane; ++i) dx[i] += g;
      }
  });
}

template <typename T>
Var<T> global_max_pool(const Var<T>& x) {
  const Shape4 xs = x.shape();
  const std::size_t plane = static_cast<std::size_t>(xs.h) * xs.w;
  Tensor<T> out(xs.n, xs.c, 1, 1);
  auto argmax =
      std::make_shared<std::vector<std::int32_t>>(static_cast<std::size_t>(
          xs.n) * xs.c);
  for (int n = 0; n < xs.n; ++n)
    for (int c = 0; c < xs.c; ++c) {
      const T* p = x.value().plane(n, c);
      std::size_t best = 0;
      for (std::size_t i = 1; i < plane; ++i)
        if (p[i] > p[best]) best = i;
      out.at(n, c, 0, 0) = p[best];
      (*argmax)[static_cast<std::size_t>(n) * xs.c + c] =
          static_cast<std::int32_t>(best);
    }
  auto xn = x.node();
  return make_op<T>(std::move(out), {x}, [xn, argmax, plane](Node<T>& self) {
    xn->ensure_grad();
    const int N = self.value.n(), C = self.value.c();
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        T* dx = xn->grad.plane(n, c);
        dx[(*argmax)[static_cast<std::size_t>(n) * C + c]] +=
            self.grad.at(n, c, 0, 0);
      }
  });
}

// ---------------------------------------------------------------------------
// resampling
// ---------------------------------------------------------------------------

template <typename T>
Var<T> bilinear_resize(const Var<T>& x, int out_h, int out_w) {
  if (out_h == x.shape().h && out_w == x.shape().w) {
    // identity resample: still a node so callers can treat it uniformly
    Tensor<T> out = x.value();
    auto xn = x.node();
    return make_op<T>(std::move(out), {x}, [xn](Node<T>& self) {
      xn->accumulate(self.grad);
    });
  }
  Tensor<T> out = bilinear_resize_tensor(x.value(), out_h, out_w);
  auto xn = x.node();
  return make_op<T>(std::move(out), {x}, [xn, out_h, out_w](Node<T>& self) {
    xn->ensure_grad();
    const Shape4 xs = xn->value.shape();
    const auto ay = detail::bilinear_axis(xs.h, out_h);
    const auto ax = detail::bilinear_axis(xs.w, out_w);
    for (int n = 0; n < xs.n; ++n)
      for (int c = 0; c < xs.c; ++c) {
        T* dx = xn->grad.plane(n, c);
        const T* g = self.grad.plane(n, c);
        for (int oy = 0; oy < out_h; ++oy)
          for (int ox = 0; ox < out_w; ++ox) {
            const T gv = g[static_cast<std::size_t>(oy) * out_w + ox];
            dx[static_cast<std::size_t>(ay.i0[oy]) * xs.w + ax.i0[ox]] +=
                static_cast<T>(ay.w0[oy] * ax.w0[ox]) * gv;
            dx[static_cast<std::size_t>(ay.i0[oy]) * xs.w + ax.i1[ox]] +=
                static_cast<T>(ay.w0[oy] * ax.w1[ox]) * gv;
            dx[static_cast<std::size_t>(ay.i1[oy]) * xs.w + ax.i0[ox]] +=
                static_cast<T>(ay.w1[oy] * ax.w0[ox]) * gv;
            dx[static_cast<std::size_t>(ay.i1[oy]) * xs.w + ax.i1[ox]] +=
                static_cast<T>(ay.w1[oy] * ax.w1[ox]) * gv;
          }
      }
  });
}

// ---------------------------------------------------------------------------
// batch normalization
// ---------------------------------------------------------------------------

// gamma/beta: (1,C,1,1). Training mode normalizes by batch statistics and
// updates the running buffers in place (single-writer); eval mode uses the
// stored running statistics, which also covers the pooled-1x1 batch-of-one
// case.
template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                  Tensor<T>& running_mean, Tensor<T>& running_var,
                  bool training, T momentum = T(0.1), T eps = T(1e-5)) {
  const Shape4 xs = x.shape();
  const int C = xs.c;
  internal_check(gamma.shape() == Shape4{1, C, 1, 1} &&
                     beta.shape() == Shape4{1, C, 1, 1} &&
                     running_mean.shape() == Shape4{1, C, 1, 1} &&
                     running_var.shape() == Shape4{1, C, 1, 1},
                 "batch_norm: per-channel parameter shape mismatch");
  const std::size_t plane = static_cast<std::size_t>(xs.h) * xs.w;
  const std::size_t m = static_cast<std::size_t>(xs.n) * plane;

  auto mean = std::make_shared<std::vector<T>>(C);
  auto ivar = std::make_shared<std::vector<T>>(C);
  if (training) {
    for (int c = 0; c < C; ++c) {
      double acc = 0;
      for (int n = 0; n < xs.n; ++n) {
        const T* p = x.value().plane(n, c);
        for (std::size_t i = 0; i < plane; ++i) acc += p[i];
      }
      const double mu = acc / static_cast<double>(m);
      double vacc = 0;
      for (int n = 0; n < xs.n; ++n) {
        const T* p = x.value().plane(n, c);
        for (std::size_t i = 0; i < plane; ++i) {
          const double d = p[i] - mu;
          vacc += d * d;
        }
      }
      const double var = vacc / static_cast<double>(m);
      (*mean)[c] = static_cast<T>(mu);
      (*ivar)[c] = static_cast<T>(1.0 / std::sqrt(var + eps));
      const double var_unbiased = m > 1 ? vacc / static_cast<double>(m - 1)
                                        : var;
      running_mean.at(0, c, 0, 0) =
          (T(1) - momentum) * running_mean.at(0, c, 0, 0) +
          momentum * static_cast<T>(mu);
      running_var.at(0, c, 0, 0) =
          (T(1) - momentum) * running_var.at(0, c, 0, 0) +
          momentum * static_cast<T>(var_unbiased);
    }
  } else {
    for (int c = 0; c < C; ++c) {
      (*mean)[c] = running_mean.at(0, c, 0, 0);
      (*ivar)[c] =
          static_cast<T>(1.0 / std::sqrt(running_var.at(0, c, 0, 0) + eps));
    }
  }

  Tensor<T> out(xs);
  for (int n = 0; n < xs.n; ++n)
    for (int c = 0; c < C; ++c) {
      const T* p = x.value().plane(n, c);
      T* o = out.plane(n, c);
      const T mu = (*mean)[c], iv = (*ivar)[c];
      const T gm = gamma.value().at(0, c, 0, 0);
      const T bt = beta.value().at(0, c, 0, 0);
      for (std::size_t i = 0; i < plane; ++i)
        o[i] = (p[i] - mu) * iv * gm + bt;
    }

  auto xn = x.node();
  auto gn = gamma.node();
  auto bn = beta.node();
  return make_op<T>(
      std::move(out), {x, gamma, beta},
      [xn, gn, bn, mean, ivar, training, plane, m](Node<T>& self) {
        const Shape4 xs = xn->value.shape();
        const int C = xs.c;
        for (int c = 0; c < C; ++c) {
          const T mu = (*mean)[c], iv = (*ivar)[c];
          const T gm = gn->value.at(0, c, 0, 0);
          // channel-wide reductions
          double sum_g = 0, sum_g_xhat = 0;
          for (int n = 0; n < xs.n; ++n) {
            const T* g = self.grad.plane(n, c);
            const T* xv = xn->value.plane(n, c);
            for (std::size_t i = 0; i < plane; ++i) {
              sum_g += g[i];
              sum_g_xhat += g[i] * (xv[i] - mu) * iv;
            }
          }
          if (gn->requires_grad) {
            gn->ensure_grad();
            gn->grad.at(0, c, 0, 0) += static_cast<T>(sum_g_xhat);
          }
          if (bn->requires_grad) {
            bn->ensure_grad();
            bn->grad.at(0, c, 0, 0) += static_cast<T>(sum_g);
          }
          if (!xn->requires_grad) continue;
          xn->ensure_grad();
          if (training) {
            const double inv_m = 1.0 / static_cast<double>(m);
            for (int n = 0; n < xs.n; ++n) {
              const T* g = self.grad.plane(n, c);
              const T* xv = xn->value.plane(n, c);
              T* dx = xn->grad.plane(n, c);
              for (std::size_t i = 0; i < plane; ++i) {
                const double xhat = (xv[i] - mu) * iv;
                dx[i] += static_cast<T>(
                    gm * iv *
                    (g[i] - inv_m * (sum_g + xhat * sum_g_xhat)));
              }
            }
          } else {
            for (int n = 0; n < xs.n; ++n) {
              const T* g = self.grad.plane(n, c);
              T* dx = xn->grad.plane(n, c);
              for (std::size_t i = 0; i < plane; ++i) dx[i] += g[i] * gm * iv;
            }
          }
        }
      });
}

}  // namespace misod
