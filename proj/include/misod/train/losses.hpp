#pragma once

#include <cmath>

#include "misod/core/ops.hpp"
#include "misod/nn/decoder.hpp"

namespace misod {

enum class Reduction { kMean, kSum };

// Sum-over-pixels binary cross entropy, divided by the element count under
// mean reduction so loss magnitudes stay resolution-independent. The
// prediction must already be clamped into (0,1); bce_loss below does that.
template <typename T>
Var<T> bce_core(const Var<T>& s, const Tensor<T>& y, Reduction red) {
  if (!(s.shape() == y.shape()))
    throw InputError("bce: prediction shape " + s.shape().str() +
                     " != target shape " + y.shape().str());
  const std::size_t count = s.value().numel();
  const T norm = red == Reduction::kMean ? T(1) / static_cast<T>(count) : T(1);
  double acc = 0;
  for (std::size_t i = 0; i < count; ++i) {
    const double si = s.value()[i];
    const double yi = y[i];
    acc -= yi * std::log(si) + (1.0 - yi) * std::log(1.0 - si);
  }
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc) * norm);
  auto sn = s.node();
  auto yt = std::make_shared<Tensor<T>>(y);
  return make_op<T>(std::move(out), {s}, [sn, yt, norm](Node<T>& self) {
    sn->ensure_grad();
    const T g = self.grad[0] * norm;
    for (std::size_t i = 0; i < sn->grad.numel(); ++i) {
      const T si = sn->value[i];
      const T yi = (*yt)[i];
      sn->grad[i] += g * (si - yi) / (si * (T(1) - si));
    }
  });
}

template <typename T>
Var<T> bce_loss(const Var<T>& s, const Tensor<T>& y,
                Reduction red = Reduction::kMean, T eps = T(1e-7)) {
  return bce_core(clamp(s, eps, T(1) - eps), y, red);
}

// L_d: both branch predictions against the same ground truth.
template <typename T>
Var<T> branch_loss(const Var<T>& s1, const Var<T>& s2, const Tensor<T>& y,
                   Reduction red = Reduction::kMean, T eps = T(1e-7)) {
  return add(bce_loss(s1, y, red, eps), bce_loss(s2, y, red, eps));
}

// Area-average block downsampling followed by re-binarization at 0.5;
// used to build Y_g from Y. Requires exact divisibility.
template <typename T>
Tensor<T> downsample_mask(const Tensor<T>& y, int factor) {
  internal_check(factor >= 1 && y.h() % factor == 0 && y.w() % factor == 0,
                 "mask downsample: size not divisible by factor");
  const int oh = y.h() / factor, ow = y.w() / factor;
  Tensor<T> out(y.n(), y.c(), oh, ow);
  const double inv = 1.0 / (static_cast<double>(factor) * factor);
  for (int n = 0; n < y.n(); ++n)
    for (int c = 0; c < y.c(); ++c) {
      const T* src = y.plane(n, c);
      T* dst = out.plane(n, c);
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          double acc = 0;
          for (int dy = 0; dy < factor; ++dy)
            for (int dx = 0; dx < factor; ++dx)
              acc += src[static_cast<std::size_t>(oy * factor + dy) * y.w() +
                         ox * factor + dx];
          dst[static_cast<std::size_t>(oy) * ow + ox] =
              acc * inv >= 0.5 ? T(1) : T(0);
        }
    }
  return out;
}

// L_g: BCE between the auxiliary global score and the ground truth reduced
// to the score's stride.
template <typename T>
Var<T> global_loss(const Var<T>& s_g, const Tensor<T>& y,
                   Reduction red = Reduction::kMean, T eps = T(1e-7)) {
  internal_check(y.h() % s_g.shape().h == 0 && y.w() % s_g.shape().w == 0,
                 "global loss: ground truth not an integer multiple of s_g");
  const int factor = y.h() / s_g.shape().h;
  internal_check(y.w() / s_g.shape().w == factor,
                 "global loss: anisotropic stride");
  Tensor<T> y_g = downsample_mask(y, factor);
  internal_check(y_g.shape() == s_g.shape(),
                 "global loss: downsampled mask shape mismatch");
  return bce_loss(s_g, y_g, red, eps);
}

// Edge-aware first-difference smoothness: sum over pixels and the two
// directions of Psi(|dS| * exp(-alpha*|dY|)), Psi(v) = sqrt(v^2 + 1e-6).
// Forward differences, zero at the trailing boundary.
template <typename T>
Var<T> smoothness_loss(const Var<T>& s, const Tensor<T>& y, T alpha = T(10),
                       Reduction red = Reduction::kMean) {
  if (!(s.shape() == y.shape()))
    throw InputError("smoothness: prediction/target shape mismatch");
  constexpr double kPsiEps = 1e-6;
  const Shape4 sh = s.shape();
  const std::size_t count = s.value().numel();
  const T norm = red == Reduction::kMean ? T(1) / static_cast<T>(count) : T(1);

  // edge weights from the ground truth, captured for the backward pass
  auto wx = std::make_shared<Tensor<T>>(sh);
  auto wy = std::make_shared<Tensor<T>>(sh);
  double acc = 0;
  for (int n = 0; n < sh.n; ++n)
    for (int c = 0; c < sh.c; ++c) {
      const T* sv = s.value().plane(n, c);
      const T* yv = y.plane(n, c);
      T* wxp = wx->plane(n, c);
      T* wyp = wy->plane(n, c);
      for (int iy = 0; iy < sh.h; ++iy)
        for (int ix = 0; ix < sh.w; ++ix) {
          const std::size_t i = static_cast<std::size_t>(iy) * sh.w + ix;
          const double dsx = ix + 1 < sh.w ? sv[i + 1] - sv[i] : 0.0;
          const double dyx =
              ix + 1 < sh.w ? std::abs(double(yv[i + 1]) - yv[i]) : 0.0;
          const double dsy = iy + 1 < sh.h ? sv[i + sh.w] - sv[i] : 0.0;
          const double dyy =
              iy + 1 < sh.h ? std::abs(double(yv[i + sh.w]) - yv[i]) : 0.0;
          const double wxv = std::exp(-double(alpha) * dyx);
          const double wyv = std::exp(-double(alpha) * dyy);
          wxp[i] = static_cast<T>(wxv);
          wyp[i] = static_cast<T>(wyv);
          acc += std::sqrt(dsx * dsx * wxv * wxv + kPsiEps);
          acc += std::sqrt(dsy * dsy * wyv * wyv + kPsiEps);
        }
    }
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc) * norm);
  auto sn = s.node();
  return make_op<T>(std::move(out), {s}, [sn, wx, wy, norm](Node<T>& self) {
    sn->ensure_grad();
    const Shape4 sh = sn->value.shape();
    const T g = self.grad[0] * norm;
    for (int n = 0; n < sh.n; ++n)
      for (int c = 0; c < sh.c; ++c) {
        const T* sv = sn->value.plane(n, c);
        const T* wxp = wx->plane(n, c);
        const T* wyp = wy->plane(n, c);
        T* ds = sn->grad.plane(n, c);
        for (int iy = 0; iy < sh.h; ++iy)
          for (int ix = 0; ix < sh.w; ++ix) {
            const std::size_t i = static_cast<std::size_t>(iy) * sh.w + ix;
            if (ix + 1 < sh.w) {
              const double d = double(sv[i + 1]) - sv[i];
              const double w2 = double(wxp[i]) * wxp[i];
              const double t =
                  g * d * w2 / std::sqrt(d * d * w2 + kPsiEps);
              ds[i + 1] += static_cast<T>(t);
              ds[i] -= static_cast<T>(t);
            }
            if (iy + 1 < sh.h) {
              const double d = double(sv[i + sh.w]) - sv[i];
              const double w2 = double(wyp[i]) * wyp[i];
              const double t =
                  g * d * w2 / std::sqrt(d * d * w2 + kPsiEps);
              ds[i + sh.w] += static_cast<T>(t);
              ds[i] -= static_cast<T>(t);
            }
          }
      }
  });
}

struct LossOptions {
  double beta = 0.5;   // smoothness weight
  double alpha = 10.0; // edge sharpness
  double eps = 1e-7;   // BCE clamp
  Reduction reduction = Reduction::kMean;
};

// Differentiable loss terms; absent supervision heads leave the matching
// term undefined and excluded from the total.
template <typename T>
struct LossTerms {
  Var<T> l_d, l_g, l_f, l_s;
  Var<T> total;
};

struct LossBreakdown {
  double l_d = 0, l_g = 0, l_f = 0, l_s = 0, total = 0;
  bool has_l_d = false, has_l_g = false;
};

template <typename T>
LossTerms<T> total_loss(const SaliencyOutputs<T>& outputs, const Tensor<T>& y,
                        const LossOptions& opt = {}) {
  internal_check(outputs.sf.defined(), "total_loss: missing final map");
  LossTerms<T> terms;
  const T eps = static_cast<T>(opt.eps);
  terms.l_f = bce_loss(outputs.sf, y, opt.reduction, eps);
  terms.total = terms.l_f;
  if (outputs.s1.defined() && outputs.s2.defined()) {
    terms.l_d = branch_loss(outputs.s1, outputs.s2, y, opt.reduction, eps);
    terms.total = add(terms.total, terms.l_d);
  }
  if (outputs.sg.defined()) {
    terms.l_g = global_loss(outputs.sg, y, opt.reduction, eps);
    terms.total = add(terms.total, terms.l_g);
  }
  terms.l_s =
      smoothness_loss(outputs.sf, y, static_cast<T>(opt.alpha), opt.reduction);
  if (opt.beta != 0.0) {
    terms.total =
        add(terms.total, scale(terms.l_s, static_cast<T>(opt.beta)));
  }
  return terms;
}

template <typename T>
LossBreakdown breakdown(const LossTerms<T>& t) {
  LossBreakdown b;
  if (t.l_d.defined()) {
    b.l_d = t.l_d.item();
    b.has_l_d = true;
  }
  if (t.l_g.defined()) {
    b.l_g = t.l_g.item();
    b.has_l_g = true;
  }
  b.l_f = t.l_f.item();
  b.l_s = t.l_s.item();
  b.total = t.total.item();
  return b;
}

}  // namespace misod
