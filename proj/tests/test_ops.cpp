#include <catch2/catch_amalgamated.hpp>

#include "misod/core/ops.hpp"
#include "test_util.hpp"

using namespace misod;
using misod::test::check_gradients;
using misod::test::random_tensor;
using misod::test::weighted_sum;

namespace {

// independent per-pixel convolution reference
Tensor<double> conv2d_naive(const Tensor<double>& x, const Tensor<double>& w,
                            const Tensor<double>* b, int stride, int pad) {
  const int out_h = (x.h() + 2 * pad - w.h()) / stride + 1;
  const int out_w = (x.w() + 2 * pad - w.w()) / stride + 1;
  Tensor<double> out(x.n(), w.n(), out_h, out_w);
  for (int n = 0; n < x.n(); ++n)
    for (int oc = 0; oc < w.n(); ++oc)
      for (int oy = 0; oy < out_h; ++oy)
        for (int ox = 0; ox < out_w; ++ox) {
          double acc = b ? b->at(0, oc, 0, 0) : 0.0;
          for (int ic = 0; ic < x.c(); ++ic)
            for (int ky = 0; ky < w.h(); ++ky)
              for (int kx = 0; kx < w.w(); ++kx) {
                const int iy = oy * stride - pad + ky;
                const int ix = ox * stride - pad + kx;
                if (iy < 0 || iy >= x.h() || ix < 0 || ix >= x.w()) continue;
                acc += x.at(n, ic, iy, ix) * w.at(oc, ic, ky, kx);
              }
          out.at(n, oc, oy, ox) = acc;
        }
  return out;
}

}  // namespace

TEST_CASE("conv2d matches the per-pixel reference") {
  RngStream rng(11);
  struct Case {
    int n, cin, h, w, cout, k, stride, pad;
    bool bias;
  };
  for (const Case& c : {Case{2, 3, 7, 9, 4, 3, 1, 1, true},
                        Case{1, 5, 8, 8, 2, 1, 1, 0, false},
                        Case{2, 4, 9, 7, 3, 3, 2, 1, true},
                        Case{1, 2, 11, 11, 6, 7, 2, 3, false},
                        Case{1, 8, 4, 4, 3, 3, 1, 1, true}}) {
    Tensor<double> x = random_tensor({c.n, c.cin, c.h, c.w}, rng);
    Tensor<double> w = random_tensor({c.cout, c.cin, c.k, c.k}, rng);
    Tensor<double> b = random_tensor({1, c.cout, 1, 1}, rng);
    Var<double> out =
        conv2d(Var<double>(x), Var<double>(w),
               c.bias ? Var<double>(b) : Var<double>{}, c.stride, c.pad);
    Tensor<double> ref =
        conv2d_naive(x, w, c.bias ? &b : nullptr, c.stride, c.pad);
    REQUIRE(out.shape() == ref.shape());
    for (std::size_t i = 0; i < ref.numel(); ++i)
      REQUIRE_THAT(out.value()[i],
                   Catch::Matchers::WithinAbs(ref[i], 1e-10));
  }
}

TEST_CASE("conv2d rejects channel mismatch") {
  RngStream rng(3);
  Tensor<double> x = random_tensor({1, 3, 5, 5}, rng);
  Tensor<double> w = random_tensor({2, 4, 3, 3}, rng);
  REQUIRE_THROWS_AS(
      conv2d(Var<double>(x), Var<double>(w), Var<double>{}, 1, 1),
      ConfigError);
}

TEST_CASE("conv2d gradients") {
  RngStream rng(12);
  Tensor<double> x = random_tensor({2, 3, 6, 5}, rng);
  Tensor<double> w = random_tensor({4, 3, 3, 3}, rng);
  Tensor<double> b = random_tensor({1, 4, 1, 1}, rng);
  Tensor<double> proj = random_tensor({2, 4, 6, 5}, rng);
  auto f = [&](std::vector<Var<double>>& v) {
    return weighted_sum(conv2d(v[0], v[1], v[2], 1, 1), proj);
  };
  auto rep = check_gradients(f, {x, w, b});
  REQUIRE(rep.max_rel_err < 1e-7);

  // strided, no bias
  Tensor<double> proj2 = random_tensor({2, 4, 3, 3}, rng);
  auto f2 = [&](std::vector<Var<double>>& v) {
    return weighted_sum(conv2d(v[0], v[1], Var<double>{}, 2, 1), proj2);
  };
  rep = check_gradients(f2, {x, w});
  REQUIRE(rep.max_rel_err < 1e-7);
}

TEST_CASE("elementwise op gradients") {
  RngStream rng(13);
  Tensor<double> a = random_tensor({2, 3, 4, 5}, rng);
  Tensor<double> b = random_tensor({2, 3, 4, 5}, rng);
  Tensor<double> proj = random_tensor({2, 3, 4, 5}, rng);

  auto rep = check_gradients(
      [&](std::vector<Var<double>>& v) {
        return weighted_sum(add(v[0], v[1]), proj);
      },
      {a, b});
  REQUIRE(rep.max_rel_err < 1e-8);

  rep = check_gradients(
      [&](std::vector<Var<double>>& v) {
        return weighted_sum(sub(v[0], v[1]), proj);
      },
      {a, b});
  REQUIRE(rep.max_rel_err < 1e-8);

  rep = check_gradients(
      [&](std::vector<Var<double>>& v) {
        return weighted_sum(mul(v[0], v[1]), proj);
      },
      {a, b});
  REQUIRE(rep.max_rel_err < 1e-7);

  rep = check_gradients(
      [&](std::vector<Var<double>>& v) {
        return weighted_sum(scale(v[0], 2.5), proj);
      },
      {a});
  REQUIRE(rep.max_rel_err < 1e-8);

  rep = check_gradients(
      [&](std::vector<Var<double>>& v) {
        return weighted_sum(sigmoid(v[0]), proj);
      },
      {a});
  REQUIRE(rep.max_rel_err < 1e-7);

  // keep samples away from the relu/clamp kinks
  Tensor<double> far = a;
  for (std::size_t i = 0; i < far.numel(); ++i)
    far[i] += far[i] >= 0 ? 0.5 : -0.5;
  rep = check_gradients(
      [&](std::vector<Var<double>>& v) {
        return weighted_sum(relu(v[0]), proj);
      },
      {far});
  REQUIRE(rep.max_rel_err < 1e-8);

  rep = check_gradients(
      [&](std::vector<Var<double>>& v) {
        return weighted_sum(clamp(v[0], -0.4, 0.4), proj);
      },
      {far});
  REQUIRE(rep.max_rel_err < 1e-8);
}

TEST_CASE("concat and broadcast_mul gradients") {
  RngStream rng(14);
  Tensor<double> a = random_tensor({2, 2, 3, 4}, rng);
  Tensor<double> b = random_tensor({2, 5, 3, 4}, rng);
  Tensor<double> proj = random_tensor({2, 7, 3, 4}, rng);
  auto rep = check_gradients(
      [&](std::vector<Var<double>>& v) {
        return weighted_sum(concat_channels<double>({v[0], v[1]}), proj);
      },
      {a, b});
  REQUIRE(rep.max_rel_err < 1e-8);

  Tensor<double> w = random_tensor({2, 2, 1, 1}, rng);
  Tensor<double> proj2 = random_tensor({2, 2, 3, 4}, rng);
  rep = check_gradients(
      [&](std::vector<Var<double>>& v) {
        return weighted_sum(broadcast_mul(v[0], v[1]), proj2);
      },
      {a, w});
  REQUIRE(rep.max_rel_err < 1e-7);
}

TEST_CASE("pooling forward semantics") {
  // max_pool2d against exhaustive window enumeration
  RngStream rng(15);
  Tensor<double> x = random_tensor({1, 2, 6, 6}, rng);
  Var<double> p = max_pool2d(Var<double>(x), 2, 2);
  REQUIRE(p.shape() == Shape4{1, 2, 3, 3});
  for (int c = 0; c < 2; ++c)
    for (int oy = 0; oy < 3; ++oy)
      for (int ox = 0; ox < 3; ++ox) {
        double best = -1e30;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx)
            best = std::max(best, x.at(0, c, 2 * oy + dy, 2 * ox + dx));
        REQUIRE(p.value().at(0, c, oy, ox) == best);
      }

  // adaptive windows parity with the floor/ceil partition
  Tensor<double> y = random_tensor({1, 1, 5, 7}, rng);
  Var<double> q = adaptive_max_pool2d(Var<double>(y), 3);
  for (int oy = 0; oy < 3; ++oy)
    for (int ox = 0; ox < 3; ++ox) {
      const int y0 = oy * 5 / 3, y1 = ((oy + 1) * 5 + 2) / 3;
      const int x0 = ox * 7 / 3, x1 = ((ox + 1) * 7 + 2) / 3;
      double best = -1e30;
      for (int iy = y0; iy < y1; ++iy)
        for (int ix = x0; ix < x1; ++ix)
          best = std::max(best, y.at(0, 0, iy, ix));
      REQUIRE(q.value().at(0, 0, oy, ox) == best);
    }
}

TEST_CASE("pooling gradients") {
  RngStream rng(16);
  Tensor<double> x = random_tensor({2, 3, 6, 6}, rng);
  Tensor<double> proj = random_tensor({2, 3, 3, 3}, rng);
  auto rep = check_gradients(
      [&](std::vector<Var<double>>& v) {
        return weighted_sum(max_pool2d(v[0], 2, 2), proj);
      },
      {x});
  REQUIRE(rep.max_rel_err < 1e-8);

  Tensor<double> proj31 = random_tensor({2, 3, 3, 3}, rng);
  rep = check_gradients(
      [&](std::vector<Var<double>>& v) {
        return weighted_sum(max_pool2d(v[0], 3, 2, 1), proj31);
      },
      {x});
  REQUIRE(rep.max_rel_err < 1e-8);

  Tensor<double> proj2 = random_tensor({2, 3, 2, 2}, rng);
  rep = check_gradients(
      [&](std::vector<Var<double>>& v) {
        return weighted_sum(adaptive_max_pool2d(v[0], 2), proj2);
      },
      {x});
  REQUIRE(rep.max_rel_err < 1e-8);

  Tensor<double> proj3 = random_tensor({2, 3, 1, 1}, rng);
  rep = check_gradients(
      [&](std::vector<Var<double>>& v) {
        return weighted_sum(global_avg_pool(v[0]), proj3);
      },
      {x});
  REQUIRE(rep.max_rel_err < 1e-8);

  rep = check_gradients(
      [&](std::vector<Var<double>>& v) {
        return weighted_sum(global_max_pool(v[0]), proj3);
      },
      {x});
  REQUIRE(rep.max_rel_err < 1e-8);
}

TEST_CASE("bilinear resize values and gradients") {
  // half-pixel convention on a 2x2 -> 2x4 ramp
  Tensor<double> x(1, 1, 2, 2);
  x.at(0, 0, 0, 0) = 0;
  x.at(0, 0, 0, 1) = 1;
  x.at(0, 0, 1, 0) = 0;
  x.at(0, 0, 1, 1) = 1;
  Var<double> up = bilinear_resize(Var<double>(x), 2, 4);
  const double expected[4] = {0.0, 0.25, 0.75, 1.0};
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 4; ++c)
      REQUIRE_THAT(up.value().at(0, 0, r, c),
                   Catch::Matchers::WithinAbs(expected[c], 1e-12));

  RngStream rng(17);
  Tensor<double> y = random_tensor({2, 2, 5, 4}, rng);
  Tensor<double> proj = random_tensor({2, 2, 9, 7}, rng);
  auto rep = check_gradients(
      [&](std::vector<Var<double>>& v) {
        return weighted_sum(bilinear_resize(v[0], 9, 7), proj);
      },
      {y});
  REQUIRE(rep.max_rel_err < 1e-8);

  Tensor<double> projd = random_tensor({2, 2, 3, 2}, rng);
  rep = check_gradients(
      [&](std::vector<Var<double>>& v) {
        return weighted_sum(bilinear_resize(v[0], 3, 2), projd);
      },
      {y});
  REQUIRE(rep.max_rel_err < 1e-8);
}

TEST_CASE("batch_norm statistics and gradients") {
  RngStream rng(18);
  Tensor<double> x = random_tensor({3, 4, 5, 5}, rng);
  Tensor<double> gamma = random_tensor({1, 4, 1, 1}, rng, 0.5, 1.5);
  Tensor<double> beta = random_tensor({1, 4, 1, 1}, rng);

  SECTION("training mode normalizes to zero mean / unit variance") {
    Tensor<double> rm(1, 4, 1, 1), rv(1, 4, 1, 1, 1.0);
    Tensor<double> ones(1, 4, 1, 1, 1.0), zeros(1, 4, 1, 1, 0.0);
    Var<double> out = batch_norm(Var<double>(x), Var<double>(ones),
                                 Var<double>(zeros), rm, rv, true);
    const std::size_t m = 3 * 5 * 5;
    for (int c = 0; c < 4; ++c) {
      double mean = 0, var = 0;
      for (int n = 0; n < 3; ++n)
        for (int i = 0; i < 25; ++i) mean += out.value().plane(n, c)[i];
      mean /= double(m);
      for (int n = 0; n < 3; ++n)
        for (int i = 0; i < 25; ++i) {
          double d = out.value().plane(n, c)[i] - mean;
          var += d * d;
        }
      var /= double(m);
      REQUIRE_THAT(mean, Catch::Matchers::WithinAbs(0.0, 1e-12));
      REQUIRE_THAT(var, Catch::Matchers::WithinAbs(1.0, 1e-4));  // eps skew
    }
  }

  SECTION("gradients, training mode") {
    Tensor<double> proj = random_tensor({3, 4, 5, 5}, rng);
    auto f = [&](std::vector<Var<double>>& v) {
      Tensor<double> rm(1, 4, 1, 1), rv(1, 4, 1, 1, 1.0);
      return weighted_sum(batch_norm(v[0], v[1], v[2], rm, rv, true), proj);
    };
    auto rep = check_gradients(f, {x, gamma, beta});
    REQUIRE(rep.max_rel_err < 1e-6);
  }

  SECTION("gradients, eval mode") {
    Tensor<double> rm = random_tensor({1, 4, 1, 1}, rng);
    Tensor<double> rv = random_tensor({1, 4, 1, 1}, rng, 0.5, 2.0);
    Tensor<double> proj = random_tensor({3, 4, 5, 5}, rng);
    auto f = [&](std::vector<Var<double>>& v) {
      Tensor<double> rm2 = rm, rv2 = rv;
      return weighted_sum(batch_norm(v[0], v[1], v[2], rm2, rv2, false),
                          proj);
    };
    auto rep = check_gradients(f, {x, gamma, beta});
    REQUIRE(rep.max_rel_err < 1e-7);
  }

  SECTION("running statistics update") {
    Tensor<double> rm(1, 4, 1, 1), rv(1, 4, 1, 1, 1.0);
    batch_norm(Var<double>(x), Var<double>(gamma), Var<double>(beta), rm, rv,
               true);
    const std::size_t m = 3 * 5 * 5;
    for (int c = 0; c < 4; ++c) {
      double mean = 0;
      for (int n = 0; n < 3; ++n)
        for (int i = 0; i < 25; ++i) mean += x.plane(n, c)[i];
      mean /= double(m);
      double var = 0;
      for (int n = 0; n < 3; ++n)
        for (int i = 0; i < 25; ++i) {
          double d = x.plane(n, c)[i] - mean;
          var += d * d;
        }
      var /= double(m - 1);
      REQUIRE_THAT(rm.at(0, c, 0, 0),
                   Catch::Matchers::WithinAbs(0.1 * mean, 1e-12));
      REQUIRE_THAT(rv.at(0, c, 0, 0),
                   Catch::Matchers::WithinAbs(0.9 + 0.1 * var, 1e-12));
    }
  }
}

TEST_CASE("reductions and fan-out accumulation") {
  RngStream rng(19);
  Tensor<double> x = random_tensor({1, 2, 3, 3}, rng);
  auto rep = check_gradients(
      [&](std::vector<Var<double>>& v) { return sum_all(v[0]); }, {x});
  REQUIRE(rep.max_rel_err < 1e-9);
  rep = check_gradients(
      [&](std::vector<Var<double>>& v) { return mean_all(v[0]); }, {x});
  REQUIRE(rep.max_rel_err < 1e-9);

  // same node consumed twice: gradient must accumulate across both uses
  rep = check_gradients(
      [&](std::vector<Var<double>>& v) {
        Var<double> s = sigmoid(v[0]);
        return sum_all(mul(s, s));
      },
      {x});
  REQUIRE(rep.max_rel_err < 1e-7);
}

TEST_CASE("no-grad mode records no tape") {
  RngStream rng(20);
  Tensor<double> x = random_tensor({1, 1, 4, 4}, rng);
  Var<double> vx(x, true);
  NoGradGuard ng;
  Var<double> out = relu(vx);
  REQUIRE_FALSE(out.requires_grad());
  REQUIRE(out.node()->parents.empty());
}
