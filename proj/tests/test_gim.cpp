#include <catch2/catch_amalgamated.hpp>

#include "misod/nn/gim.hpp"
#include "test_util.hpp"

using namespace misod;
using misod::test::random_tensor;

TEST_CASE("pool size clipping dedups in tiny configurations") {
  REQUIRE(clipped_pool_sizes({1, 5, 9, 13}, 22, 22) ==
          std::vector<int>{1, 5, 9, 13});
  REQUIRE(clipped_pool_sizes({1, 5, 9, 13}, 4, 4) == std::vector<int>{1, 4});
  REQUIRE(clipped_pool_sizes({1, 5, 9, 13}, 2, 2) == std::vector<int>{1, 2});
}

TEST_CASE("global context at production scale") {
  RngStream rng(31);
  GlobalInfoModule<float> gim(512, 256, {1, 5, 9, 13}, rng);
  gim.set_training(false);
  Tensor<float> r5(1, 512, 22, 22), t5(1, 512, 22, 22);
  for (std::size_t i = 0; i < r5.numel(); ++i) {
    r5[i] = static_cast<float>(rng.uniform01());
    t5[i] = static_cast<float>(rng.uniform01());
  }
  NoGradGuard ng;
  auto ctx = gim.forward(Var<float>(r5), Var<float>(t5));
  REQUIRE(ctx.g.shape() == Shape4{1, 256, 22, 22});
  REQUIRE(ctx.s_g.shape() == Shape4{1, 1, 22, 22});
  REQUIRE(ctx.g.value().all_finite());
  REQUIRE(ctx.s_g.value().min_value() >= 0.0f);
  REQUIRE(ctx.s_g.value().max_value() <= 1.0f);
}

TEST_CASE("gim rejects mismatched modal features") {
  RngStream rng(32);
  GlobalInfoModule<double> gim(8, 4, {1, 2}, rng);
  Tensor<double> a = random_tensor({1, 8, 4, 4}, rng);
  Tensor<double> b = random_tensor({1, 8, 6, 6}, rng);
  REQUIRE_THROWS_AS(gim.forward(Var<double>(a), Var<double>(b)),
                    ConfigError);
}

TEST_CASE("adaptive max pooling of a constant map is constant") {
  Tensor<double> f(1, 3, 8, 8, 0.42);
  for (int n : {1, 3, 5}) {
    Var<double> pooled = adaptive_max_pool2d(Var<double>(f), n);
    for (std::size_t i = 0; i < pooled.value().numel(); ++i)
      REQUIRE(pooled.value()[i] == 0.42);
  }
}

TEST_CASE("adaptive max pooling spec cases") {
  RngStream rng(33);
  // n = 1 reduces to the global max
  Tensor<double> x = random_tensor({1, 1, 4, 4}, rng);
  Var<double> g1 = adaptive_max_pool2d(Var<double>(x), 1);
  REQUIRE(g1.value()[0] == x.max_value());

  // n = H = W is the identity
  Var<double> same = adaptive_max_pool2d(Var<double>(x), 4);
  for (std::size_t i = 0; i < x.numel(); ++i)
    REQUIRE(same.value()[i] == x[i]);

  // n = 2 against exhaustive window enumeration
  Var<double> q = adaptive_max_pool2d(Var<double>(x), 2);
  for (int oy = 0; oy < 2; ++oy)
    for (int ox = 0; ox < 2; ++ox) {
      double best = -1e30;
      for (int iy = 2 * oy; iy < 2 * oy + 2; ++iy)
        for (int ix = 2 * ox; ix < 2 * ox + 2; ++ix)
          best = std::max(best, x.at(0, 0, iy, ix));
      REQUIRE(q.value().at(0, 0, oy, ox) == best);
    }

  REQUIRE_THROWS_AS(adaptive_max_pool2d(Var<double>(x), 5), InternalError);
}

TEST_CASE("adaptive max pooling is monotone and selective") {
  RngStream rng(34);
  Tensor<double> x = random_tensor({1, 2, 7, 7}, rng);
  Tensor<double> y = x;
  for (std::size_t i = 0; i < y.numel(); ++i)
    y[i] += rng.uniform01();  // y >= x elementwise
  for (int n : {1, 2, 3, 7}) {
    Var<double> px = adaptive_max_pool2d(Var<double>(x), n);
    Var<double> py = adaptive_max_pool2d(Var<double>(y), n);
    for (std::size_t i = 0; i < px.value().numel(); ++i) {
      REQUIRE(px.value()[i] <= py.value()[i]);
      // every pooled value is attained by some input element
      bool found = false;
      for (std::size_t j = 0; j < x.numel() && !found; ++j)
        found = x[j] == px.value()[i];
      REQUIRE(found);
    }
  }
}

TEST_CASE("tiny configuration with clipped pool grid") {
  RngStream rng(35);
  const auto sizes = clipped_pool_sizes({1, 5, 9, 13}, 4, 4);
  GlobalInfoModule<double> gim(64, 32, sizes, rng);
  gim.set_training(false);
  Tensor<double> r5 = random_tensor({1, 64, 4, 4}, rng);
  Tensor<double> t5 = random_tensor({1, 64, 4, 4}, rng);
  NoGradGuard ng;
  auto ctx = gim.forward(Var<double>(r5), Var<double>(t5));
  REQUIRE(ctx.g.shape() == Shape4{1, 32, 4, 4});
  REQUIRE(ctx.s_g.shape() == Shape4{1, 1, 4, 4});
  REQUIRE(ctx.s_g.value().min_value() >= 0.0);
  REQUIRE(ctx.s_g.value().max_value() <= 1.0);
}

TEST_CASE("concatenation order matters: swapped modalities change g") {
  RngStream rng(36);
  GlobalInfoModule<double> gim(8, 4, {1, 2}, rng);
  gim.set_training(false);
  Tensor<double> r5 = random_tensor({1, 8, 4, 4}, rng);
  Tensor<double> t5 = random_tensor({1, 8, 4, 4}, rng);
  NoGradGuard ng;
  auto ab = gim.forward(Var<double>(r5), Var<double>(t5));
  auto ba = gim.forward(Var<double>(t5), Var<double>(r5));
  bool differs = false;
  for (std::size_t i = 0; i < ab.g.value().numel(); ++i)
    differs |= ab.g.value()[i] != ba.g.value()[i];
  REQUIRE(differs);
}

TEST_CASE("s_g stays in [0,1] for extreme inputs") {
  RngStream rng(37);
  GlobalInfoModule<double> gim(4, 4, {1, 2}, rng);
  gim.set_training(false);
  for (double v : {-100.0, 0.0, 100.0}) {
    Tensor<double> f(1, 4, 4, 4, v);
    NoGradGuard ng;
    auto ctx = gim.forward(Var<double>(f), Var<double>(f));
    REQUIRE(ctx.s_g.value().min_value() >= 0.0);
    REQUIRE(ctx.s_g.value().max_value() <= 1.0);
    REQUIRE(ctx.s_g.value().all_finite());
  }
}
