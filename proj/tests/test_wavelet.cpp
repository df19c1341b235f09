#include <catch2/catch_amalgamated.hpp>

#include "wecdg/gradcheck.hpp"
#include "wecdg/wavelet.hpp"

using namespace wecdg;
using T = Tensor<double>;

namespace {

double mean_of(const T &t) {
  double acc = 0;
  for (size_t i = 0; i < t.size(); ++i) acc += t[i];
  return acc / static_cast<double>(t.size());
}

double energy(const T &t) {
  double acc = 0;
  for (size_t i = 0; i < t.size(); ++i) acc += t[i] * t[i];
  return acc;
}

double max_abs_diff(const T &a, const T &b) {
  double m = 0;
  for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("constant image concentrates in the approximation band") {
  const double v = 0.42;
  auto sb = dwt2(T::full({6, 8, 2}, v));
  for (size_t i = 0; i < sb.approx.size(); ++i) {
    CHECK(sb.approx[i] == Catch::Approx(2 * v).epsilon(1e-15));
    CHECK(sb.horizontal[i] == 0.0);
    CHECK(sb.vertical[i] == 0.0);
    CHECK(sb.diagonal[i] == 0.0);
  }
}

TEST_CASE("hand-evaluated 2x2 block") {
  T x({2, 2, 1}, {1.0, 2.0, 3.0, 4.0});
  auto sb = dwt2(x);
  CHECK(sb.approx[0] == 5.0);
  CHECK(sb.horizontal[0] == -1.0);
  CHECK(sb.vertical[0] == -2.0);
  CHECK(sb.diagonal[0] == 0.0);

  // inverse of the same block
  auto rec = iwt2(T({1, 1, 1}, {5.0}), T({1, 1, 1}, {-1.0}), T({1, 1, 1}, {-2.0}),
                  T({1, 1, 1}, {0.0}));
  CHECK(rec[0] == 1.0);
  CHECK(rec[1] == 2.0);
  CHECK(rec[2] == 3.0);
  CHECK(rec[3] == 4.0);
}

TEST_CASE("subband shapes and error contracts") {
  auto sb = dwt2(T::zeros({64, 64, 3}));
  CHECK(sb.approx.shape() == Shape{32, 32, 3});
  CHECK(sb.horizontal.shape() == Shape{32, 32, 3});
  CHECK(sb.vertical.shape() == Shape{32, 32, 3});
  CHECK(sb.diagonal.shape() == Shape{32, 32, 3});

  CHECK_THROWS_AS(dwt2(T::zeros({5, 4, 1})), OddDimensions);
  CHECK_THROWS_AS(dwt2(T::zeros({4, 7, 1})), OddDimensions);
  CHECK_THROWS_AS(iwt2(T::zeros({2, 2, 1}), T::zeros({2, 2, 1}), T::zeros({2, 3, 1}),
                       T::zeros({2, 2, 1})),
                  ShapeMismatch);
}

TEST_CASE("perfect reconstruction and energy preservation") {
  Rng rng(404);
  for (int trial = 0; trial < 5; ++trial) {
    T x = T::uniform({64, 64, 3}, rng, 0.0, 1.0);
    auto sb = dwt2(x);
    auto rec = iwt2(sb);
    CHECK(max_abs_diff(rec, x) < 1e-12);

    const double ex = energy(x);
    const double es =
        energy(sb.approx) + energy(sb.horizontal) + energy(sb.vertical) + energy(sb.diagonal);
    CHECK(std::abs(ex - es) / ex < 1e-12);

    // global luminance lives in cA only
    CHECK(mean_of(rec) == Catch::Approx(mean_of(sb.approx) / 2.0).epsilon(1e-13));
  }

  auto zero = iwt2(T::zeros({4, 4, 2}), T::zeros({4, 4, 2}), T::zeros({4, 4, 2}),
                   T::zeros({4, 4, 2}));
  for (size_t i = 0; i < zero.size(); ++i) CHECK(zero[i] == 0.0);
}

TEST_CASE("luminance decoupling of subband swaps") {
  Rng rng(808);
  T a = T::uniform({16, 12, 3}, rng, 0.0, 1.0);
  T b = T::uniform({16, 12, 3}, rng, 0.0, 1.0);

  auto [ha, hb] = swap_subbands(a, b, SwapBand::HighFrequency);
  CHECK(std::abs(mean_of(ha) - mean_of(a)) < 1e-12);
  CHECK(std::abs(mean_of(hb) - mean_of(b)) < 1e-12);

  auto [la, lb] = swap_subbands(a, b, SwapBand::LowFrequency);
  CHECK(std::abs(mean_of(la) - mean_of(b)) < 1e-12);
  CHECK(std::abs(mean_of(lb) - mean_of(a)) < 1e-12);

  // swapping an image with itself is the identity
  auto [sa, sb2] = swap_subbands(a, a, SwapBand::LowFrequency);
  CHECK(max_abs_diff(sa, a) < 1e-12);
  CHECK(max_abs_diff(sb2, a) < 1e-12);

  CHECK_THROWS_AS(swap_subbands(a, T::zeros({8, 8, 3}), SwapBand::HighFrequency), ShapeMismatch);
}

TEST_CASE("analysis and synthesis gradients (constant Jacobians)") {
  Rng rng(99);
  T x = T::uniform({4, 6, 2}, rng, 0.0, 1.0);
  T w1 = T::uniform({2, 3, 2}, rng, -1.0, 1.0);
  auto res = check_gradients<double>(
      [&]() {
        auto sb = dwt2(x);
        return sum_all(mul(sb.approx, w1)) + sum_all(square(sb.diagonal)) +
               sum_all(mul(sb.horizontal, sb.vertical));
      },
      {{"x", x}}, 1e-5, 1e-6, 12, 0);
  INFO(res.summary());
  CHECK(res.pass);

  T ca = T::uniform({2, 2, 1}, rng, -1.0, 1.0);
  T ch = T::uniform({2, 2, 1}, rng, -1.0, 1.0);
  T cv = T::uniform({2, 2, 1}, rng, -1.0, 1.0);
  T cd = T::uniform({2, 2, 1}, rng, -1.0, 1.0);
  auto res2 = check_gradients<double>(
      [&]() { return sum_all(square(iwt2(ca, ch, cv, cd))); },
      {{"ca", ca}, {"ch", ch}, {"cv", cv}, {"cd", cd}}, 1e-5, 1e-6, 13, 0);
  INFO(res2.summary());
  CHECK(res2.pass);
}

TEST_CASE("multi-level decomposition recurses on the approximation") {
  Rng rng(55);
  T x = T::uniform({16, 16, 1}, rng, 0.0, 1.0);
  auto levels = dwt2_multi(x, 3);
  REQUIRE(levels.size() == 3);
  CHECK(levels[0].approx.shape() == Shape{8, 8, 1});
  CHECK(levels[1].approx.shape() == Shape{4, 4, 1});
  CHECK(levels[2].approx.shape() == Shape{2, 2, 1});

  // reconstruct from the coarsest level back up
  T cur = levels[2].approx;
  for (int l = 2; l >= 0; --l)
    cur = iwt2(cur, levels[static_cast<size_t>(l)].horizontal,
               levels[static_cast<size_t>(l)].vertical, levels[static_cast<size_t>(l)].diagonal);
  CHECK(max_abs_diff(cur, x) < 1e-12);
}
