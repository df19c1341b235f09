#include <catch2/catch_amalgamated.hpp>

#include "wecdg/gradcheck.hpp"
#include "wecdg/params.hpp"
#include "wecdg/tensor.hpp"

using namespace wecdg;
using T = Tensor<double>;

TEST_CASE("elementwise add and mul") {
  T a({2}, {1.0, 2.0});
  T b({2}, {3.0, 4.0});
  auto c = add(a, b);
  CHECK(c[0] == 4.0);
  CHECK(c[1] == 6.0);

  T x({3}, {1.5, -2.0, 0.25});
  auto y = mul(x, T::full({3}, 1.0));
  for (size_t i = 0; i < x.size(); ++i) CHECK(y[i] == x[i]);
}

TEST_CASE("trailing-dimension broadcasting") {
  T col({2, 1}, {1.0, 2.0});
  T row({2}, {10.0, 20.0});
  auto r = add(col, row);
  REQUIRE(r.shape() == Shape{2, 2});
  CHECK(r[0] == 11.0);
  CHECK(r[1] == 21.0);
  CHECK(r[2] == 12.0);
  CHECK(r[3] == 22.0);

  CHECK_THROWS_AS(add(T({3}, {1, 2, 3}), T({2}, {1, 2})), ShapeMismatch);
}

TEST_CASE("broadcast gradients reduce to input shapes") {
  T col({2, 1}, {1.0, 2.0});
  T row({2}, {10.0, 20.0});
  col.set_requires_grad(true);
  row.set_requires_grad(true);
  col.zero_grad();
  row.zero_grad();
  auto loss = sum_all(mul(add(col, row), add(col, row)));
  backward(loss);
  // d/dcol sum((col+row)^2) = sum over row axis of 2(col+row)
  CHECK(col.grad()[0] == Catch::Approx(2 * (11.0 + 21.0)));
  CHECK(col.grad()[1] == Catch::Approx(2 * (12.0 + 22.0)));
  CHECK(row.grad()[0] == Catch::Approx(2 * (11.0 + 12.0)));
  CHECK(row.grad()[1] == Catch::Approx(2 * (21.0 + 22.0)));
}

TEST_CASE("matmul identity and arithmetic") {
  T eye({2, 2}, {1.0, 0.0, 0.0, 1.0});
  T m({2, 2}, {1.0, 2.0, 3.0, 4.0});
  auto p = matmul(eye, m);
  for (size_t i = 0; i < 4; ++i) CHECK(p[i] == m[i]);

  T a({1, 2}, {1.0, 2.0});
  T b({2, 1}, {3.0, 4.0});
  auto s = matmul(a, b);
  REQUIRE(s.size() == 1);
  CHECK(s[0] == 11.0);

  CHECK_THROWS_AS(matmul(T({2, 3}), T({2, 2})), ShapeMismatch);
}

TEST_CASE("matmul backward matches finite differences") {
  Rng rng(42);
  T a = T::uniform({3, 4}, rng, -1.0, 1.0);
  T b = T::uniform({4, 5}, rng, -1.0, 1.0);
  T w = T::uniform({3, 5}, rng, -1.0, 1.0);  // fixed weights make grads dense
  auto res = check_gradients<double>(
      [&]() { return sum_all(mul(matmul(a, b), w)); }, {{"a", a}, {"b", b}}, 1e-5, 1e-6, 7, 0);
  INFO(res.summary());
  CHECK(res.pass);
}

TEST_CASE("backward of sum is ones; x*x gives 2x") {
  T x({3}, {1.0, 2.0, 3.0});
  x.set_requires_grad(true);
  x.zero_grad();
  backward(sum_all(x));
  for (int i = 0; i < 3; ++i) CHECK(x.grad()[static_cast<size_t>(i)] == 1.0);

  x.zero_grad();
  backward(sum_all(mul(x, x)));
  CHECK(x.grad()[0] == 2.0);
  CHECK(x.grad()[1] == 4.0);
  CHECK(x.grad()[2] == 6.0);
}

TEST_CASE("backward requires a scalar") {
  T x({3}, {1.0, 2.0, 3.0});
  x.set_requires_grad(true);
  CHECK_THROWS_AS(backward(x), NotScalar);
}

TEST_CASE("disconnected leaves keep zero gradients") {
  T x({2}, {1.0, 2.0});
  T y({2}, {5.0, 6.0});
  x.set_requires_grad(true);
  y.set_requires_grad(true);
  x.zero_grad();
  y.zero_grad();
  backward(sum_all(x));
  CHECK(y.grad()[0] == 0.0);
  CHECK(y.grad()[1] == 0.0);
}

TEST_CASE("gradients accumulate additively across uses") {
  T x({1}, {3.0});
  x.set_requires_grad(true);
  x.zero_grad();
  backward(sum_all(add(x, x)));
  CHECK(x.grad()[0] == 2.0);
}

TEST_CASE("gradient linearity in loss combination") {
  Rng rng(3);
  auto make_loss = [&](T &x, double wa, double wb) {
    auto f = sum_all(mul(x, x));
    auto g = sum_all(silu(x));
    return add(scale(f, wa), scale(g, wb));
  };
  T x = T::uniform({5}, rng, -2.0, 2.0);
  x.set_requires_grad(true);

  x.zero_grad();
  backward(make_loss(x, 1.0, 0.0));
  auto gf = x.grad();
  x.zero_grad();
  backward(make_loss(x, 0.0, 1.0));
  auto gg = x.grad();
  x.zero_grad();
  backward(make_loss(x, 2.5, -1.5));
  for (size_t i = 0; i < x.size(); ++i)
    CHECK(x.grad()[i] == Catch::Approx(2.5 * gf[i] - 1.5 * gg[i]).margin(1e-12));
}

TEST_CASE("unary op gradients vs finite differences") {
  Rng rng(11);
  T x = T::uniform({4, 3}, rng, 0.2, 1.8);  // positive, away from kinks
  auto res = check_gradients<double>(
      [&]() {
        auto y = add(mul(silu(x), gelu(x)), add(softplus(log(x)), sqrt(x)));
        return sum_all(mul(y, sigmoid(x)));
      },
      {{"x", x}}, 1e-6, 1e-5, 5, 0);
  INFO(res.summary());
  CHECK(res.pass);
}

TEST_CASE("softmax rows sum to one and gradcheck passes") {
  Rng rng(5);
  T x = T::uniform({4, 6}, rng, -3.0, 3.0);
  auto s = softmax_lastdim(x);
  for (int r = 0; r < 4; ++r) {
    double acc = 0;
    for (int c = 0; c < 6; ++c) acc += s[static_cast<size_t>(r * 6 + c)];
    CHECK(acc == Catch::Approx(1.0).epsilon(1e-12));
  }
  T w = T::uniform({4, 6}, rng, -1.0, 1.0);
  auto res = check_gradients<double>(
      [&]() { return sum_all(mul(softmax_lastdim(x), w)); }, {{"x", x}}, 1e-5, 1e-6, 2, 0);
  INFO(res.summary());
  CHECK(res.pass);
}

TEST_CASE("conv2d / dwconv2d basics") {
  // 1x1 conv with identity weights is the identity
  Rng rng(9);
  T x = T::uniform({3, 3, 2}, rng, 0.0, 1.0);
  T w({1, 1, 2, 2}, {1.0, 0.0, 0.0, 1.0});
  auto y = conv2d(x, w, static_cast<const T *>(nullptr), 1, 0);
  for (size_t i = 0; i < x.size(); ++i) CHECK(y[i] == x[i]);

  // depthwise delta kernel is the identity
  T dw = T::zeros({3, 3, 2});
  dw[(1 * 3 + 1) * 2 + 0] = 1.0;
  dw[(1 * 3 + 1) * 2 + 1] = 1.0;
  T db = T::zeros({2});
  auto yd = dwconv2d(x, dw, &db, 1);
  for (size_t i = 0; i < x.size(); ++i) CHECK(yd[i] == Catch::Approx(x[i]));

  // averaging kernel: center output is the mean of the 3x3 neighborhood
  T avg = T::full({3, 3, 1}, 1.0 / 9.0);
  T xa = T::uniform({3, 3, 1}, rng, 0.0, 1.0);
  T zb = T::zeros({1});
  auto ya = dwconv2d(xa, avg, &zb, 1);
  double mean9 = 0;
  for (size_t i = 0; i < 9; ++i) mean9 += xa[i] / 9.0;
  CHECK(ya[4] == Catch::Approx(mean9));
}

TEST_CASE("conv gradients vs finite differences") {
  Rng rng(13);
  T x = T::uniform({5, 4, 3}, rng, -1.0, 1.0);
  T w = T::uniform({3, 3, 3, 2}, rng, -0.5, 0.5);
  T b = T::uniform({2}, rng, -0.5, 0.5);
  T mask = T::uniform({3, 2, 2}, rng, -1.0, 1.0);  // stride-2 output 3x2x2
  auto res = check_gradients<double>(
      [&]() { return sum_all(mul(conv2d(x, w, &b, 2, 1), mask)); },
      {{"x", x}, {"w", w}, {"b", b}}, 1e-5, 1e-6, 17, 0);
  INFO(res.summary());
  CHECK(res.pass);

  T dw = T::uniform({3, 3, 3}, rng, -0.5, 0.5);
  T db = T::uniform({3}, rng, -0.5, 0.5);
  T mask2 = T::uniform({5, 4, 3}, rng, -1.0, 1.0);
  auto res2 = check_gradients<double>(
      [&]() { return sum_all(mul(dwconv2d(x, dw, &db, 1), mask2)); },
      {{"x", x}, {"dw", dw}, {"db", db}}, 1e-5, 1e-6, 19, 0);
  INFO(res2.summary());
  CHECK(res2.pass);
}

TEST_CASE("upsample2x bilinear") {
  // constant image stays constant at doubled size
  T c = T::full({4, 5, 2}, 0.37);
  auto up = upsample2x(c);
  REQUIRE(up.shape() == Shape{8, 10, 2});
  for (size_t i = 0; i < up.size(); ++i) CHECK(up[i] == Catch::Approx(0.37));

  // 1D ramp: interior outputs mix neighbors with weights 0.75/0.25
  T ramp({1, 4, 1}, {0.0, 1.0, 2.0, 3.0});
  auto ur = upsample2x(ramp);
  REQUIRE(ur.shape() == Shape{2, 8, 1});
  CHECK(ur[0] == Catch::Approx(0.0));                      // clamped border
  CHECK(ur[1] == Catch::Approx(0.75 * 0.0 + 0.25 * 1.0));  // 0.25
  CHECK(ur[2] == Catch::Approx(0.25 * 0.0 + 0.75 * 1.0));  // 0.75
  CHECK(ur[3] == Catch::Approx(0.75 * 1.0 + 0.25 * 2.0));
  CHECK(ur[7] == Catch::Approx(3.0));

  Rng rng(21);
  T x = T::uniform({3, 4, 2}, rng, -1.0, 1.0);
  T mask = T::uniform({6, 8, 2}, rng, -1.0, 1.0);
  auto res = check_gradients<double>(
      [&]() { return sum_all(mul(upsample2x(x), mask)); }, {{"x", x}}, 1e-5, 1e-6, 23, 0);
  INFO(res.summary());
  CHECK(res.pass);
}

TEST_CASE("reflect pad and crop round-trip") {
  Rng rng(31);
  T x = T::uniform({5, 6, 2}, rng, 0.0, 1.0);
  auto padded = reflect_pad_to(x, 8, 8);
  REQUIRE(padded.shape() == Shape{8, 8, 2});
  // mirrored rows: row 5 reflects row 3 (edge not repeated)
  for (int j = 0; j < 6 * 2; ++j)
    CHECK(padded[static_cast<size_t>(5 * 8 * 2 + j)] == x[static_cast<size_t>(3 * 6 * 2 + j)]);
  auto back = crop_to(padded, 5, 6);
  for (size_t i = 0; i < x.size(); ++i) CHECK(back[i] == x[i]);
}

TEST_CASE("concat and slice on the channel dim") {
  Rng rng(33);
  T a = T::uniform({2, 2, 2}, rng, 0.0, 1.0);
  T b = T::uniform({2, 2, 3}, rng, 0.0, 1.0);
  auto cat = concat_lastdim<double>({a, b});
  REQUIRE(cat.shape() == Shape{2, 2, 5});
  auto sa = slice_lastdim(cat, 0, 2);
  auto sb = slice_lastdim(cat, 2, 3);
  for (size_t i = 0; i < a.size(); ++i) CHECK(sa[i] == a[i]);
  for (size_t i = 0; i < b.size(); ++i) CHECK(sb[i] == b[i]);

  auto res = check_gradients<double>(
      [&]() { return sum_all(square(slice_lastdim(concat_lastdim<double>({a, b}), 1, 3))); },
      {{"a", a}, {"b", b}}, 1e-5, 1e-6, 37, 0);
  INFO(res.summary());
  CHECK(res.pass);
}

TEST_CASE("parameter tree determinism and adam") {
  ParameterTree<double> p1(123), p2(123), p3(124);
  p1.add_weight("w", {4, 4}, 4);
  p2.add_weight("w", {4, 4}, 4);
  p3.add_weight("w", {4, 4}, 4);
  bool same = true, diff = false;
  for (size_t i = 0; i < 16; ++i) {
    same &= p1.at("w")[i] == p2.at("w")[i];
    diff |= p1.at("w")[i] != p3.at("w")[i];
  }
  CHECK(same);
  CHECK(diff);
  CHECK_THROWS_AS(p1.add_weight("w", {2}, 2), ConfigError);

  // initialization independent of insertion order
  ParameterTree<double> q1(9), q2(9);
  q1.add_weight("a", {3}, 3);
  q1.add_weight("b", {3}, 3);
  q2.add_weight("b", {3}, 3);
  q2.add_weight("a", {3}, 3);
  for (size_t i = 0; i < 3; ++i) {
    CHECK(q1.at("a")[i] == q2.at("a")[i]);
    CHECK(q1.at("b")[i] == q2.at("b")[i]);
  }
}

TEST_CASE("adam single-step hand evaluation") {
  // one scalar parameter, gradient 1 at t=1, lr=0.1:
  // m_hat = 1, v_hat = 1, update = -0.1 / (1 + eps)
  ParameterTree<double> ps(0);
  ps.add("w", T({1}, {1.0}));
  ps.zero_grad();
  ps.at("w").grad()[0] = 1.0;
  Adam<double> opt(0.1);
  opt.step(ps);
  const double expected = 1.0 - 0.1 / (1.0 + 1e-8);
  CHECK(ps.at("w")[0] == Catch::Approx(expected).epsilon(1e-12));
}

TEST_CASE("adam fixed point at zero gradient and missing-grad error") {
  ParameterTree<double> ps(0);
  ps.add("w", T({3}, {1.0, -2.0, 3.0}));
  Adam<double> opt(0.05);
  CHECK_THROWS_AS(opt.step(ps), MissingGrad);
  ps.zero_grad();
  for (int s = 0; s < 3; ++s) opt.step(ps);
  CHECK(ps.at("w")[0] == 1.0);
  CHECK(ps.at("w")[1] == -2.0);
  CHECK(ps.at("w")[2] == 3.0);
}

TEST_CASE("adam converges on a quadratic") {
  ParameterTree<double> ps(7);
  ps.add("w", T({2}, {4.0, -3.0}));
  Adam<double> opt(0.1);
  for (int s = 0; s < 400; ++s) {
    ps.zero_grad();
    auto w = ps.at("w");
    backward(sum_all(square(add_const(w, -1.0))));
    opt.step(ps);
  }
  CHECK(ps.at("w")[0] == Catch::Approx(1.0).margin(1e-3));
  CHECK(ps.at("w")[1] == Catch::Approx(1.0).margin(1e-3));
}

TEST_CASE("no-grad mode skips taping") {
  T x({2}, {1.0, 2.0});
  x.set_requires_grad(true);
  NoGradGuard ng;
  auto y = sum_all(mul(x, x));
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("values stay finite through composite ops") {
  Rng rng(77);
  T x = T::uniform({8, 8, 3}, rng, 0.0, 1.0);
  auto y = silu(conv2d(x, T::uniform({3, 3, 3, 4}, rng, -0.5, 0.5),
                       static_cast<const T *>(nullptr), 1, 1));
  CHECK(all_finite(y));
}
