#include <catch2/catch_amalgamated.hpp>

#include "wecdg/gradcheck.hpp"
#include "wecdg/nn.hpp"

using namespace wecdg;
using T = Tensor<double>;

TEST_CASE("layer norm basics") {
  // constant channel vector: normalized value 0, output = beta
  T gamma = T::full({3}, 1.7);
  T beta({3}, {0.1, -0.2, 0.3});
  T x = T::full({2, 2, 3}, 5.0);
  auto y = layer_norm(x, gamma, beta);
  for (int p = 0; p < 4; ++p)
    for (int c = 0; c < 3; ++c)
      CHECK(y[static_cast<size_t>(p * 3 + c)] == Catch::Approx(beta[static_cast<size_t>(c)]));

  // gamma=1, beta=0 on [1,-1]: mean 0, variance 1 -> x / sqrt(1 + eps)
  T g1 = T::full({2}, 1.0);
  T b0 = T::zeros({2});
  T v({1, 2}, {1.0, -1.0});
  auto yn = layer_norm(v, g1, b0);
  const double expect = 1.0 / std::sqrt(1.0 + 1e-6);
  CHECK(yn[0] == Catch::Approx(expect).epsilon(1e-12));
  CHECK(yn[1] == Catch::Approx(-expect).epsilon(1e-12));

  // with uniform gamma the per-position channel mean equals mean(beta)
  Rng rng(2);
  T xr = T::uniform({4, 3}, rng, -2.0, 2.0);
  T beta3({3}, {0.5, 1.5, -1.0});
  auto yr = layer_norm(xr, T::full({3}, 0.8), beta3);
  for (int p = 0; p < 4; ++p) {
    double m = 0;
    for (int c = 0; c < 3; ++c) m += yr[static_cast<size_t>(p * 3 + c)] / 3.0;
    CHECK(m == Catch::Approx((0.5 + 1.5 - 1.0) / 3.0).margin(1e-9));
  }

  CHECK_THROWS_AS(layer_norm(x, T::zeros({2}), T::zeros({3})), ShapeMismatch);
}

TEST_CASE("layer norm gradients") {
  Rng rng(3);
  T x = T::uniform({3, 4}, rng, -1.0, 1.0);
  T g = T::uniform({4}, rng, 0.5, 1.5);
  T b = T::uniform({4}, rng, -0.5, 0.5);
  T w = T::uniform({3, 4}, rng, -1.0, 1.0);
  auto res = check_gradients<double>(
      [&]() { return sum_all(mul(layer_norm(x, g, b), w)); }, {{"x", x}, {"g", g}, {"b", b}},
      1e-5, 1e-6, 5, 0);
  INFO(res.summary());
  CHECK(res.pass);
}

TEST_CASE("attention oracle cases") {
  // single key: softmax row is [1], output = V
  T q({2, 3}, {0.3, -0.2, 0.9, 0.0, 0.1, 0.2});
  T k({1, 3}, {1.0, 2.0, 3.0});
  T v({1, 2}, {7.0, -4.0});
  auto out = attention(q, k, v, 1.0);
  CHECK(out[0] == Catch::Approx(7.0));
  CHECK(out[1] == Catch::Approx(-4.0));
  CHECK(out[2] == Catch::Approx(7.0));
  CHECK(out[3] == Catch::Approx(-4.0));

  // huge temperature: uniform weights, output = column mean of V
  Rng rng(5);
  T q2 = T::uniform({3, 4}, rng, -1.0, 1.0);
  T k2 = T::uniform({5, 4}, rng, -1.0, 1.0);
  T v2 = T::uniform({5, 2}, rng, -1.0, 1.0);
  auto flat = attention(q2, k2, v2, 1e9);
  for (int j = 0; j < 2; ++j) {
    double colmean = 0;
    for (int i = 0; i < 5; ++i) colmean += v2[static_cast<size_t>(i * 2 + j)] / 5.0;
    for (int i = 0; i < 3; ++i)
      CHECK(std::abs(flat[static_cast<size_t>(i * 2 + j)] - colmean) < 1e-6);
  }

  // symmetric zero logits: uniform mixture of [2] and [4] is [3]
  T qz = T::zeros({2, 1});
  T kz = T::zeros({2, 1});
  T vz({2, 1}, {2.0, 4.0});
  auto mixed = attention(qz, kz, vz, 1.0);
  CHECK(mixed[0] == Catch::Approx(3.0));
  CHECK(mixed[1] == Catch::Approx(3.0));

  CHECK_THROWS_AS(attention(q, k, v, 0.0), NonPositiveTemperature);
  CHECK_THROWS_AS(attention(q, k, v, -2.0), NonPositiveTemperature);
  CHECK_THROWS_AS(attention(T::zeros({2, 3}), T::zeros({2, 4}), T::zeros({2, 1}), 1.0),
                  ShapeMismatch);
}

TEST_CASE("attention rows are convex combinations and shift invariant") {
  Rng rng(7);
  T q = T::uniform({4, 3}, rng, -2.0, 2.0);
  T k = T::uniform({6, 3}, rng, -2.0, 2.0);
  T v = T::uniform({6, 2}, rng, -3.0, 3.0);

  auto logits = scale(matmul(q, transpose2d(k)), 1.0 / 1.3);
  auto probs = softmax_lastdim(logits);
  for (int i = 0; i < 4; ++i) {
    double s = 0;
    for (int j = 0; j < 6; ++j) s += probs[static_cast<size_t>(i * 6 + j)];
    CHECK(std::abs(s - 1.0) < 1e-12);
  }

  auto out = attention_from_logits(logits, v);
  for (int j = 0; j < 2; ++j) {
    double lo = 1e9, hi = -1e9;
    for (int i = 0; i < 6; ++i) {
      lo = std::min(lo, v[static_cast<size_t>(i * 2 + j)]);
      hi = std::max(hi, v[static_cast<size_t>(i * 2 + j)]);
    }
    for (int i = 0; i < 4; ++i) {
      CHECK(out[static_cast<size_t>(i * 2 + j)] >= lo - 1e-12);
      CHECK(out[static_cast<size_t>(i * 2 + j)] <= hi + 1e-12);
    }
  }

  // adding a constant to every logit leaves the output unchanged
  auto shifted = attention_from_logits(add_const(logits, 17.5), v);
  for (size_t i = 0; i < out.size(); ++i)
    CHECK(shifted[i] == Catch::Approx(out[i]).margin(1e-12));
}

TEST_CASE("attention gradients incl. learnable temperature") {
  Rng rng(11);
  T q = T::uniform({3, 4}, rng, -1.0, 1.0);
  T k = T::uniform({5, 4}, rng, -1.0, 1.0);
  T v = T::uniform({5, 3}, rng, -1.0, 1.0);
  T logt = T::scalar(default_log_temperature(4));
  T w = T::uniform({3, 3}, rng, -1.0, 1.0);
  auto res = check_gradients<double>(
      [&]() { return sum_all(mul(attention(q, k, v, logt), w)); },
      {{"q", q}, {"k", k}, {"v", v}, {"logt", logt}}, 1e-5, 1e-6, 13, 0);
  INFO(res.summary());
  CHECK(res.pass);
}

TEST_CASE("gffn residual wiring and shape") {
  ParameterTree<double> ps(41);
  init_gffn(ps, "g", 3, 2.0);
  Rng rng(17);
  T x = T::uniform({4, 5, 3}, rng, -1.0, 1.0);

  auto y = gffn(x, ps, "g");
  CHECK(y.shape() == x.shape());

  // zeroed output projection leaves only the residual path
  for (size_t i = 0; i < ps.at("g.out.w").size(); ++i) ps.at("g.out.w")[i] = 0.0;
  for (size_t i = 0; i < ps.at("g.out.b").size(); ++i) ps.at("g.out.b")[i] = 0.0;
  auto y0 = gffn(x, ps, "g");
  for (size_t i = 0; i < x.size(); ++i) CHECK(y0[i] == Catch::Approx(x[i]).margin(1e-15));
}

TEST_CASE("gffn gradients") {
  ParameterTree<double> ps(43);
  init_gffn(ps, "g", 3, 2.0);
  Rng rng(19);
  T x = T::uniform({4, 4, 3}, rng, -1.0, 1.0);
  T w = T::uniform({4, 4, 3}, rng, -1.0, 1.0);
  std::vector<std::pair<std::string, T>> leaves{{"x", x}};
  for (auto &[name, t] : ps) leaves.emplace_back(name, t);
  auto res = check_gradients<double>(
      [&]() { return sum_all(mul(gffn(x, ps, "g"), w)); }, leaves, 1e-5, 1e-4, 23, 10);
  INFO(res.summary());
  CHECK(res.pass);
}

TEST_CASE("selective scan single-step hand unroll") {
  // H = W = 1 with identical parameters in all four directions:
  // y = 4 * (<C1, delta*B1*u> + d*u) with h0 = 0
  const int c = 2, n = 2;
  T x({1, 1, c}, {0.7, -0.4});
  auto rep4 = [&](std::vector<double> one, Shape s) {
    std::vector<double> all;
    for (int k = 0; k < 4; ++k) all.insert(all.end(), one.begin(), one.end());
    Shape full{4};
    full.insert(full.end(), s.begin(), s.end());
    return T(full, all);
  };
  T wd = rep4({0.5, -0.3}, {c});
  T bd = rep4({0.2, 0.1}, {c});
  T al = rep4({0.0, 0.3, -0.2, 0.5}, {c, n});
  T wb = rep4({0.4, -0.1, 0.2, 0.3}, {n, c});
  T wc = rep4({-0.5, 0.6, 0.1, -0.2}, {n, c});
  T dskip = rep4({1.1, 0.9}, {c});

  auto y = selective_scan_4dir(x, wd, bd, al, wb, wc, dskip);

  const double u[2] = {0.7, -0.4};
  double b1[2], c1[2];
  for (int s = 0; s < n; ++s) {
    b1[s] = wb[static_cast<size_t>(s * c)] * u[0] + wb[static_cast<size_t>(s * c + 1)] * u[1];
    c1[s] = wc[static_cast<size_t>(s * c)] * u[0] + wc[static_cast<size_t>(s * c + 1)] * u[1];
  }
  for (int j = 0; j < c; ++j) {
    const double z = wd[static_cast<size_t>(j)] * u[j] + bd[static_cast<size_t>(j)];
    const double delta = std::log1p(std::exp(z));
    double dot = 0;
    for (int s = 0; s < n; ++s) dot += c1[s] * (delta * b1[s] * u[j]);
    const double expect = 4.0 * (dot + dskip[static_cast<size_t>(j)] * u[j]);
    CHECK(y[static_cast<size_t>(j)] == Catch::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("selective scan memoryless limit is pointwise") {
  // a_log large positive makes exp(delta * A) vanish, so each position only
  // sees itself: permuting pixels permutes outputs identically.
  const int c = 3, n = 2;
  ParameterTree<double> ps(61);
  init_ss2d(ps, "s", c, n);
  auto &al = ps.at("s.a_log");
  for (size_t i = 0; i < al.size(); ++i) al[i] = 12.0;
  auto &wd = ps.at("s.w_delta");
  for (size_t i = 0; i < wd.size(); ++i) wd[i] = 0.0;
  auto &bd = ps.at("s.b_delta");
  for (size_t i = 0; i < bd.size(); ++i) bd[i] = 1.0;  // delta = softplus(1) > 0 everywhere

  Rng rng(29);
  T x = T::uniform({2, 3, c}, rng, -1.0, 1.0);
  auto y = selective_scan_4dir(x, ps.at("s.w_delta"), ps.at("s.b_delta"), ps.at("s.a_log"),
                               ps.at("s.w_b"), ps.at("s.w_c"), ps.at("s.d"));

  // reverse all pixels
  T xp(x.shape());
  const int t = 6;
  for (int i = 0; i < t; ++i)
    for (int j = 0; j < c; ++j)
      xp[static_cast<size_t>((t - 1 - i) * c + j)] = x[static_cast<size_t>(i * c + j)];
  auto yp = selective_scan_4dir(xp, ps.at("s.w_delta"), ps.at("s.b_delta"), ps.at("s.a_log"),
                                ps.at("s.w_b"), ps.at("s.w_c"), ps.at("s.d"));
  for (int i = 0; i < t; ++i)
    for (int j = 0; j < c; ++j)
      CHECK(yp[static_cast<size_t>((t - 1 - i) * c + j)] ==
            Catch::Approx(y[static_cast<size_t>(i * c + j)]).margin(1e-12));
}

TEST_CASE("ss2d block preserves shape and passes gradcheck") {
  const int c = 2, n = 2;
  ParameterTree<double> ps(71);
  init_ss2d(ps, "s", c, n);
  Rng rng(31);
  T x = T::uniform({4, 4, c}, rng, -1.0, 1.0);
  auto y = ss2d(x, ps, "s");
  CHECK(y.shape() == x.shape());

  T w = T::uniform({4, 4, c}, rng, -1.0, 1.0);
  std::vector<std::pair<std::string, T>> leaves{{"x", x}};
  for (auto &[name, t] : ps) leaves.emplace_back(name, t);
  auto res = check_gradients<double>(
      [&]() { return sum_all(mul(ss2d(x, ps, "s"), w)); }, leaves, 1e-5, 1e-4, 37, 12);
  INFO(res.summary());
  CHECK(res.pass);
}

TEST_CASE("token budget downsampling") {
  ParameterTree<double> ps(81);
  init_token_down(ps, "d", 2);
  Rng rng(37);
  T small = T::uniform({4, 4, 2}, rng, 0.0, 1.0);
  auto tok = tokens_within_budget(small, ps.at("d.w"), 1024);
  CHECK(tok.shape() == Shape{16, 2});

  T big = T::uniform({40, 40, 2}, rng, 0.0, 1.0);
  auto tok2 = tokens_within_budget(big, ps.at("d.w"), 100);
  CHECK(tok2.dim(0) <= 100);
  CHECK(tok2.dim(1) == 2);
}
